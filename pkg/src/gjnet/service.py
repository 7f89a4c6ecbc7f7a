"""Service-time distributions and grid checks of their regularity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from .errors import ConfigError, TailExhausted

TAIL_EPS = 1e-12


class ServiceDistribution:
    """Service time law with density, survival, hazard and a sampler.

    Subclasses override the vectorised ``pdf``/``logsf``/``ppf`` primitives;
    everything else is derived.  Instances are immutable.
    """

    family = "abstract"
    has_density = True
    smooth = True            # density has a continuous derivative on (0, inf)
    support_upper = math.inf
    tail_limits: tuple[float, float] | None = None  # (lim hazard, lim d/dtau hazard)

    def __init__(self, **params):
        self.params = params

    # primitives
    def pdf(self, t):
        raise NotImplementedError

    def logsf(self, t):
        raise NotImplementedError

    def ppf(self, q):
        raise NotImplementedError

    def sample_many(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.ppf(rng.random(size))

    @property
    def mean(self) -> float:
        raise NotImplementedError

    # derived
    def sf(self, t):
        return np.exp(self.logsf(t))

    def cdf(self, t):
        return -np.expm1(self.logsf(t))

    def hazard(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.pdf(t) / self.sf(t)

    def sample(self, rng: np.random.Generator) -> float:
        return float(self.sample_many(rng, 1)[0])

    def to_config(self) -> dict:
        return {"family": self.family, "params": dict(self.params)}

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params.items())
        return f"{type(self).__name__}({args})"

    def __eq__(self, other):
        return isinstance(other, ServiceDistribution) and self.to_config() == other.to_config()

    def __hash__(self):
        return hash(repr(self))


class Exponential(ServiceDistribution):
    family = "exponential"

    def __init__(self, rate: float = 1.0):
        if rate <= 0:
            raise ConfigError("exponential rate must be positive")
        super().__init__(rate=float(rate))
        self.rate = float(rate)
        self.tail_limits = (self.rate, 0.0)

    def pdf(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t >= 0, self.rate * np.exp(-self.rate * np.maximum(t, 0)), 0.0)

    def logsf(self, t):
        return -self.rate * np.maximum(np.asarray(t, dtype=float), 0.0)

    def hazard(self, t):
        return np.full(np.shape(t), self.rate)

    def ppf(self, q):
        return -np.log1p(-np.asarray(q, dtype=float)) / self.rate

    @property
    def mean(self):
        return 1.0 / self.rate


class _Scipy(ServiceDistribution):
    frozen = None

    def pdf(self, t):
        return self.frozen.pdf(t)

    def logsf(self, t):
        return self.frozen.logsf(t)

    def ppf(self, q):
        return self.frozen.ppf(q)

    def hazard(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.exp(self.frozen.logpdf(t) - self.frozen.logsf(t))

    @property
    def mean(self):
        return float(self.frozen.mean())


class Gamma(_Scipy):
    family = "gamma"

    def __init__(self, shape: float, scale: float = 1.0):
        if shape <= 0 or scale <= 0:
            raise ConfigError("gamma shape and scale must be positive")
        super().__init__(shape=float(shape), scale=float(scale))
        self.frozen = stats.gamma(shape, scale=scale)
        self.tail_limits = (1.0 / scale, 0.0)

    def sample_many(self, rng, size):
        return rng.gamma(self.params["shape"], self.params["scale"], size)


class Lognormal(_Scipy):
    family = "lognormal"

    def __init__(self, mu: float = 0.0, sigma: float = 1.0):
        if sigma <= 0:
            raise ConfigError("lognormal sigma must be positive")
        super().__init__(mu=float(mu), sigma=float(sigma))
        self.frozen = stats.lognorm(sigma, scale=math.exp(mu))
        self.tail_limits = (0.0, 0.0)

    def sample_many(self, rng, size):
        return rng.lognormal(self.params["mu"], self.params["sigma"], size)


class Uniform(_Scipy):
    family = "uniform"
    smooth = False

    def __init__(self, low: float = 0.0, high: float = 1.0):
        if not 0 <= low < high:
            raise ConfigError("uniform needs 0 <= low < high")
        super().__init__(low=float(low), high=float(high))
        self.frozen = stats.uniform(low, high - low)
        self.support_upper = float(high)
        self.tail_limits = None


class Hyperexponential(ServiceDistribution):
    family = "hyperexponential"

    def __init__(self, probs, rates):
        probs = np.asarray(probs, dtype=float)
        rates = np.asarray(rates, dtype=float)
        if probs.shape != rates.shape or probs.ndim != 1 or probs.size == 0:
            raise ConfigError("hyperexponential needs equal-length probs and rates")
        if np.any(probs < 0) or abs(probs.sum() - 1) > 1e-12 or np.any(rates <= 0):
            raise ConfigError("hyperexponential probs must sum to 1 and rates be positive")
        super().__init__(probs=probs.tolist(), rates=rates.tolist())
        self.probs, self.rates = probs, rates
        self.tail_limits = (float(rates[probs > 0].min()), 0.0)

    def pdf(self, t):
        t = np.asarray(t, dtype=float)
        tt = np.maximum(t, 0)[..., None]
        return np.where(t >= 0, np.sum(self.probs * self.rates * np.exp(-self.rates * tt), axis=-1), 0.0)

    def logsf(self, t):
        tt = np.maximum(np.asarray(t, dtype=float), 0)[..., None]
        with np.errstate(divide="ignore"):
            logs = np.log(self.probs) - self.rates * tt
        return np.logaddexp.reduce(logs, axis=-1)

    def ppf(self, q):
        q = np.atleast_1d(np.asarray(q, dtype=float))
        hi = np.full(q.shape, 1.0)
        while np.any(self.cdf(hi) < q):
            hi = np.where(self.cdf(hi) < q, hi * 2, hi)
        lo = np.zeros(q.shape)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < q
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def sample_many(self, rng, size):
        branch = np.searchsorted(np.cumsum(self.probs), rng.random(size), side="right")
        branch = np.minimum(branch, self.rates.size - 1)
        return -np.log1p(-rng.random(size)) / self.rates[branch]

    @property
    def mean(self):
        return float(np.sum(self.probs / self.rates))


class Deterministic(ServiceDistribution):
    family = "deterministic"
    has_density = False
    smooth = False

    def __init__(self, value: float = 1.0):
        if value <= 0:
            raise ConfigError("deterministic service time must be positive")
        super().__init__(value=float(value))
        self.value = float(value)
        self.support_upper = self.value

    def pdf(self, t):
        return np.zeros(np.shape(t))

    def logsf(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t < self.value, 0.0, -np.inf)

    def ppf(self, q):
        return np.full(np.shape(q), self.value)

    def hazard(self, t):
        return np.where(np.asarray(t) < self.value, 0.0, np.inf)

    @property
    def mean(self):
        return self.value


class Tabulated(ServiceDistribution):
    """Density tabulated on a uniform grid, linearly interpolated, zero beyond it."""

    family = "tabulated"

    def __init__(self, t, p):
        t = np.asarray(t, dtype=float)
        p = np.asarray(p, dtype=float)
        if t.ndim != 1 or t.shape != p.shape or t.size < 3:
            raise ConfigError("tabulated density needs matching 1-d t and p arrays")
        dt = np.diff(t)
        if t[0] != 0 or np.any(dt <= 0) or np.ptp(dt) > 1e-9 * dt.mean():
            raise ConfigError("tabulated density must start at t=0 with uniform spacing")
        if np.any(p < 0):
            raise ConfigError("tabulated density must be non-negative")
        mass = integrate.trapezoid(p, t)
        if mass <= 0:
            raise ConfigError("tabulated density has zero mass")
        super().__init__(t=t.tolist(), p=p.tolist())
        self.t, self.p = t, p / mass
        self._cdf = np.concatenate([[0.0], np.cumsum(0.5 * (self.p[1:] + self.p[:-1]) * dt)])
        self._cdf /= self._cdf[-1]
        self.support_upper = float(t[-1])

    def pdf(self, t):
        return np.interp(t, self.t, self.p, left=0.0, right=0.0)

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        # exact integral of the piecewise-linear density
        k = np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, self.t.size - 2)
        x = np.clip(t - self.t[k], 0, None)
        h = self.t[1] - self.t[0]
        x = np.minimum(x, h)
        slope = (self.p[k + 1] - self.p[k]) / h
        out = self._cdf[k] + self.p[k] * x + 0.5 * slope * x * x
        return np.clip(np.where(t <= 0, 0.0, np.where(t >= self.t[-1], 1.0, out)), 0.0, 1.0)

    def logsf(self, t):
        with np.errstate(divide="ignore"):
            return np.log(np.clip(1.0 - self.cdf(t), 0.0, 1.0))

    def ppf(self, q):
        return np.interp(q, self._cdf, self.t)

    @property
    def mean(self):
        return float(integrate.trapezoid(self.t * self.p, self.t))


FAMILIES = {
    "exponential": Exponential,
    "gamma": Gamma,
    "lognormal": Lognormal,
    "hyperexponential": Hyperexponential,
    "uniform": Uniform,
    "deterministic": Deterministic,
    "tabulated": Tabulated,
}


def from_config(doc: dict) -> ServiceDistribution:
    """Build from ``{"family": ..., "params": {...}}``."""
    if not isinstance(doc, dict) or "family" not in doc:
        raise ConfigError("service distribution needs a 'family' key")
    unknown = set(doc) - {"family", "params"}
    if unknown:
        raise ConfigError(f"unknown keys in service distribution: {sorted(unknown)}")
    cls = FAMILIES.get(doc["family"])
    if cls is None:
        raise ConfigError(f"unknown service family {doc['family']!r}")
    try:
        return cls(**doc.get("params", {}))
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {doc['family']}: {exc}") from None


def load_tabulated_csv(path) -> Tabulated:
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    return Tabulated(data[:, 0], data[:, 1])


# -- operations ---------------------------------------------------------------

def _check_tail(dist: ServiceDistribution, tau: float) -> None:
    if tau < 0:
        raise ValueError("elapsed time must be non-negative")
    if float(dist.cdf(tau)) >= 1 - TAIL_EPS:
        raise TailExhausted(f"F({tau}) is within {TAIL_EPS} of 1")


def _survival_ratio(dist, tau):
    base = float(dist.logsf(tau))
    return lambda s: float(np.exp(dist.logsf(tau + s) - base))


def residual_mean(dist: ServiceDistribution, tau: float) -> float:
    """Expected remaining service ``E(eta - tau | eta > tau)``."""
    _check_tail(dist, tau)
    if isinstance(dist, Deterministic):
        return dist.value - tau
    ratio = _survival_ratio(dist, tau)
    upper = dist.support_upper - tau
    if math.isfinite(upper):
        val, _ = integrate.quad(ratio, 0.0, upper, limit=200)
    else:
        val, _ = integrate.quad(ratio, 0.0, np.inf, limit=200, epsabs=1e-13, epsrel=1e-12)
    return float(val)


def hazard_at(dist: ServiceDistribution, tau: float) -> float:
    """Instantaneous completion intensity ``p(tau) / (1 - F(tau))``."""
    _check_tail(dist, tau)
    return float(dist.hazard(tau))


def conditional_moment(dist: ServiceDistribution, tau: float, power: float) -> float:
    """``E[(eta - tau)^power | eta > tau]`` by the tail-integral formula."""
    _check_tail(dist, tau)
    if isinstance(dist, Deterministic):
        return (dist.value - tau) ** power
    ratio = _survival_ratio(dist, tau)
    f = lambda s: power * s ** (power - 1) * ratio(s)
    upper = dist.support_upper - tau
    val, _ = integrate.quad(f, 0.0, upper if math.isfinite(upper) else np.inf, limit=200)
    return float(val)


def sample(dist: ServiceDistribution, rng: np.random.Generator) -> float:
    return dist.sample(rng)


# -- regularity ---------------------------------------------------------------

@dataclass
class ConditionResult:
    condition: int
    name: str
    passed: bool
    witness: dict
    status: str = "certified"  # or "grid-only"


@dataclass
class RegularityReport:
    family: str
    delta: float
    conditions: list[ConditionResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    def __getitem__(self, k: int) -> ConditionResult:
        return self.conditions[k - 1]

    def to_dict(self) -> dict:
        return {"family": self.family, "delta": self.delta, "passed": self.passed,
                "conditions": [c.__dict__ for c in self.conditions]}


def default_grid(dist: ServiceDistribution, points: int = 2001) -> np.ndarray:
    q = float(dist.ppf(1 - 1e-6))
    return np.linspace(0.0, 1.05 * q, points)


def validate_regularity(dist: ServiceDistribution, grid=None, delta: float = 0.5) -> RegularityReport:
    """Grid certification of the five density/hazard regularity conditions.

    Positivity is checked at grid points ``t > 0``.  Tail limits come from the
    analytic tail of built-in families; tabulated laws get grid-only status.
    """
    grid = default_grid(dist) if grid is None else np.asarray(grid, dtype=float)
    report = RegularityReport(dist.family, delta)
    status = "grid-only" if dist.tail_limits is None and dist.has_density else "certified"
    add = report.conditions.append

    if not dist.has_density:
        reason = {"reason": f"no density: point mass at {dist.params.get('value')}"}
        add(ConditionResult(1, "positive bounded density", False, reason))
        add(ConditionResult(2, "strong Lipschitz density", False, reason))
        add(_moment_condition(dist, grid, delta))
        add(ConditionResult(4, "bounded hazard and derivative", False, reason))
        add(ConditionResult(5, "hazard tail limits", False, reason))
        return report

    inner = grid[grid > 0]
    p = dist.pdf(inner)
    sup_p = float(np.max(dist.pdf(grid)))
    zero = np.flatnonzero(~(p > 0))
    if zero.size:
        add(ConditionResult(1, "positive bounded density", False,
                            {"first_zero_t": float(inner[zero[0]]), "sup_density": sup_p}))
    elif math.isfinite(dist.support_upper):
        add(ConditionResult(1, "positive bounded density", False,
                            {"first_zero_t": dist.support_upper, "sup_density": sup_p}))
    else:
        add(ConditionResult(1, "positive bounded density", bool(np.isfinite(sup_p)),
                            {"sup_density": sup_p}, status))

    dt = np.diff(inner)
    with np.errstate(divide="ignore", invalid="ignore"):
        fwd = np.abs(np.diff(p)) / (p[:-1] * dt)
        bwd = np.abs(np.diff(p)) / (p[1:] * dt)
    lip = float(np.max(np.concatenate([fwd, bwd]))) if dt.size else 0.0
    lip_ok = bool(np.isfinite(lip)) and dist.smooth
    add(ConditionResult(2, "strong Lipschitz density", lip_ok and not zero.size,
                        {"lipschitz_C": lip if np.isfinite(lip) else None}, status))

    add(_moment_condition(dist, grid, delta))

    alive = grid[dist.sf(grid) > TAIL_EPS]
    h = dist.hazard(alive)
    dh = np.gradient(h, alive) if alive.size > 1 else np.zeros_like(h)
    sup_h = float(np.max(h)) if h.size else math.inf
    sup_dh = float(np.max(np.abs(dh))) if dh.size else math.inf
    ok4 = dist.smooth and np.isfinite(sup_h) and np.isfinite(sup_dh) and (
        dist.tail_limits is not None or dist.family == "tabulated")
    add(ConditionResult(4, "bounded hazard and derivative", bool(ok4),
                        {"sup_hazard": sup_h, "sup_hazard_derivative": sup_dh}, status))

    end = {"hazard_at_grid_end": float(h[-1]) if h.size else None,
           "hazard_derivative_at_grid_end": float(dh[-1]) if dh.size else None}
    if dist.tail_limits is not None:
        lim_h, lim_dh = dist.tail_limits
        add(ConditionResult(5, "hazard tail limits", True,
                            {"hazard_limit": lim_h, "hazard_derivative_limit": lim_dh, **end}))
    elif dist.family == "tabulated":
        tail = h[int(0.9 * h.size):]
        steady = tail.size > 1 and np.ptp(tail) <= 1e-2 * max(abs(tail).max(), 1e-300)
        add(ConditionResult(5, "hazard tail limits", bool(steady), end, "grid-only"))
    else:
        add(ConditionResult(5, "hazard tail limits", False,
                            {"reason": "hazard diverges at the end of bounded support", **end}))
    return report


def _moment_condition(dist, grid, delta) -> ConditionResult:
    power = 2.0 + delta
    alive = grid[dist.sf(grid) > 1e-8]
    taus = alive[:: max(1, alive.size // 40)]
    per_tau = [conditional_moment(dist, float(t), power) for t in taus]
    finite = bool(np.all(np.isfinite(per_tau)))
    return ConditionResult(3, "2+delta conditional moment", finite, {
        "power": power,
        "unconditional": per_tau[0] if per_tau else None,
        "sup_over_grid": float(np.max(per_tau)) if per_tau else None,
        "per_tau": [[float(t), float(v)] for t, v in zip(taus, per_tau)],
    })
