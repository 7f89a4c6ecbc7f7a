"""Mean-field (N = infinity) dynamics of per-type queue-state measures.

Each type carries a probability measure over ``0`` (empty) and ``(n, tau)``
(``n`` customers, the one in service has been served for ``tau``).  Elapsed
service lives on a uniform grid of step ``dtau``; cell ``k`` holds
``tau in [k dtau, (k+1) dtau)`` and the last cell holds the whole tail.  One
time step of length ``dt = dtau`` does, per type:

1. completions: cell ``k`` finishes with the exact one-cell probability
   ``1 - S((k+1) dtau) / S(k dtau)``; the tail cell uses ``1/R(tau_tail)``
   as its constant hazard.  ``b_i`` is completed mass per unit time.
2. rates: ``lambda_i = v_i + sum_j b_j p_ji`` (closed: no ``v_i``).
3. aging: in-service customers move one cell on; services started during
   the step (after a completion) enter cell 0.
4. arrivals: every state gains a customer with probability ``lambda_i dt``;
   an arrival to an empty queue starts service in cell 0.

The scheme conserves customers exactly in closed mode apart from arrivals
blocked at ``n_max``, which are accumulated as overflow.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import Infinite, MassLoss, Overloaded, OverflowBreach, TailExhausted
from .network import NetworkSpec
from .rates import Flattening, RateTrace, detect_flattening
from .service import ServiceDistribution, residual_mean

__all__ = [
    "NodeMeasure", "ServiceGrid", "NLMPResult", "step", "integrate", "detect_flattening",
    "stationary_single_node", "expected_service_time", "mean_customers",
]

TAIL_QUANTILE = 1 - 1e-8
MASS_TOL = 1e-9


@dataclass
class ServiceGrid:
    """Per-cell completion probabilities of one service law on a ``dtau`` grid."""

    dist: ServiceDistribution
    dtau: float
    q: np.ndarray          # completion probability per cell per step
    tau: np.ndarray        # left edge of each cell

    @property
    def K(self) -> int:
        return self.q.size

    @classmethod
    def build(cls, dist: ServiceDistribution, dtau: float, tau_max: float | None = None,
              collapse: bool = True) -> "ServiceGrid":
        if tau_max is None:
            tau_max = float(dist.ppf(TAIL_QUANTILE))
        tau_max = min(tau_max, dist.support_upper)
        K = max(1, int(np.ceil(tau_max / dtau)))
        edges = np.arange(K + 1) * dtau
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.exp(dist.logsf(edges[1:]) - dist.logsf(edges[:-1]))
        q = np.clip(1.0 - np.nan_to_num(ratio, nan=0.0), 0.0, 1.0)
        tail_tau = (K - 1) * dtau
        q[-1] = _tail_probability(dist, tail_tau, dtau)
        if collapse and K > 1:
            # memoryless tail: merge every trailing cell that matches the tail hazard
            same = np.abs(q - q[-1]) <= 1e-12 * max(q[-1], 1e-300)
            k0 = K - 1
            while k0 > 0 and same[k0 - 1]:
                k0 -= 1
            q = q[: k0 + 1]
            K = k0 + 1
        return cls(dist, float(dtau), q, np.arange(K) * dtau)


def _tail_probability(dist, tau, dtau) -> float:
    try:
        r = residual_mean(dist, tau)
    except TailExhausted:
        return 1.0
    if not np.isfinite(r) or r <= 0:
        return 1.0
    return float(-np.expm1(-dtau / r))


@dataclass
class NodeMeasure:
    """Probability measure over queue states of one type.

    ``grid[n - 1, k]`` is the mass of ``n`` customers with elapsed service in
    cell ``k``; ``overflow`` is the arrival mass blocked at ``n_max``.
    """

    p_empty: float
    grid: np.ndarray
    dtau: float
    overflow: float = 0.0

    @property
    def n_max(self) -> int:
        return self.grid.shape[0]

    @property
    def K(self) -> int:
        return self.grid.shape[1]

    @property
    def total_mass(self) -> float:
        return float(self.p_empty + self.grid.sum())

    def queue_length_distribution(self) -> np.ndarray:
        return np.concatenate([[self.p_empty], self.grid.sum(axis=1)])

    @classmethod
    def empty(cls, n_max: int, K: int, dtau: float) -> "NodeMeasure":
        return cls(1.0, np.zeros((n_max, K)), dtau)

    @classmethod
    def from_queue_lengths(cls, probs: dict, n_max: int, K: int, dtau: float,
                           tau: float = 0.0) -> "NodeMeasure":
        """Queue-length law ``{n: prob}`` with every service at elapsed ``tau``."""
        meas = cls(0.0, np.zeros((n_max, K)), dtau)
        k = min(int(tau / dtau), K - 1)
        for n, p in probs.items():
            n = int(n)
            if n == 0:
                meas.p_empty += p
            elif 1 <= n <= n_max:
                meas.grid[n - 1, k] += p
            else:
                raise ValueError(f"queue length {n} outside 0..{n_max}")
        if abs(meas.total_mass - 1) > MASS_TOL:
            raise ValueError("initial queue-length law must have total mass 1")
        return meas

    @classmethod
    def point(cls, n: int, n_max: int, K: int, dtau: float, tau: float = 0.0) -> "NodeMeasure":
        return cls.from_queue_lengths({n: 1.0}, n_max, K, dtau, tau)

    @classmethod
    def with_mean(cls, mean: float, n_max: int, K: int, dtau: float) -> "NodeMeasure":
        """Two-point law on the integers around ``mean``."""
        lo = int(np.floor(mean))
        frac = mean - lo
        probs = {lo: 1.0 - frac}
        if frac > 0:
            probs[lo + 1] = frac
        return cls.from_queue_lengths(probs, n_max, K, dtau)

    def copy(self) -> "NodeMeasure":
        return NodeMeasure(self.p_empty, self.grid.copy(), self.dtau, self.overflow)


def mean_customers(measure: NodeMeasure) -> float:
    n = np.arange(1, measure.n_max + 1)
    return float(n @ measure.grid.sum(axis=1))


def expected_service_time(measure: NodeMeasure, dist: ServiceDistribution) -> float:
    """Mean of ``S(omega) = (n - 1) E(eta) + R(tau)`` (zero for the empty queue)."""
    K = measure.K
    R = np.zeros(K)
    occupied = np.flatnonzero(measure.grid.any(axis=0))
    top = int(occupied.max()) + 1 if occupied.size else 0
    last = None
    for k in range(top):   # cells past the last occupied one carry no mass
        try:
            last = residual_mean(dist, k * measure.dtau)
        except TailExhausted:
            if last is None:
                raise
        R[k] = last
    n = np.arange(1, measure.n_max + 1)
    rows = measure.grid.sum(axis=1)
    val = float(dist.mean * ((n - 1) @ rows) + (measure.grid @ R).sum())
    if not np.isfinite(val):
        raise Infinite("expected service time is not finite")
    return val


# -- the step ------------------------------------------------------------------

class _Node:
    """Circular-buffer working copy of a NodeMeasure for fast aging."""

    def __init__(self, meas: NodeMeasure, grid: ServiceGrid):
        if meas.K != grid.K:
            raise ValueError(f"measure has {meas.K} tau cells, service grid has {grid.K}")
        self.M = meas.grid.copy()
        self.p0 = float(meas.p_empty)
        self.overflow = float(meas.overflow)
        self.q = grid.q
        self.K = grid.K
        self.off = 0
        self.dtau = meas.dtau

    def complete(self) -> tuple[float, np.ndarray]:
        q = self.q if self.off == 0 else np.roll(self.q, self.off)
        C = self.M * q
        self.M -= C
        rows = C.sum(axis=1)
        return float(rows.sum()), rows

    def arrive_and_age(self, a: float, rows: np.ndarray) -> None:
        M = self.M
        K = self.K
        if K > 1:
            pt = (K - 1 + self.off) % K
            pp = (K - 2 + self.off) % K
            M[:, pp] += M[:, pt]
            M[:, pt] = 0.0
            self.off = (self.off - 1) % K
            fresh = pt
        else:
            fresh = 0
        M[:-1, fresh] += rows[1:]
        self.p0 += rows[0]
        if a > 0:
            # arrivals see the whole measure, including services that just ended
            A = M * a
            M -= A
            M[1:] += A[:-1]
            M[-1] += A[-1]
            self.overflow += float(A[-1].sum())
            start = a * self.p0
            M[0, fresh] += start
            self.p0 -= start

    def measure(self) -> NodeMeasure:
        grid = np.roll(self.M, -self.off, axis=1) if self.off else self.M.copy()
        return NodeMeasure(self.p0, grid, self.dtau, self.overflow)

    def total(self) -> float:
        return self.p0 + float(self.M.sum())

    def renormalize(self, total: float) -> None:
        self.M /= total
        self.p0 /= total


def step(measures: Sequence[NodeMeasure], lam, dt: float,
         grids: Sequence[ServiceGrid]) -> tuple[list[NodeMeasure], np.ndarray]:
    """One explicit step at fixed input rates ``lam``; returns new measures and ``b``."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("rates must be non-negative")
    out, b = [], np.zeros(len(measures))
    for i, (meas, g) in enumerate(zip(measures, grids)):
        if dt > g.dtau * (1 + 1e-12):
            raise ValueError("time step must not exceed the tau grid step")
        node = _Node(meas, g)
        done, rows = node.complete()
        b[i] = done / dt
        node.arrive_and_age(_arrival_prob(lam[i], dt), rows)
        out.append(node.measure())
    return out, b


def _arrival_prob(lam: float, dt: float) -> float:
    a = lam * dt
    if a > 1:
        raise ValueError(f"lambda*dt = {a:.3g} exceeds 1; reduce the step")
    return a


# -- integration ----------------------------------------------------------------

@dataclass
class NLMPResult:
    trace: RateTrace
    measures: list[NodeMeasure]
    grids: list[ServiceGrid]
    mean_customers: np.ndarray     # total over types at each recorded time
    flattening: Flattening | None = None
    extra: dict = field(default_factory=dict)

    def write_measures_csv(self, path, threshold: float = 0.0) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["type", "n", "tau", "mass"])
            for i, meas in enumerate(self.measures):
                w.writerow([i + 1, 0, repr(0.0), repr(float(meas.p_empty))])
                rows, cols = np.nonzero(meas.grid > threshold)
                for n, k in zip(rows, cols):
                    w.writerow([i + 1, int(n) + 1, repr(float(k * meas.dtau)),
                                repr(float(meas.grid[n, k]))])


def default_dtau(services: Sequence[ServiceDistribution]) -> float:
    return min(d.mean for d in services) / 200.0


def _initial(spec_i, n_max, K, dtau) -> NodeMeasure:
    if spec_i is None:
        return NodeMeasure.empty(n_max, K, dtau)
    if isinstance(spec_i, NodeMeasure):
        return spec_i.copy()
    if isinstance(spec_i, (int, np.integer)):
        return NodeMeasure.point(int(spec_i), n_max, K, dtau) if spec_i else NodeMeasure.empty(n_max, K, dtau)
    if isinstance(spec_i, float):
        return NodeMeasure.with_mean(spec_i, n_max, K, dtau)
    if isinstance(spec_i, tuple):
        n, tau = spec_i
        return NodeMeasure.point(int(n), n_max, K, dtau, tau)
    if isinstance(spec_i, dict):
        return NodeMeasure.from_queue_lengths(spec_i, n_max, K, dtau)
    raise TypeError(f"unsupported initial state {spec_i!r}")


def integrate(spec: NetworkSpec, T: float, dt: float | None = None, init: Sequence | None = None,
              n_max: int = 200, tau_max: float | None = None, overflow_bound: float = 1e-6,
              record_every: int = 1, check_every: int = 100) -> NLMPResult:
    """Time-step the coupled per-type measures up to ``T``.

    ``init`` gives one entry per type: ``None`` (empty), an int ``n`` (point
    mass at ``(n, 0)``), a float (two-point law with that mean), ``(n, tau)``,
    a ``{n: prob}`` dict or a NodeMeasure on the matching grid.  Closed mode
    without ``init`` starts each node with mean ``K / (N m)`` customers.
    """
    m = spec.m
    dt = default_dtau(spec.services) if dt is None else float(dt)
    grids = [ServiceGrid.build(d, dt, tau_max) for d in spec.services]
    if init is None:
        init = [float(spec.K) / (spec.N * m) if spec.mode == "closed" else None] * m
    if len(init) != m:
        raise ValueError(f"need {m} initial states")
    nodes = []
    for s, g in zip(init, grids):
        meas = _initial(s, n_max, g.K, dt)
        if meas.n_max != n_max or meas.dtau != dt:
            raise ValueError(f"initial measure has n_max={meas.n_max}, dtau={meas.dtau}; "
                             f"integration uses n_max={n_max}, dt={dt}")
        if np.any(meas.grid < 0) or meas.p_empty < 0:
            raise ValueError("initial measure has negative mass")
        nodes.append(_Node(meas, g))
    _check(nodes, 0.0, overflow_bound)
    PT = spec.P.dense().T
    V = spec.V if spec.mode == "open" else np.zeros(m)
    n_steps = int(round(T / dt))

    n_rec = n_steps // record_every + 1
    times = np.empty(n_rec)
    lam_tr = np.empty((m, n_rec))
    b_tr = np.empty((m, n_rec))
    cust = np.empty(n_rec)
    n_idx = np.arange(1, n_max + 1)

    def customers():
        return sum(float(n_idx @ nd.M.sum(axis=1)) for nd in nodes)

    times[0] = 0.0
    cust[0] = customers()
    b0 = np.array([float((nd.M * (nd.q if nd.off == 0 else np.roll(nd.q, nd.off))).sum()) / dt
                   for nd in nodes])
    b_tr[:, 0] = b0
    lam_tr[:, 0] = V + PT @ b0
    rec = 1
    b = np.zeros(m)
    rows = [None] * m
    for s in range(1, n_steps + 1):
        for i, nd in enumerate(nodes):
            done, rows[i] = nd.complete()
            b[i] = done / dt
        lam = V + PT @ b
        for i, nd in enumerate(nodes):
            nd.arrive_and_age(_arrival_prob(lam[i], dt), rows[i])
        if s % check_every == 0:
            _check(nodes, s * dt, overflow_bound)
        if s % record_every == 0:
            times[rec] = s * dt
            lam_tr[:, rec] = lam
            b_tr[:, rec] = b
            cust[rec] = customers()
            rec += 1
    _check(nodes, n_steps * dt, overflow_bound)
    trace = RateTrace(times[:rec], lam_tr[:, :rec], b_tr[:, :rec])
    return NLMPResult(trace, [nd.measure() for nd in nodes], grids, cust[:rec])


def _check(nodes, t, overflow_bound):
    for i, nd in enumerate(nodes):
        total = nd.total()
        drift = abs(total - 1.0)
        if drift > 1e-6 * max(t, 1.0):
            raise MassLoss(f"type {i + 1}: total mass {total!r} at t={t:.6g}")
        if 0 < drift <= MASS_TOL:
            nd.renormalize(total)
        if overflow_bound is not None and nd.overflow > overflow_bound:
            raise OverflowBreach(f"type {i + 1}: overflow mass {nd.overflow:.3g} at t={t:.6g}")


def stationary_single_node(lam_hat: float, dist: ServiceDistribution, dt: float | None = None,
                           n_max: int = 200, tol: float = 1e-9, chunk: float | None = None,
                           T_max: float = 10_000.0, tau_max: float | None = None) -> np.ndarray:
    """Stationary queue-length law of one FIFO server fed by Poisson(``lam_hat``).

    Integrates from empty in chunks until the queue-length law changes by
    less than ``tol`` (sup norm) across a chunk.
    """
    rho = lam_hat * dist.mean
    if rho >= 1:
        raise Overloaded(f"lambda * E(eta) = {rho:.4g} >= 1")
    nu = np.zeros(n_max + 1)
    if lam_hat == 0:
        nu[0] = 1.0
        return nu
    dt = dist.mean / 200.0 if dt is None else float(dt)
    g = ServiceGrid.build(dist, dt, tau_max)
    nd = _Node(NodeMeasure.empty(n_max, g.K, dt), g)
    a = _arrival_prob(lam_hat, dt)
    chunk = chunk or 10 * dist.mean / (1 - rho)
    per_chunk = max(1, int(round(chunk / dt)))
    prev = nd.measure().queue_length_distribution()
    t = 0.0
    while t < T_max:
        for _ in range(per_chunk):
            _, rows = nd.complete()
            nd.arrive_and_age(a, rows)
        t += per_chunk * dt
        _check([nd], t, None)
        cur = nd.measure().queue_length_distribution()
        if np.max(np.abs(cur - prev)) < tol:
            return cur
        prev = cur
    return prev
