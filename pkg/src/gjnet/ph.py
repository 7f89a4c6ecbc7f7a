"""Statistical checks of Poissonization, flow independence and product-form limits."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats
from statsmodels.stats.diagnostic import lilliefors

from .errors import (
    DegenerateSeries,
    EitherNotConverged,
    NotConverged,
    TooFewSamples,
    ZeroMean,
)
from .rates import RateTrace, detect_flattening


def dispersion_index(counts) -> float:
    """Variance-to-mean ratio of per-bin counts (1 for a Poisson stream)."""
    counts = np.asarray(counts, dtype=float)
    if counts.size < 50:
        raise TooFewSamples(f"dispersion index needs at least 50 bins, got {counts.size}")
    mean = counts.mean()
    if mean <= 0:
        raise ZeroMean("counts have zero mean")
    return float(counts.var(ddof=1) / mean)


@dataclass
class KSResult:
    statistic: float
    pvalue: float
    n: int
    rate: float
    lilliefors: bool


def ks_exponential(samples, rate: float | None = None) -> KSResult:
    """One-sample KS distance to the exponential law.

    With ``rate=None`` the rate is the reciprocal sample mean and the p-value
    comes from the Lilliefors table for an estimated scale.  A rate supplied
    from independent data gets the plain KS p-value.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < 100:
        raise TooFewSamples(f"KS test needs at least 100 samples, got {x.size}")
    if np.any(x < 0):
        raise ValueError("inter-arrival times must be non-negative")
    estimated = rate is None
    if estimated:
        rate = 1.0 / x.mean()
    xs = np.sort(x)
    F = -np.expm1(-rate * xs)
    n = xs.size
    k = np.arange(1, n + 1)
    d = float(max(np.max(k / n - F), np.max(F - (k - 1) / n)))
    if estimated:
        _, p = lilliefors(x, dist="exp", pvalmethod="table")
    else:
        p = stats.kstwo.sf(d, n)
    return KSResult(d, float(p), n, float(rate), estimated)


@dataclass
class Correlation:
    r: float
    z: float
    n: int


def flow_independence(counts_a, counts_b) -> Correlation:
    """Pearson correlation of aligned per-bin counts with a Fisher z-score under independence."""
    a = np.asarray(counts_a, dtype=float)
    b = np.asarray(counts_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("count series must be aligned 1-d arrays")
    if a.size < 100:
        raise TooFewSamples(f"need at least 100 aligned bins, got {a.size}")
    if a.std() == 0 or b.std() == 0:
        raise DegenerateSeries("a count series is constant")
    r = float(np.corrcoef(a, b)[0, 1])
    r = min(max(r, -1.0), 1.0)
    with np.errstate(divide="ignore"):
        z = float(np.arctanh(r) * np.sqrt(a.size - 3))
    return Correlation(r, z, a.size)


def pairwise_flow_z(counts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Correlations and Fisher z-scores for every pair of rows of ``counts``.

    Returns ``(pairs, r, z)`` with 0-based row pairs ``i < j``; constant rows
    are left out.
    """
    c = np.asarray(counts, dtype=float)
    if c.ndim != 2:
        raise ValueError("counts must be a 2-d array (probe, bin)")
    if c.shape[1] < 100:
        raise TooFewSamples(f"need at least 100 aligned bins, got {c.shape[1]}")
    keep = np.flatnonzero(c.std(axis=1) > 0)
    if keep.size < 2:
        return np.empty((0, 2), dtype=int), np.empty(0), np.empty(0)
    r_all = np.clip(np.corrcoef(c[keep]), -1.0, 1.0)
    iu = np.triu_indices(keep.size, 1)
    r = r_all[iu]
    with np.errstate(divide="ignore"):
        z = np.arctanh(r) * np.sqrt(c.shape[1] - 3)
    return np.column_stack([keep[iu[0]], keep[iu[1]]]), r, z


def pooled_ks(interarrivals: Sequence[np.ndarray]) -> KSResult:
    """KS exponentiality of inter-arrival gaps pooled over several probes.

    Gaps are taken within each probe, so pooling only makes sense for probes
    fed at a common rate (servers of one type).
    """
    x = np.concatenate([np.asarray(a, dtype=float) for a in interarrivals])
    return ks_exponential(x)


def lump_point(dist, quantile: float = 1e-4) -> int:
    """First index where the CDF reaches ``1 - quantile``."""
    cdf = np.cumsum(np.asarray(dist, dtype=float))
    total = cdf[-1] if cdf.size else 0.0
    if total <= 0:
        return 0
    return int(np.searchsorted(cdf, (1 - quantile) * total - 1e-15))


def compare_stationary(empirical, reference, lump_quantile: float = 1e-4,
                       lump_at: int | None = None) -> float:
    """Total variation ``0.5 * sum |emp(n) - ref(n)|`` with the tail lumped.

    The lump index defaults to the larger of the two ``1 - lump_quantile``
    points, which keeps the distance symmetric.
    """
    p = np.asarray(empirical, dtype=float)
    q = np.asarray(reference, dtype=float)
    L = max(p.size, q.size)
    p = np.pad(p, (0, L - p.size))
    q = np.pad(q, (0, L - q.size))
    if lump_at is None:
        lump_at = max(lump_point(p, lump_quantile), lump_point(q, lump_quantile))
    k = min(int(lump_at), L - 1)
    pl = np.append(p[:k], p[k:].sum())
    ql = np.append(q[:k], q[k:].sum())
    return float(0.5 * np.abs(pl - ql).sum())


@dataclass
class Independence:
    divergence: float
    passed: bool
    tol: float
    lambda_hat_a: list
    lambda_hat_b: list
    relative: bool

    def to_dict(self) -> dict:
        return asdict(self)


def initial_state_independence(trace_a: RateTrace, trace_b: RateTrace, warmup: float,
                               tol: float, window: float | None = None,
                               flat_tol: float | None = None,
                               relative: bool = False) -> Independence:
    """Sup over ``t > warmup`` of ``max_i |lam_a_i(t) - lam_b_i(t)|``; passes iff < ``tol``.

    Both traces must have flattened and be in flow balance (``b_hat`` equal to
    ``lambda_hat``); otherwise EitherNotConverged.  With ``relative=True`` the
    divergence is divided by the largest ``lambda_hat``.
    """
    if trace_a.times.shape != trace_b.times.shape or np.any(trace_a.times != trace_b.times):
        raise ValueError("traces must share a time grid")
    span = trace_a.times[-1] - warmup
    window = window or span / 4
    flat_tol = flat_tol or tol
    hats = []
    for name, tr in (("a", trace_a), ("b", trace_b)):
        try:
            fl = detect_flattening(tr.after(warmup), window, flat_tol)
        except (NotConverged, ValueError) as exc:
            raise EitherNotConverged(f"trace {name} has not flattened: {exc}") from None
        gap = np.abs(fl.lambda_hat - fl.b_hat).max()
        if gap >= flat_tol * max(1.0, fl.lambda_hat.max()):
            raise EitherNotConverged(
                f"trace {name} is not in flow balance: |lambda_hat - b_hat| = {gap:.3g}")
        hats.append(fl.lambda_hat)
    keep = trace_a.times > warmup
    div = float(np.abs(trace_a.lam[:, keep] - trace_b.lam[:, keep]).max())
    if relative:
        div /= max(float(np.max(hats)), 1e-300)
    return Independence(div, div < tol, tol, hats[0].tolist(), hats[1].tolist(), relative)


# -- report assembly ------------------------------------------------------------

@dataclass
class PHReport:
    N: int
    ks: list[dict] = field(default_factory=list)
    dispersion: list[float] = field(default_factory=list)
    correlations: list[dict] = field(default_factory=list)
    tv: list[float] = field(default_factory=list)
    initial_state_divergence: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def summary_row(self) -> dict:
        ks = [k["statistic"] for k in self.ks]
        z = [abs(c["z"]) for c in self.correlations]
        return {
            "N": self.N,
            "median_ks": float(np.median(ks)) if ks else float("nan"),
            "median_dispersion": float(np.median(self.dispersion)) if self.dispersion else float("nan"),
            "frac_pairs_z_below_3": float(np.mean(np.array(z) < 3)) if z else float("nan"),
            "max_tv": max(self.tv) if self.tv else float("nan"),
            "initial_state_divergence": self.initial_state_divergence
            if self.initial_state_divergence is not None else float("nan"),
        }

    def write_summary_csv(self, path) -> None:
        row = self.summary_row()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def weak_ph_report(interarrivals: Sequence[np.ndarray], probe_counts: np.ndarray, N: int,
                   marginals: Sequence[np.ndarray] = (),
                   references: Sequence[np.ndarray] = ()) -> PHReport:
    """Assemble per-probe KS/dispersion, pairwise correlations and per-type TV."""
    rep = PHReport(N=N)
    for x in interarrivals:
        if x.size >= 100:
            rep.ks.append(asdict(ks_exponential(x)))
    for c in probe_counts:
        if c.size >= 50 and c.mean() > 0:
            rep.dispersion.append(dispersion_index(c))
    if len(probe_counts) >= 2 and np.shape(probe_counts)[1] >= 100:
        pairs, r, z = pairwise_flow_z(probe_counts)
        rep.correlations = [{"pair": [int(a), int(b)], "r": float(x), "z": float(y)}
                            for (a, b), x, y in zip(pairs, r, z)]
    for emp, ref in zip(marginals, references):
        rep.tv.append(compare_stationary(emp, ref))
    return rep
