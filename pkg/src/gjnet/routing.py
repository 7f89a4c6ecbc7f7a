"""Routing chains: finite sub-stochastic matrices and truncated countable chains.

States are labelled 1, 2, ... in every public argument (``start``, ``A``,
table keys).  Arrays returned by :class:`RoutingMatrix` are 0-based, so
``array[j - 1]`` belongs to state ``j``.  The absorbing state ``inf`` is
never stored; its probability is the row deficit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy import sparse

from .errors import (
    ConfigError,
    NonSummableColumn,
    NotDoubleSemiStochastic,
    NotSubStochasticDual,
)

ROW_TOL = 1e-12
ZERO_THRESHOLD = 1e-6


class RoutingMatrix:
    """Sub-stochastic routing probabilities ``p_ij`` with implied exit ``p_i,inf``."""

    def __init__(self, entries, check: bool = True):
        if sparse.issparse(entries):
            mat = sparse.csr_array(entries, dtype=float)
        else:
            arr = np.atleast_2d(np.asarray(entries, dtype=float))
            mat = sparse.csr_array(arr)
        mat.sum_duplicates()
        mat.sort_indices()
        if mat.shape[0] != mat.shape[1]:
            raise ValueError(f"routing matrix must be square, got {mat.shape}")
        self.entries = mat
        self._left = None
        if check:
            if mat.nnz and mat.data.min() < 0:
                raise ValueError("routing probabilities must be non-negative")
            rows = self.row_sums()
            if rows.size and rows.max() > 1 + ROW_TOL:
                i = int(np.argmax(rows))
                raise ValueError(f"row {i + 1} sums to {rows[i]!r} > 1")

    @classmethod
    def from_rows(cls, m: int, rows: Sequence[Sequence[Sequence[float]]]) -> "RoutingMatrix":
        """Build from per-state lists of ``(j, p)`` pairs with 1-based ``j``."""
        if len(rows) != m:
            raise ConfigError(f"expected {m} rows, got {len(rows)}")
        r, c, v = [], [], []
        for i, row in enumerate(rows):
            for j, p in row:
                j = int(j)
                if not 1 <= j <= m:
                    raise ConfigError(f"row {i + 1}: target state {j} outside 1..{m}")
                r.append(i)
                c.append(j - 1)
                v.append(float(p))
        return cls(sparse.coo_array((v, (r, c)), shape=(m, m)))

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    def dense(self) -> np.ndarray:
        return self.entries.toarray()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.entries.sum(axis=1)).ravel()

    def col_sums(self) -> np.ndarray:
        return np.asarray(self.entries.sum(axis=0)).ravel()

    @property
    def exit(self) -> np.ndarray:
        return np.clip(1.0 - self.row_sums(), 0.0, None)

    def left(self, x: np.ndarray) -> np.ndarray:
        """Row-vector product ``x P``."""
        if self._left is None:
            self._left = self.entries.T.tocsr()
        return self._left @ x

    def right(self, x: np.ndarray) -> np.ndarray:
        """Column-vector product ``P x``."""
        return self.entries @ x

    def transpose(self) -> "RoutingMatrix":
        return RoutingMatrix(self.entries.T.tocsr(), check=False)

    def __eq__(self, other):
        if not isinstance(other, RoutingMatrix) or other.m != self.m:
            return NotImplemented
        return (self.entries != other.entries).nnz == 0

    def __repr__(self):
        return f"RoutingMatrix(m={self.m}, nnz={self.entries.nnz})"


@dataclass(frozen=True)
class CountableChainSpec:
    """Countable chain on states 1, 2, ... given by a row generator.

    ``transition(i)`` returns the finite list of ``(j, p_ij)`` pairs.  When
    ``bandwidth`` is set, every transition satisfies ``|j - i| <= bandwidth``;
    that bound is what makes columns (and hence the dual chain) computable.
    Truncating to ``K`` states sends every transition leaving ``1..K`` to inf.
    """

    transition: Callable[[int], Sequence[tuple[int, float]]]
    bandwidth: int | None = None
    truncation_level: int = 500
    name: str = "countable"
    params: dict = field(default_factory=dict, compare=False)

    def row(self, i: int) -> list[tuple[int, float]]:
        out = []
        total = 0.0
        for j, p in self.transition(i):
            if p < 0:
                raise ValueError(f"negative probability p[{i},{j}] = {p}")
            if self.bandwidth is not None and abs(j - i) > self.bandwidth:
                raise ValueError(f"transition {i}->{j} exceeds bandwidth {self.bandwidth}")
            total += p
            if j >= 1:
                out.append((int(j), float(p)))
        if total > 1 + ROW_TOL:
            raise ValueError(f"row {i} sums to {total!r} > 1")
        return out

    def truncate(self, K: int | None = None) -> RoutingMatrix:
        K = self.truncation_level if K is None else int(K)
        r, c, v = [], [], []
        for i in range(1, K + 1):
            for j, p in self.row(i):
                if j <= K:
                    r.append(i - 1)
                    c.append(j - 1)
                    v.append(p)
        return RoutingMatrix(sparse.coo_array((v, (r, c)), shape=(K, K)))

    def column_sums(self, K: int) -> np.ndarray:
        """Exact column sums for columns ``1..K`` (needs a bandwidth)."""
        if self.bandwidth is None:
            raise NonSummableColumn("column sums need a finite bandwidth")
        return self.truncate(K + self.bandwidth).col_sums()[:K]

    @classmethod
    def banded(cls, up: float, down: float, exit_at_1: float, truncation_level: int = 500):
        """Birth-death chain; state 1 moves up w.p. ``up`` and exits w.p. ``exit_at_1``."""
        stay1 = 1.0 - up - exit_at_1
        stay = 1.0 - up - down
        if min(up, down, exit_at_1) < 0 or stay1 < -ROW_TOL or stay < -ROW_TOL:
            raise ConfigError("banded chain parameters do not form a sub-stochastic row")
        stay1 = max(stay1, 0.0)
        stay = max(stay, 0.0)

        def transition(i):
            if i == 1:
                row = [(2, up)]
                if stay1 > 0:
                    row.append((1, stay1))
                return row
            row = [(i + 1, up), (i - 1, down)]
            if stay > 0:
                row.append((i, stay))
            return row

        return cls(transition, bandwidth=1, truncation_level=truncation_level,
                   name="banded", params={"up": up, "down": down, "exit_at_1": exit_at_1})

    @classmethod
    def table(cls, rows: dict, tail: Sequence[tuple[int, float]] = (),
              truncation_level: int = 500):
        """Explicit rows for listed states, relative ``(offset, p)`` pattern elsewhere."""
        explicit = {int(k): [(int(j), float(p)) for j, p in v] for k, v in rows.items()}
        tail = [(int(o), float(p)) for o, p in tail]
        bw = max([abs(o) for o, _ in tail] +
                 [abs(j - i) for i, row in explicit.items() for j, _ in row] + [0])

        def transition(i):
            if i in explicit:
                return explicit[i]
            return [(i + o, p) for o, p in tail]

        return cls(transition, bandwidth=bw, truncation_level=truncation_level,
                   name="table", params={"rows": rows, "tail": tail})


Chain = RoutingMatrix | CountableChainSpec


def as_matrix(P: Chain, K: int | None = None) -> RoutingMatrix:
    return P.truncate(K) if isinstance(P, CountableChainSpec) else P


def chain_from_json(doc: dict) -> Chain:
    """Parse the chain JSON forms: finite ``{"m", "rows"}`` or countable ``{"kind": ...}``."""
    if not isinstance(doc, dict):
        raise ConfigError("chain specification must be a JSON object")
    kind = doc.get("kind", "finite")
    try:
        if kind == "finite":
            return RoutingMatrix.from_rows(int(doc["m"]), doc["rows"])
        K = int(doc.get("truncation", 500))
        if kind == "banded":
            return CountableChainSpec.banded(float(doc["up"]), float(doc["down"]),
                                             float(doc["exit_at_1"]), truncation_level=K)
        if kind == "table":
            return CountableChainSpec.table(doc.get("rows", {}), doc.get("tail", []),
                                            truncation_level=K)
    except KeyError as exc:
        raise ConfigError(f"chain specification missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid chain specification: {exc}") from None
    raise ConfigError(f"unknown chain kind {kind!r}")


# -- finite-chain checks -----------------------------------------------------

@dataclass
class ValidationReport:
    all_positive: bool
    exits: np.ndarray
    has_exit: bool
    failures: list[str]

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"passed": self.passed, "all_positive": self.all_positive,
                "has_exit": self.has_exit, "exits": self.exits.tolist(),
                "failures": list(self.failures)}


def validate_open(P: RoutingMatrix) -> ValidationReport:
    """Check the finite open-network hypotheses: all ``p_ij > 0`` and some exit."""
    dense = P.dense()
    exits = P.exit
    failures = []
    zeros = np.argwhere(dense <= 0)
    all_positive = zeros.size == 0
    if not all_positive:
        i, j = zeros[0]
        failures.append(f"p[{i + 1},{j + 1}] = {dense[i, j]!r} is not positive")
    has_exit = bool(np.any(exits > ROW_TOL))
    if not has_exit:
        failures.append("no state has a positive exit probability")
    return ValidationReport(all_positive, exits, has_exit, failures)


def contraction_coefficient(P: Chain, n: int) -> float:
    """Return ``max_i sum_j (P^n)_ij``, the L1 contraction constant of ``x -> x P^n``."""
    P = as_matrix(P)
    u = np.ones(P.m)
    for _ in range(int(n)):
        u = P.right(u)
    return float(u.max()) if u.size else 0.0


def is_double_semi_stochastic(P: Chain, tol: float = ROW_TOL) -> bool:
    if isinstance(P, CountableChainSpec):
        cols = P.column_sums(P.truncation_level)
    else:
        cols = P.col_sums()
    return bool(cols.size == 0 or cols.max() <= 1 + tol)


def dual_chain(P: Chain) -> Chain:
    """Transposed chain ``p*_ij = p_ji``; each dual row must stay sub-stochastic."""
    if isinstance(P, RoutingMatrix):
        cols = P.col_sums()
        bad = np.flatnonzero(cols > 1 + ROW_TOL)
        if bad.size:
            j = int(bad[0])
            raise NotSubStochasticDual(f"column {j + 1} of P sums to {cols[j]!r} > 1")
        return P.transpose()

    if P.bandwidth is None:
        raise NotSubStochasticDual("dual of a chain without bandwidth is not computable")
    bw = P.bandwidth

    def transition(i):
        out = []
        total = 0.0
        for k in range(max(1, i - bw), i + bw + 1):
            for j, p in P.row(k):
                if j == i and p > 0:
                    out.append((k, p))
                    total += p
        if total > 1 + ROW_TOL:
            raise NotSubStochasticDual(f"column {i} of P sums to {total!r} > 1")
        return out

    return CountableChainSpec(transition, bandwidth=bw, truncation_level=P.truncation_level,
                              name=f"dual({P.name})", params=dict(P.params))


# -- survival iterates and lambda* -------------------------------------------

@dataclass
class SurvivalVector:
    values: np.ndarray
    n: int


def iter_survival(P: RoutingMatrix) -> Iterator[SurvivalVector]:
    """Yield ``e P^n`` for n = 0, 1, 2, ... (column sums of ``P^n``)."""
    v = np.ones(P.m)
    n = 0
    while True:
        yield SurvivalVector(v, n)
        v = P.left(v)
        n += 1


def check_summable(P: CountableChainSpec, K: int) -> None:
    """Raise NonSummableColumn when truncated column sums grow with ``K``.

    Chains with a bandwidth have finitely supported columns.  Otherwise the
    column sums at ``K`` and ``2K`` are compared; a column exceeding 1 that
    grows by half its value again under doubling is declared divergent.
    """
    if P.bandwidth is not None:
        return
    s1 = P.truncate(K).col_sums()
    s2 = P.truncate(2 * K).col_sums()[:K]
    grow = (s2 > 1.0) & (s2 - s1 >= 0.5 * s1)
    if np.any(grow):
        j = int(np.flatnonzero(grow)[0])
        raise NonSummableColumn(
            f"column {j + 1} sum grows from {s1[j]:.6g} to {s2[j]:.6g} when K doubles")


def default_n_max(m: int) -> int:
    return max(1000, 10**6 // max(m, 1))


def survival_iterate(P: Chain, n_max: int | None = None, tol: float = 1e-10,
                     monitor: Iterable[int] | None = None) -> list[SurvivalVector]:
    """Iterates ``e P^n`` until the sup-norm step change drops below ``tol``.

    ``monitor`` restricts the stopping rule to a subset of 0-based indices.
    For double semi-stochastic ``P`` the sequence is entrywise non-increasing.
    """
    if isinstance(P, CountableChainSpec):
        check_summable(P, P.truncation_level)
    PK = as_matrix(P)
    n_max = default_n_max(PK.m) if n_max is None else int(n_max)
    idx = slice(None) if monitor is None else np.asarray(list(monitor), dtype=int)
    out = []
    prev = None
    for sv in iter_survival(PK):
        out.append(sv)
        if prev is not None and np.max(np.abs(sv.values[idx] - prev[idx]), initial=0.0) < tol:
            break
        if sv.n >= n_max:
            break
        prev = sv.values
    return out


@dataclass
class _Limit:
    values: np.ndarray
    step: np.ndarray
    n: int
    converged: bool


def _survival_limit(PK: RoutingMatrix, tol: float, n_max: int, n_monitor: int) -> _Limit:
    v = np.ones(PK.m)
    step = np.zeros(PK.m)
    for n in range(1, n_max + 1):
        nxt = PK.left(v)
        step = v - nxt
        v = nxt
        if np.max(np.abs(step[:n_monitor]), initial=0.0) < tol:
            return _Limit(v, step, n, True)
    return _Limit(v, step, n_max, False)


@dataclass
class LambdaStarResult:
    schedule: list[int]
    estimates: list[np.ndarray]
    iterations: list[int]
    converged: list[bool]
    monitored: int
    verdicts: list[str]
    zero_threshold: float
    fixed_point_residuals: list[float]

    @property
    def final(self) -> np.ndarray:
        return self.estimates[-1]

    def to_dict(self) -> dict:
        return {
            "schedule": self.schedule,
            "iterations": self.iterations,
            "converged": self.converged,
            "monitored_states": self.monitored,
            "estimates": [e[: self.monitored].tolist() for e in self.estimates],
            "fixed_point_residuals": self.fixed_point_residuals,
            "verdicts": self.verdicts,
        }


def lambda_star(P: Chain, K_schedule: Sequence[int] | None = None, tol: float = 1e-10,
                n_max: int | None = None, zero_threshold: float = ZERO_THRESHOLD,
                monitor_fraction: float = 0.2) -> LambdaStarResult:
    """Estimate the maximal invariant measure of a double semi-stochastic chain.

    Each truncation ``K`` is iterated until the step change of ``e P_K^n`` over
    the monitored states ``1..ceil(monitor_fraction*K)`` falls below ``tol``.
    Mass leaving the truncation is absorbed, so a finite truncation has zero
    exact limit; the estimate is the plateau its interior states reach before
    that absorption propagates inwards.  Verdicts refer to the monitored
    states of the largest truncation.
    """
    if isinstance(P, RoutingMatrix):
        schedule = [P.m]
        mats = [P]
        n_monitor = P.m
    else:
        schedule = sorted(int(k) for k in (K_schedule or [P.truncation_level]))
        mats = [P.truncate(K) for K in schedule]
        n_monitor = max(1, int(np.ceil(monitor_fraction * schedule[-1])))
    for K, PK in zip(schedule, mats):
        cols = PK.col_sums()
        if cols.size and cols.max() > 1 + ROW_TOL:
            j = int(np.argmax(cols))
            raise NotDoubleSemiStochastic(
                f"truncation K={K}: column {j + 1} sums to {cols[j]!r} > 1")
    if isinstance(P, CountableChainSpec) and P.bandwidth is not None:
        cols = P.column_sums(schedule[-1])
        if cols.max() > 1 + ROW_TOL:
            j = int(np.argmax(cols))
            raise NotDoubleSemiStochastic(f"column {j + 1} sums to {cols[j]!r} > 1")

    estimates, iters, conv, resid = [], [], [], []
    last = None
    for K, PK in zip(schedule, mats):
        nm = PK.m if isinstance(P, RoutingMatrix) else max(1, int(np.ceil(monitor_fraction * K)))
        lim = _survival_limit(PK, tol, n_max or default_n_max(PK.m), nm)
        estimates.append(lim.values)
        iters.append(lim.n)
        conv.append(lim.converged)
        resid.append(float(np.max(np.abs(lim.values - PK.left(lim.values))[:nm], initial=0.0)))
        last = lim

    verdicts = []
    for j in range(n_monitor):
        value = last.values[j]
        settled = last.converged or abs(last.step[j]) < tol
        if not settled:
            verdicts.append("inconclusive")
        elif value < zero_threshold:
            verdicts.append("zero")
        else:
            verdicts.append("positive")
    return LambdaStarResult(schedule, estimates, iters, conv, n_monitor, verdicts,
                            zero_threshold, resid)


# -- transience verdict --------------------------------------------------------

@dataclass
class TransienceVerdict:
    zero_only_invariant: str  # "yes" | "no" | "inconclusive"
    theorem_used: str | None
    evidence: dict

    def to_dict(self) -> dict:
        return {"zero_only_invariant": self.zero_only_invariant,
                "theorem_used": self.theorem_used, "evidence": self.evidence}


def transience_verdict(P: Chain, K_schedule: Sequence[int] | None = None, tol: float = 1e-10,
                       n_max: int | None = None,
                       zero_threshold: float = ZERO_THRESHOLD) -> TransienceVerdict:
    """Decide whether zero is the only bounded invariant measure.

    Tried in order: the double semi-stochastic criterion (maximal measure
    ``lambda*`` vanishes iff zero is the only bounded invariant measure), the
    summable-column criterion (all column-sum limits vanish), and the
    single-column shortcut (one strictly positive column whose sum vanishes).
    When no criterion is numerically certified the verdict is inconclusive.
    """
    evidence: dict = {}
    try:
        if isinstance(P, CountableChainSpec):
            check_summable(P, P.truncation_level)
        dss = is_double_semi_stochastic(P)
    except NonSummableColumn as exc:
        evidence["non_summable"] = str(exc)
        return TransienceVerdict("inconclusive", None, evidence)

    if dss:
        res = lambda_star(P, K_schedule, tol=tol, n_max=n_max, zero_threshold=zero_threshold)
        evidence["lambda_star"] = res.to_dict()
        evidence["sup_lambda_star"] = float(res.final[: res.monitored].max())
        if "positive" in res.verdicts:
            return TransienceVerdict("no", "theorem3", evidence)
        if all(v == "zero" for v in res.verdicts):
            return TransienceVerdict("yes", "theorem3", evidence)

    PK = as_matrix(P)
    n_monitor = PK.m if isinstance(P, RoutingMatrix) else max(1, PK.m // 5)
    lim = _survival_limit(PK, tol, n_max or default_n_max(PK.m), n_monitor)
    v = lim.values[:n_monitor]
    evidence["column_sum_limits"] = v.tolist()
    evidence["iterations"] = lim.n
    if lim.converged and np.all(v < zero_threshold):
        return TransienceVerdict("yes", "theorem4", evidence)

    dense_pos = PK.entries.tocsc()
    for j in range(n_monitor):
        col = dense_pos[:, [j]]
        if col.nnz == PK.m and col.data.min() > 0 and abs(lim.step[j]) < tol \
                and lim.values[j] < zero_threshold:
            evidence["j0"] = j + 1
            return TransienceVerdict("yes", "theorem5", evidence)
    return TransienceVerdict("inconclusive", None, evidence)


# -- Monte-Carlo avoidance ---------------------------------------------------

@dataclass
class AvoidanceEstimate:
    estimate: float
    stderr: float
    ci_low: float
    ci_high: float
    horizon: int
    samples: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _step_sampler(P: RoutingMatrix):
    csr = P.entries
    indptr, indices = csr.indptr, csr.indices
    rows = np.repeat(np.arange(P.m), np.diff(indptr))
    cum = np.cumsum(csr.data)
    starts = np.concatenate([[0.0], cum])[indptr[:-1]]
    key = rows + (cum - np.repeat(starts, np.diff(indptr)))

    def step(states, u):
        k = np.searchsorted(key, states + u, side="right")
        moved = k < indptr[states + 1]
        nxt = np.full(states.shape, -1)
        nxt[moved] = indices[k[moved]]
        return nxt

    return step


def avoidance_probability(Pstar: RoutingMatrix, A: Iterable[int], start: int, horizon: int,
                          samples: int, seed: int = 0, n_streams: int = 8,
                          z: float = 3.0) -> AvoidanceEstimate:
    """Monte-Carlo estimate of Pr{chain from ``start`` avoids ``A`` for ``horizon`` steps}.

    Absorption at inf counts as avoiding ``A`` forever.  The estimate is an
    upper bound on the never-hit probability and, for a fixed seed, it is
    non-increasing in ``horizon`` because paths share their random draws.
    """
    A = {int(a) for a in A}
    if not A:
        return AvoidanceEstimate(1.0, 0.0, 1.0, 1.0, horizon, samples)
    if start in A:
        return AvoidanceEstimate(0.0, 0.0, 0.0, 0.0, horizon, samples)
    hit_mask = np.zeros(Pstar.m + 1, dtype=bool)
    for a in A:
        if 1 <= a <= Pstar.m:
            hit_mask[a - 1] = True
    step = _step_sampler(Pstar)
    sizes = [samples // n_streams + (1 if s < samples % n_streams else 0) for s in range(n_streams)]
    hits = 0
    for child, size in zip(np.random.SeedSequence(seed).spawn(n_streams), sizes):
        rng = np.random.default_rng(child)
        states = np.full(size, start - 1)
        for _ in range(int(horizon)):
            if states.size == 0:
                break
            states = step(states, rng.random(states.size))
            hit = hit_mask[states]
            hits += int(hit.sum())
            states = states[~hit & (states >= 0)]
    p = 1.0 - hits / samples
    se = float(np.sqrt(max(p * (1 - p), 0.0) / samples))
    return AvoidanceEstimate(p, se, max(0.0, p - z * se), min(1.0, p + z * se), horizon, samples)
