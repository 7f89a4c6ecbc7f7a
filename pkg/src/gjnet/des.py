"""Event-driven simulation of the finite-N network.

Servers are numbered ``s = i * N + k`` for type ``i`` (0-based) and copy
``k``.  Every random draw comes from a named substream derived from the
master seed: ``(0, s)`` exogenous inter-arrivals of server ``s``, ``(1, s)``
its service times and ``(2, s)`` its routing choices.  Observing more probe
servers therefore never changes the sample path.
"""

from __future__ import annotations

import heapq
import math
import os
from bisect import bisect_right
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConservationBreach, GJNError, QueueExplosion, ReplicationError
from .network import NetworkSpec
from .rates import RateTrace

ARRIVAL, COMPLETION, SNAPSHOT = 0, 1, 2
_BLOCK = 128


class _Stream:
    """Block-buffered draws from one named substream."""

    __slots__ = ("rng", "draw", "buf", "pos")

    def __init__(self, seed: int, key: tuple, draw: Callable[[np.random.Generator, int], np.ndarray]):
        self.rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))
        self.draw = draw
        self.buf: list = []
        self.pos = 0

    def __call__(self) -> float:
        if self.pos == len(self.buf):
            self.buf = self.draw(self.rng, _BLOCK).tolist()
            self.pos = 0
        x = self.buf[self.pos]
        self.pos += 1
        return x


def _uniforms(rng, n):
    return rng.random(n)


def _exponentials(rng, n):
    return -np.log1p(-rng.random(n))


@dataclass
class SimStats:
    m: int
    N: int
    seed: int
    horizon: float
    warmup: float
    bin_width: float
    arrivals: np.ndarray          # [m, bins] customers entering type-i servers
    departures: np.ndarray        # [m, bins] service completions at type i
    exogenous: np.ndarray         # [m, bins] exogenous arrivals at type i
    probes: list[int]
    probe_arrivals: list[np.ndarray]
    probe_departure_ids: list[np.ndarray]
    qlen_hist: np.ndarray         # [m, L] post-warmup snapshot counts of queue lengths
    snapshot_times: np.ndarray
    snapshot_in_system: np.ndarray
    snapshot_counter: np.ndarray  # exogenous arrivals minus exits at each snapshot
    route_counts: np.ndarray      # [m, m + 1] completions routed to j, last column exits
    mean_in_system: float         # time average over [warmup, horizon]
    mean_in_type: np.ndarray      # per-server time average by type
    batch_means: np.ndarray       # in-system time averages over 10 post-warmup batches
    total_exogenous: int
    total_exits: int
    total_node_arrivals: int
    total_completions: int
    in_system_final: int
    in_system_min: int
    in_system_max: int
    events: int
    spec_hash: str = ""
    audited_checks: int = 0

    @property
    def n_bins(self) -> int:
        return self.arrivals.shape[1]

    def bin_edges(self) -> np.ndarray:
        return np.arange(self.n_bins + 1) * self.bin_width

    def probe_interarrivals(self, after: float | None = None) -> list[np.ndarray]:
        t0 = self.warmup if after is None else after
        return [np.diff(a[a >= t0]) for a in self.probe_arrivals]

    def probe_counts(self, bin_width: float | None = None, after: float | None = None) -> np.ndarray:
        """Per-probe arrival counts in aligned bins over ``[after, horizon)``."""
        bw = bin_width or self.bin_width
        t0 = self.warmup if after is None else after
        n = int((self.horizon - t0) // bw)
        edges = t0 + np.arange(n + 1) * bw
        return np.array([np.histogram(a, bins=edges)[0] for a in self.probe_arrivals]).reshape(len(self.probes), n)

    def queue_marginal(self, i: int) -> np.ndarray:
        h = self.qlen_hist[i].astype(float)
        total = h.sum()
        return h / total if total else h

    def to_summary(self) -> dict:
        return {"seed": self.seed, "events": self.events, "mean_in_system": self.mean_in_system,
                "mean_in_type": self.mean_in_type.tolist(),
                "total_exogenous": self.total_exogenous, "total_exits": self.total_exits,
                "in_system_final": self.in_system_final,
                "in_system_min": self.in_system_min, "in_system_max": self.in_system_max}


def run(spec: NetworkSpec, seed: int = 0, probes: Sequence[int] = (), audit: bool = False) -> SimStats:
    """Simulate ``spec`` up to its horizon; deterministic given ``seed``.

    With ``audit=True`` the queue lengths are summed after every event and
    checked against the running in-system count (slow; O(servers) per event).
    """
    spec.validate()
    m, N = spec.m, spec.N
    S = m * N
    probes = [int(p) for p in probes]
    if any(not 0 <= p < S for p in probes):
        raise ValueError(f"probe indices must lie in 0..{S - 1}")
    horizon, warmup = float(spec.horizon), float(spec.warmup)
    bw = float(spec.bin_width)
    n_bins = int(math.ceil(horizon / bw))

    P = spec.P.dense()
    cum = [np.cumsum(P[i]).tolist() for i in range(m)]
    V = spec.V.tolist()
    type_of = [s // N for s in range(S)]

    exo = [None] * S
    svc = []
    route = []
    for s in range(S):
        dist = spec.services[type_of[s]]
        svc.append(_Stream(seed, (1, s), dist.sample_many))
        route.append(_Stream(seed, (2, s), _uniforms))
        if spec.mode == "open" and V[type_of[s]] > 0:
            exo[s] = _Stream(seed, (0, s), _exponentials)

    q = [0] * S
    heap: list = []
    # one spare bin absorbs events landing exactly on the horizon
    arr_bins = [[0] * (n_bins + 1) for _ in range(m)]
    dep_bins = [[0] * (n_bins + 1) for _ in range(m)]
    exo_bins = [[0] * (n_bins + 1) for _ in range(m)]
    route_counts = [[0] * (m + 1) for _ in range(m)]
    probe_index = {p: k for k, p in enumerate(probes)}
    probe_times: list[list[float]] = [[] for _ in probes]
    probe_queue: list[list[int]] = [[] for _ in probes]
    probe_head = [0] * len(probes)
    probe_next_id = [0] * len(probes)
    probe_dep_ids: list[list[int]] = [[] for _ in probes]
    hist = np.zeros((m, 16), dtype=np.int64)
    snap_t: list[float] = []
    snap_n: list[int] = []
    snap_c: list[int] = []
    cap = spec.queue_cap
    allow_self = spec.allow_self

    in_sys = 0
    n_exo = n_exit = n_arr = n_comp = 0
    area = 0.0
    n_batches = 10
    batch_len = (horizon - warmup) / n_batches
    batch_area = [0.0] * n_batches
    last_t = 0.0
    lo_min = hi_max = 0

    if spec.initial is not None:
        init = [int(x) for x in spec.initial]
    elif spec.mode == "closed":
        init = [0] * S
        for c in range(spec.K):
            init[c % S] += 1
    else:
        init = [0] * S
    for s, k in enumerate(init):
        if k:
            q[s] = k
            in_sys += k
            heap.append((svc[s](), COMPLETION, s))
            if s in probe_index:
                pk = probe_index[s]
                probe_queue[pk].extend(range(k))
                probe_next_id[pk] = k
    lo_min = hi_max = in_sys
    for s in range(S):
        if exo[s] is not None:
            heap.append((exo[s]() / V[type_of[s]], ARRIVAL, s))
    t_snap = warmup
    heap.append((t_snap, SNAPSHOT, -1))
    heapq.heapify(heap)
    push, pop = heapq.heappush, heapq.heappop
    events = 0

    def accumulate(t_from, t_to, n):
        # split the post-warmup part of [t_from, t_to) across batches
        nonlocal area
        a = t_from if t_from > warmup else warmup
        if t_to <= a:
            return
        area += n * (t_to - a)
        while a < t_to:
            b = int((a - warmup) / batch_len)
            if b >= n_batches:
                b = n_batches - 1
            end = warmup + (b + 1) * batch_len
            e = t_to if t_to < end or b == n_batches - 1 else end
            batch_area[b] += n * (e - a)
            a = e

    audited = 0
    while heap:
        if audit:
            if sum(q) != in_sys:
                raise ConservationBreach(
                    f"after {events} events: queues hold {sum(q)}, counter says {in_sys}")
            audited += 1
        t, kind, s = pop(heap)
        if t > horizon:
            break
        if t > last_t:
            if t > warmup:
                accumulate(last_t, t, in_sys)
            last_t = t

        if kind == COMPLETION:
            events += 1
            i = type_of[s]
            n = q[s] - 1
            q[s] = n
            n_comp += 1
            dep_bins[i][int(t / bw)] += 1
            if s in probe_index:
                pk = probe_index[s]
                probe_dep_ids[pk].append(probe_queue[pk][probe_head[pk]])
                probe_head[pk] += 1
            if n > 0:
                push(heap, (t + svc[s](), COMPLETION, s))
            u = route[s]()
            row = cum[i]
            j = bisect_right(row, u)
            if j >= m:
                route_counts[i][m] += 1
                n_exit += 1
                in_sys -= 1
                if in_sys < lo_min:
                    lo_min = in_sys
                continue
            route_counts[i][j] += 1
            if allow_self or j != i or N == 1:
                k = int(route[s]() * N)
                target = j * N + (k if k < N else N - 1)
            else:
                k = int(route[s]() * (N - 1))
                k = k if k < N - 1 else N - 2
                own = s - i * N
                target = j * N + (k if k < own else k + 1)
        elif kind == ARRIVAL:
            events += 1
            i = type_of[s]
            target = s
            n_exo += 1
            exo_bins[i][int(t / bw)] += 1
            in_sys += 1
            if in_sys > hi_max:
                hi_max = in_sys
            push(heap, (t + exo[s]() / V[i], ARRIVAL, s))
        else:
            for i in range(m):
                counts = np.bincount(q[i * N:(i + 1) * N])
                if counts.size > hist.shape[1]:
                    hist = np.pad(hist, ((0, 0), (0, counts.size - hist.shape[1])))
                hist[i, :counts.size] += counts
            snap_t.append(t)
            snap_n.append(sum(q))
            snap_c.append(in_sys)
            t_snap = t + spec.snapshot_interval
            if t_snap <= horizon:
                push(heap, (t_snap, SNAPSHOT, -1))
            continue

        # arrival of one customer at server `target`
        j = type_of[target]
        n_arr += 1
        arr_bins[j][int(t / bw)] += 1
        n = q[target] + 1
        q[target] = n
        if n == 1:
            push(heap, (t + svc[target](), COMPLETION, target))
        elif n > cap:
            raise QueueExplosion(f"queue at server {target} exceeded {cap} at t={t:.6g}")
        if target in probe_index:
            pk = probe_index[target]
            probe_times[pk].append(t)
            probe_queue[pk].append(probe_next_id[pk])
            probe_next_id[pk] += 1

    if audit and sum(q) != in_sys:
        raise ConservationBreach(f"at the horizon: queues hold {sum(q)}, counter says {in_sys}")
    if horizon > last_t:
        accumulate(last_t, horizon, in_sys)
    span = horizon - warmup
    mean_type = _mean_in_type(hist, N)

    return SimStats(
        m=m, N=N, seed=seed, horizon=horizon, warmup=warmup, bin_width=bw,
        arrivals=_trim(arr_bins, n_bins),
        departures=_trim(dep_bins, n_bins),
        exogenous=_trim(exo_bins, n_bins),
        probes=probes,
        probe_arrivals=[np.array(x) for x in probe_times],
        probe_departure_ids=[np.array(x, dtype=np.int64) for x in probe_dep_ids],
        qlen_hist=hist,
        snapshot_times=np.array(snap_t),
        snapshot_in_system=np.array(snap_n, dtype=np.int64),
        snapshot_counter=np.array(snap_c, dtype=np.int64),
        route_counts=np.array(route_counts, dtype=np.int64),
        mean_in_system=area / span,
        mean_in_type=mean_type,
        batch_means=np.array(batch_area) / batch_len,
        total_exogenous=n_exo, total_exits=n_exit,
        total_node_arrivals=n_arr, total_completions=n_comp,
        in_system_final=in_sys, in_system_min=lo_min, in_system_max=hi_max,
        events=events, spec_hash=spec.spec_hash(), audited_checks=audited,
    )


def _trim(bins, n_bins):
    arr = np.array(bins, dtype=np.int64)
    arr[:, n_bins - 1] += arr[:, n_bins]
    return arr[:, :n_bins]


def _mean_in_type(hist: np.ndarray, N: int) -> np.ndarray:
    tot = hist.sum(axis=1)
    n = np.arange(hist.shape[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, (hist * n).sum(axis=1) / np.maximum(tot, 1), 0.0)


def empirical_rates(stats: SimStats, bin_width: float | None = None) -> RateTrace:
    """Per-server rates: counts per bin divided by ``N * bin_width``."""
    bw = bin_width or stats.bin_width
    factor = int(round(bw / stats.bin_width))
    if factor < 1 or abs(factor * stats.bin_width - bw) > 1e-9 * bw:
        raise ValueError("bin width must be a multiple of the recorded bin width")
    n = stats.n_bins // factor
    shape = (stats.m, n, factor)
    arr = stats.arrivals[:, : n * factor].reshape(shape).sum(axis=2)
    dep = stats.departures[:, : n * factor].reshape(shape).sum(axis=2)
    scale = stats.N * bw
    times = (np.arange(n) + 0.5) * bw
    return RateTrace(times, arr / scale, dep / scale)


def balance_residual(trace: RateTrace, V, P, after: float = 0.0) -> np.ndarray:
    """Post-``after`` time average of ``|lam_i - v_i - sum_j b_j p_ji|`` per type."""
    P = P.dense() if hasattr(P, "dense") else np.asarray(P)
    keep = trace.times > after
    resid = trace.lam[:, keep] - np.asarray(V)[:, None] - P.T @ trace.b[:, keep]
    return np.abs(resid).mean(axis=1)


# -- replications -------------------------------------------------------------

@dataclass
class PooledStats:
    seeds: list[int]
    mean_in_system: float
    mean_in_system_se: float
    per_replication: np.ndarray
    qlen_hist: np.ndarray
    arrivals: np.ndarray
    departures: np.ndarray
    runs: list[SimStats] = field(repr=False, default_factory=list)

    def to_summary(self) -> dict:
        return {"seeds": self.seeds, "mean_in_system": self.mean_in_system,
                "mean_in_system_se": self.mean_in_system_se,
                "per_replication": self.per_replication.tolist()}


def pool_stats(runs: Sequence[SimStats]) -> PooledStats:
    """Default reducer: pooled counts plus between-replication mean and standard error."""
    vals = np.array([r.mean_in_system for r in runs])
    width = max(r.qlen_hist.shape[1] for r in runs)
    hist = sum(np.pad(r.qlen_hist, ((0, 0), (0, width - r.qlen_hist.shape[1]))) for r in runs)
    se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else float("nan")
    return PooledStats(
        seeds=[r.seed for r in runs], mean_in_system=float(vals.mean()), mean_in_system_se=se,
        per_replication=vals, qlen_hist=hist,
        arrivals=sum(r.arrivals for r in runs), departures=sum(r.departures for r in runs),
        runs=list(runs))


def _run_one(args):
    spec, seed, probes = args
    try:
        return seed, run(spec, seed, probes), None
    except GJNError as exc:
        return seed, None, exc


def default_workers() -> int:
    env = os.environ.get("GJN_THREADS")
    if env:
        return max(1, int(env))
    return 1


def replicate(spec: NetworkSpec, seeds: Sequence[int], reducer: Callable | None = None,
              probes: Sequence[int] = (), workers: int | None = None):
    """Independent replications, reduced in ascending seed order.

    The result does not depend on the order of ``seeds`` or on ``workers``.
    """
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise ValueError("replication seeds must be distinct")
    reducer = reducer or pool_stats
    ordered = sorted(seeds)
    jobs = [(spec, s, tuple(probes)) for s in ordered]
    workers = workers or default_workers()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            results = list(ex.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    runs = []
    for seed, stats, exc in results:
        if exc is not None:
            raise ReplicationError(seed, exc) from exc
        runs.append(stats)
    return reducer(runs)
