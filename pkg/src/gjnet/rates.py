"""Per-type input/output rate traces and flattening detection."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import NotConverged


@dataclass
class RateTrace:
    """Rates ``lam[i, k]`` and ``b[i, k]`` of type ``i`` at ``times[k]``."""

    times: np.ndarray
    lam: np.ndarray
    b: np.ndarray
    lambda_hat: np.ndarray | None = None
    b_hat: np.ndarray | None = None
    oscillation: np.ndarray | None = None
    window: float | None = None

    @property
    def m(self) -> int:
        return self.lam.shape[0]

    def after(self, t0: float) -> "RateTrace":
        keep = self.times > t0
        return RateTrace(self.times[keep], self.lam[:, keep], self.b[:, keep])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "type", "lambda", "b"])
            for k, t in enumerate(self.times):
                for i in range(self.m):
                    w.writerow([repr(float(t)), i + 1, repr(float(self.lam[i, k])),
                                repr(float(self.b[i, k]))])

    @classmethod
    def read_csv(cls, path) -> "RateTrace":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        m = int(rows[:, 1].max())
        times = rows[rows[:, 1] == 1, 0]
        lam = np.vstack([rows[rows[:, 1] == i + 1, 2] for i in range(m)])
        b = np.vstack([rows[rows[:, 1] == i + 1, 3] for i in range(m)])
        return cls(times, lam, b)


@dataclass
class Flattening:
    lambda_hat: np.ndarray
    b_hat: np.ndarray
    oscillation_lambda: np.ndarray
    oscillation_b: np.ndarray
    converged_at: float

    def to_dict(self) -> dict:
        return {"lambda_hat": self.lambda_hat.tolist(), "b_hat": self.b_hat.tolist(),
                "oscillation": {"lambda": self.oscillation_lambda.tolist(),
                                "b": self.oscillation_b.tolist()},
                "converged_at": self.converged_at}


def detect_flattening(trace: RateTrace, window: float, tol: float) -> Flattening:
    """Trailing-window oscillation (max - min) of every rate; converged when all < ``tol``.

    ``window`` is in time units.  Returns the window means as the limits.
    """
    times = trace.times
    if times.size < 3:
        raise ValueError("trace too short")
    span = times[-1] - times[0]
    if span <= 2 * window:
        raise ValueError(f"trace spans {span:g}, needs more than twice the window {window:g}")
    tail = times >= times[-1] - window
    lam, b = trace.lam[:, tail], trace.b[:, tail]
    osc_l = lam.max(axis=1) - lam.min(axis=1)
    osc_b = b.max(axis=1) - b.min(axis=1)
    osc = np.concatenate([osc_l, osc_b])
    if np.any(osc >= tol):
        raise NotConverged(f"trailing oscillation {osc.max():.3g} >= {tol:g}", oscillation=osc)
    lam_hat = lam.mean(axis=1)
    b_hat = b.mean(axis=1)
    trace.lambda_hat, trace.b_hat, trace.oscillation, trace.window = lam_hat, b_hat, osc, window
    return Flattening(lam_hat, b_hat, osc_l, osc_b, float(_settle_time(trace, window, tol)))


def _settle_time(trace: RateTrace, window: float, tol: float) -> float:
    """Earliest time after which every rate stays within ``tol`` of its final window mean."""
    ref_l = trace.lam[:, trace.times >= trace.times[-1] - window].mean(axis=1)
    ref_b = trace.b[:, trace.times >= trace.times[-1] - window].mean(axis=1)
    dev = np.maximum(np.abs(trace.lam - ref_l[:, None]).max(axis=0),
                     np.abs(trace.b - ref_b[:, None]).max(axis=0))
    bad = np.flatnonzero(dev >= tol)
    if bad.size == 0:
        return float(trace.times[0])
    k = bad[-1] + 1
    return float(trace.times[min(k, trace.times.size - 1)])
