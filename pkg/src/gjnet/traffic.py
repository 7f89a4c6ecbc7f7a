"""Traffic equations and the per-node underload check."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Divergent
from .routing import Chain, RoutingMatrix, as_matrix


@dataclass
class TrafficSolution:
    vbar: np.ndarray
    residual: float
    terms_used: int

    def to_dict(self) -> dict:
        return {"vbar": self.vbar.tolist(), "residual": self.residual,
                "terms_used": self.terms_used}


def solve_traffic(V, P: Chain, tol: float = 1e-13, max_terms: int = 10**5,
                  bound: float = 1e8) -> TrafficSolution:
    """Total flow ``Vbar = V + VP + VP^2 + ...`` summed until a term's L1 norm < ``tol``.

    The result is checked against the fixed point ``Vbar = V + Vbar P``.
    """
    P = as_matrix(P)
    V = np.asarray(V, dtype=float)
    if V.shape != (P.m,):
        raise ValueError(f"rate vector has shape {V.shape}, expected ({P.m},)")
    if np.any(V < 0):
        raise ValueError("exogenous rates must be non-negative")
    total = V.copy()
    term = V.copy()
    k = 0
    while term.sum() >= tol:
        if k >= max_terms:
            raise Divergent(f"series not converged after {max_terms} terms "
                            f"(last term L1 = {term.sum():.3g})")
        term = P.left(term)
        total += term
        k += 1
        if total.max(initial=0.0) > bound:
            raise Divergent(f"partial sum exceeds {bound:g} after {k} terms")
    residual = float(np.max(np.abs(total - (V + P.left(total))), initial=0.0))
    if residual >= 10 * max(tol, np.finfo(float).eps * max(1.0, total.max(initial=0.0))):
        raise Divergent(f"fixed-point residual {residual:.3g} too large")
    return TrafficSolution(total, residual, k + 1)


def solve_traffic_direct(V, P: RoutingMatrix) -> np.ndarray:
    """Dense linear solve of ``Lambda (I - P) = V``; finite chains only."""
    A = np.eye(P.m) - P.dense()
    return np.linalg.solve(A.T, np.asarray(V, dtype=float))


@dataclass
class LoadReport:
    rho: np.ndarray
    underloaded: bool
    margin: float

    @property
    def overloaded_types(self) -> list[int]:
        return [int(i) + 1 for i in np.flatnonzero(self.rho >= 1.0 - self.margin)]

    def to_dict(self) -> dict:
        return {"rho": self.rho.tolist(), "underloaded": self.underloaded,
                "margin": self.margin, "overloaded_types": self.overloaded_types}


def check_underload(vbar, service_means, margin: float = 0.0) -> LoadReport:
    """Per-type load ``rho_i = E(eta_i) * Vbar_i``; underloaded iff every ``rho_i < 1 - margin``."""
    vbar = np.asarray(vbar, dtype=float)
    means = np.asarray(service_means, dtype=float)
    if np.any(~np.isfinite(means)) or np.any(means <= 0):
        raise ValueError("service means must be finite and positive")
    rho = means * vbar
    return LoadReport(rho, bool(np.all(rho < 1.0 - margin)), margin)
