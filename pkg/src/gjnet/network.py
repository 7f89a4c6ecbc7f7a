"""Network description shared by the simulator and the mean-field integrator."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import service
from .errors import InvalidSpec
from .routing import ROW_TOL, RoutingMatrix, validate_open
from .service import ServiceDistribution


@dataclass
class NetworkSpec:
    """``m`` server types with ``N`` FIFO servers each.

    ``V`` holds per-server exogenous Poisson rates.  In closed mode ``V`` is
    zero, every row of ``P`` sums to one and ``K`` customers circulate.
    """

    P: RoutingMatrix
    V: np.ndarray
    services: Sequence[ServiceDistribution]
    N: int = 1
    mode: str = "open"
    K: int = 0
    horizon: float = 1000.0
    warmup: float | None = None
    force_open: bool = False
    allow_self: bool = True
    initial: Sequence[int] | None = None
    queue_cap: int = 10**6
    bin_width: float = 1.0
    snapshot_interval: float = 1.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.P, RoutingMatrix):
            self.P = RoutingMatrix(self.P)
        self.V = np.asarray(self.V, dtype=float).reshape(-1)
        self.services = list(self.services)
        if self.warmup is None:
            self.warmup = 0.2 * self.horizon

    @property
    def m(self) -> int:
        return self.P.m

    @property
    def service_means(self) -> np.ndarray:
        return np.array([d.mean for d in self.services])

    def validate(self) -> None:
        m = self.m
        if self.V.shape != (m,) or len(self.services) != m:
            raise InvalidSpec(f"V and services must have length m={m}")
        if np.any(self.V < 0):
            raise InvalidSpec("exogenous rates must be non-negative")
        if self.N < 1:
            raise InvalidSpec("N must be a positive integer")
        if not 0 <= self.warmup < self.horizon:
            raise InvalidSpec("need 0 <= warmup < horizon")
        if self.bin_width <= 0 or self.snapshot_interval <= 0:
            raise InvalidSpec("bin width and snapshot interval must be positive")
        if self.mode == "open":
            if not self.force_open:
                report = validate_open(self.P)
                if not report.passed:
                    raise InvalidSpec("open network check failed: " + "; ".join(report.failures))
        elif self.mode == "closed":
            if np.any(np.abs(self.P.row_sums() - 1.0) > ROW_TOL):
                raise InvalidSpec("closed mode needs every exit probability to be zero")
            if np.any(self.V != 0):
                raise InvalidSpec("closed mode needs zero exogenous rates")
            if self.K < 0:
                raise InvalidSpec("K must be non-negative")
        else:
            raise InvalidSpec(f"unknown mode {self.mode!r}")
        if self.initial is not None:
            init = np.asarray(self.initial)
            if init.shape != (self.N * m,) or np.any(init < 0):
                raise InvalidSpec("initial placement needs one non-negative count per server")
            if self.mode == "closed" and int(init.sum()) != self.K:
                raise InvalidSpec("closed-mode initial placement must hold exactly K customers")

    def to_dict(self) -> dict:
        P = self.P.dense()
        return {
            "m": self.m,
            "N": self.N,
            "P": P.tolist(),
            "V": self.V.tolist(),
            "services": [d.to_config() for d in self.services],
            "mode": self.mode,
            "K": self.K,
            "horizon": self.horizon,
            "warmup": self.warmup,
            "force_open": self.force_open,
            "allow_self": self.allow_self,
            "initial": None if self.initial is None else [int(x) for x in self.initial],
            "queue_cap": self.queue_cap,
            "bin_width": self.bin_width,
            "snapshot_interval": self.snapshot_interval,
        }

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkSpec":
        doc = dict(doc)
        P = RoutingMatrix(np.asarray(doc.pop("P"), dtype=float))
        services = [service.from_config(s) for s in doc.pop("services")]
        doc.pop("m", None)
        return cls(P=P, services=services, V=np.asarray(doc.pop("V"), dtype=float), **doc)
