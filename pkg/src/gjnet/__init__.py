"""Generalized Jackson networks: routing-chain analysis, traffic equations,
service-law regularity, finite-N simulation, mean-field integration and
Poisson-hypothesis verification."""

__version__ = "0.1.0"

from .errors import ConfigError, GJNError  # noqa: E402,F401
from .network import NetworkSpec  # noqa: E402,F401
from .routing import CountableChainSpec, RoutingMatrix  # noqa: E402,F401
