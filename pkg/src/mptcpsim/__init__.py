"""Deterministic discrete-event simulator for MultiPath TCP with NewReno subflows."""

from .connection import ConnParams, Listener, MptcpConnection, Role, TcpConnection
from .scenario import (
    InvalidConfig, ScenarioConfig, builtin, load_config, run_scenario, write_trace_csv,
)
from .subflow import Subflow, TcpParams, TcpState

__all__ = [
    "ConnParams", "InvalidConfig", "Listener", "MptcpConnection", "Role", "ScenarioConfig",
    "Subflow", "TcpConnection", "TcpParams", "TcpState", "builtin", "load_config",
    "run_scenario", "write_trace_csv",
]
__version__ = "0.1.0"
