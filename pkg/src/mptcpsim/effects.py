"""Effect values returned by the sans-IO protocol objects.

Subflows and connections never touch the clock, the network or the trace
directly.  Every operation returns a list of these records and the host that
owns the object carries them out.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

from .wire import Segment


@dataclass(frozen=True, slots=True)
class SegmentOut:
    segment: Segment


@dataclass(frozen=True, slots=True)
class DeliverMapping:
    """In-order payload handed from a subflow to its connection."""

    subflow_id: int
    mapping: Any  # DssMapping


@dataclass(frozen=True, slots=True)
class TimerSet:
    """Arm (or re-arm) timer ``key`` to fire at absolute time ``deadline`` (ns)."""

    key: str
    subflow_id: int
    deadline: int


@dataclass(frozen=True, slots=True)
class TimerCancel:
    key: str
    subflow_id: int


@dataclass(frozen=True, slots=True)
class StateChange:
    subflow_id: int
    old: Any
    new: Any


@dataclass(frozen=True, slots=True)
class Metric:
    """A traced variable changed: cwnd, ssthresh or rto (rto in ns)."""

    subflow_id: int
    name: str
    value: int


@dataclass(frozen=True, slots=True)
class CongestionEvent:
    """``FAST_RECOVERY``, ``RECOVERED`` or ``TIMEOUT`` on one subflow."""

    subflow_id: int
    kind: str


@dataclass(frozen=True, slots=True)
class Retransmit:
    subflow_id: int
    ssn: int
    length: int


@dataclass(frozen=True, slots=True)
class SubflowClosed:
    subflow_id: int


# connection-level


@dataclass(frozen=True, slots=True)
class SubflowAdded:
    subflow: Any


@dataclass(frozen=True, slots=True)
class Established:
    pass


@dataclass(frozen=True, slots=True)
class AppDeliver:
    dsn: int
    length: int


@dataclass(frozen=True, slots=True)
class AppDataFin:
    pass


@dataclass(frozen=True, slots=True)
class DataAck:
    value: int


@dataclass(frozen=True, slots=True)
class ConnectionDeallocated:
    token: Optional[int]
