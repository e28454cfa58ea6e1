"""Discrete-event engine and point-to-point links.

Time is integer nanoseconds throughout.  Events run in (time, seq) order, so
two events at the same instant run in the order they were scheduled.
"""

from __future__ import annotations

import heapq
import itertools
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from .wire import Segment

NS_PER_S = 1_000_000_000

#: Bytes of TCP/IP header charged per segment when computing serialization time.
HEADER_OVERHEAD = 40


def seconds(ns: int) -> float:
    return ns / NS_PER_S


def to_ns(secs: float) -> int:
    return round(secs * NS_PER_S)


class Engine:
    def __init__(self) -> None:
        self.now = 0
        self._heap: list = []
        self._seq = itertools.count()
        self._cancelled: set[int] = set()
        self.executed = 0

    def schedule(self, delay: int, action: Callable, *args: Any) -> int:
        """Run ``action(*args)`` ``delay`` ns from now.  Returns an event id."""
        if delay < 0:
            raise ValueError(f"negative delay {delay}")
        return self.schedule_at(self.now + delay, action, *args)

    def schedule_at(self, when: int, action: Callable, *args: Any) -> int:
        if when < self.now:
            raise ValueError(f"event time {when} is in the past (now={self.now})")
        eid = next(self._seq)
        heapq.heappush(self._heap, (when, eid, action, args))
        return eid

    def cancel(self, eid: int) -> None:
        self._cancelled.add(eid)

    def pending(self) -> int:
        return len(self._heap) - len(self._cancelled)

    def run(self, until: Optional[int] = None) -> None:
        """Execute events until the queue drains or the next event is after ``until``."""
        heap = self._heap
        cancelled = self._cancelled
        while heap:
            when, eid, action, args = heap[0]
            if until is not None and when > until:
                self.now = until
                return
            heapq.heappop(heap)
            if eid in cancelled:
                cancelled.discard(eid)
                continue
            self.now = when
            self.executed += 1
            action(*args)


@dataclass
class DirectionStats:
    submitted: int = 0
    delivered: int = 0
    dropped_script: int = 0
    dropped_random: int = 0
    dropped_overflow: int = 0

    @property
    def dropped(self) -> int:
        return self.dropped_script + self.dropped_random + self.dropped_overflow


@dataclass
class _Direction:
    drop_script: frozenset
    loss_rate: float
    deliver: Optional[Callable[[Segment], None]] = None
    queue: deque = field(default_factory=deque)
    busy: bool = False
    data_ordinal: int = 0
    stats: DirectionStats = field(default_factory=DirectionStats)


class P2PLink:
    """A full-duplex point-to-point link with a tail-drop FIFO per direction.

    Direction 0 carries segments from endpoint 0 to endpoint 1.  Drop scripts
    and random loss apply only to payload-bearing segments; pure ACKs,
    handshakes and FINs are never scripted away.
    """

    def __init__(self, engine: Engine, bandwidth: float, delay: int, queue_cap: int = 100, *,
                 drop_script: tuple[Iterable[int], Iterable[int]] = ((), ()),
                 loss_rate: float = 0.0, rng: Optional[random.Random] = None,
                 name: str = "link"):
        if bandwidth <= 0 or delay < 0 or queue_cap < 0:
            raise ValueError("bandwidth must be positive; delay and queue_cap non-negative")
        self.engine = engine
        self.bandwidth = int(round(bandwidth))  # bits/s
        self.delay = delay
        self.queue_cap = queue_cap
        self.name = name
        self.rng = rng or random.Random(0)
        self.dirs = [_Direction(frozenset(drop_script[0]), loss_rate),
                     _Direction(frozenset(drop_script[1]), loss_rate)]
        self.taps: list[Callable] = []

    def connect(self, direction: int, deliver: Callable[[Segment], None]) -> None:
        """Set the receiver callback for segments travelling in ``direction``."""
        self.dirs[direction].deliver = deliver

    def tx_time(self, seg: Segment) -> int:
        bits = 8 * (HEADER_OVERHEAD + seg.payload_len) * NS_PER_S
        return -(-bits // self.bandwidth)

    def _tap(self, event: str, direction: int, seg: Segment, detail: Any = None) -> None:
        for tap in self.taps:
            tap(self.engine.now, self, direction, event, seg, detail)

    def transmit(self, seg: Segment, direction: int) -> None:
        d = self.dirs[direction]
        d.stats.submitted += 1
        self._tap("tx", direction, seg)
        if seg.payload_len:
            d.data_ordinal += 1
            if d.data_ordinal in d.drop_script:
                d.stats.dropped_script += 1
                self._tap("drop", direction, seg, "script")
                return
            if d.loss_rate and self.rng.random() < d.loss_rate:
                d.stats.dropped_random += 1
                self._tap("drop", direction, seg, "random")
                return
        if d.busy:
            if len(d.queue) >= self.queue_cap:
                d.stats.dropped_overflow += 1
                self._tap("drop", direction, seg, "overflow")
                return
            d.queue.append(seg)
        else:
            self._start(direction, seg)

    def _start(self, direction: int, seg: Segment) -> None:
        self.dirs[direction].busy = True
        self.engine.schedule(self.tx_time(seg), self._done, direction, seg)

    def _done(self, direction: int, seg: Segment) -> None:
        d = self.dirs[direction]
        self.engine.schedule(self.delay, self._arrive, direction, seg)
        if d.queue:
            self._start(direction, d.queue.popleft())
        else:
            d.busy = False

    def _arrive(self, direction: int, seg: Segment) -> None:
        d = self.dirs[direction]
        d.stats.delivered += 1
        self._tap("rx", direction, seg)
        if d.deliver is not None:
            d.deliver(seg)
