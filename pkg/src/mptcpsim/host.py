"""Simulated hosts: carry out protocol effects on top of the event engine."""

from __future__ import annotations

import hashlib
import itertools
import random
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

from .connection import ConnParams, Listener, MptcpConnection, Role, TcpConnection
from .demux import EndpointTable, RouteKind, reset_for
from .effects import (
    AppDataFin, AppDeliver, CongestionEvent, ConnectionDeallocated, Established,
    Metric, SegmentOut, StateChange, SubflowAdded, SubflowClosed, TimerCancel, TimerSet,
)
from .errors import ProtocolViolation
from .netsim import Engine, P2PLink
from .wire import FourTuple, Segment, addr_to_int, int_to_addr

_CYCLE = bytes(range(256)) * 64


def payload_pattern(dsn: int, length: int) -> bytes:
    """Content of ``length`` stream bytes starting at ``dsn``: byte d is d mod 256."""
    out = []
    while length > 0:
        n = min(length, len(_CYCLE) - 256)
        start = dsn % 256
        out.append(_CYCLE[start:start + n])
        dsn += n
        length -= n
    return b"".join(out)


def expected_digest(nbytes: int) -> str:
    h = hashlib.sha256()
    for off in range(0, nbytes, 1 << 16):
        h.update(payload_pattern(off, min(1 << 16, nbytes - off)))
    return h.hexdigest()


@dataclass(frozen=True, slots=True)
class TraceRecord:
    time: int  # ns
    conn_token: int
    subflow_id: int
    metric: str
    value: Any


@dataclass(frozen=True, slots=True)
class LogEvent:
    time: int
    node: str
    kind: str
    conn_id: int
    token: Optional[int]
    subflow_id: int = -1
    detail: str = ""


# --- applications ------------------------------------------------------------


class BulkSender:
    """Writes ``total_bytes`` (or keeps the buffer topped up until stopped),
    then closes once everything written has been acknowledged."""

    traced = frozenset({"cwnd", "ssthresh", "rto", "state"})
    low_water = 64 * 1024
    high_water = 128 * 1024

    def __init__(self, total_bytes: Optional[int] = None):
        self.total_bytes = total_bytes
        self.written = 0
        self.stopped = total_bytes is not None
        self.closed_at: Optional[int] = None

    def stop(self) -> None:
        self.stopped = True

    def poll(self, conn, now: int) -> list:
        if self.closed_at is not None or not conn.established or conn.closing:
            return []
        if self.total_bytes is not None:
            if self.written < self.total_bytes:
                n = self.total_bytes - self.written
                self.written += n
                return conn.send(n, now)
        elif not self.stopped:
            if conn.snd_buf < self.low_water:
                n = self.high_water - conn.snd_buf
                self.written += n
                return conn.send(n, now)
            return []
        if conn.all_data_acked:
            self.closed_at = now
            return conn.close(now)
        return []

    def on_deliver(self, dsn: int, length: int, now: int) -> None:
        pass

    def on_data_fin(self, conn, now: int) -> list:
        return conn.close(now)


class Sink:
    """Receives a stream and checks every byte arrives once, in DSN order."""

    traced = frozenset({"delivered_bytes"})

    def __init__(self) -> None:
        self.received = 0
        self.violations: list[str] = []
        self.last_byte_at: Optional[int] = None
        self.fin_at: Optional[int] = None
        self._hash = hashlib.sha256()

    def poll(self, conn, now: int) -> list:
        return []

    def on_deliver(self, dsn: int, length: int, now: int) -> None:
        if dsn != self.received:
            self.violations.append(f"t={now}: got dsn {dsn}, expected {self.received}")
        self._hash.update(payload_pattern(dsn, length))
        self.received += length
        self.last_byte_at = now

    def on_data_fin(self, conn, now: int) -> list:
        self.fin_at = now
        return conn.close(now)

    def verify(self, expected_bytes: Optional[int] = None) -> bool:
        n = self.received if expected_bytes is None else expected_bytes
        return (not self.violations and self.received == n
                and self._hash.hexdigest() == expected_digest(n))


# --- node --------------------------------------------------------------------


class Node:
    def __init__(self, net: "Network", name: str, addrs: Sequence[int]):
        self.net = net
        self.engine = net.engine
        self.name = name
        self.addrs = [addr_to_int(a) for a in addrs]
        self.table = EndpointTable(random.Random(f"{net.seed}:{name}"))
        self.ifaces: dict[int, tuple[P2PLink, int]] = {}
        self.conns: list = []
        self.apps: dict[int, Any] = {}
        self.conn_ids: dict[int, int] = {}
        self.timers: dict[tuple, list] = {}
        self._ports = itertools.count(49152)
        self.rst_sent = 0
        self.no_route = 0

    def __repr__(self) -> str:
        return f"<Node {self.name} {[int_to_addr(a) for a in self.addrs]}>"

    def port_alloc(self) -> int:
        return next(self._ports)

    # --- sockets -------------------------------------------------------------

    def listen(self, port: int, addr: Optional[int] = None, params: Optional[ConnParams] = None,
               app_factory: Callable[[], Any] = Sink, mptcp: bool = True) -> Listener:
        addr = self.addrs[0] if addr is None else addr
        listener = Listener(addr, port, self.addrs, params or self.net.params,
                            port_alloc=self.port_alloc, mptcp=mptcp)
        listener.app_factory = app_factory
        self.table.listen(listener)
        return listener

    def open(self, remote_addr: int, remote_port: int, app: Any, *, mode: str = "mptcp",
             local_addr: Optional[int] = None, params: Optional[ConnParams] = None):
        cls = MptcpConnection if mode == "mptcp" else TcpConnection
        conn = cls(self.addrs, Role.INITIATOR, params or self.net.params, port_alloc=self.port_alloc)
        self._adopt(conn, app)
        local = self.addrs[0] if local_addr is None else local_addr
        dest = FourTuple(local, self.port_alloc(), remote_addr, remote_port)
        self.apply(conn, conn.connect(dest, self.engine.now))
        return conn

    def _adopt(self, conn, app) -> None:
        self.conns.append(conn)
        self.apps[id(conn)] = app
        self.conn_ids[id(conn)] = self.net.next_conn_id()

    # --- packet path ---------------------------------------------------------

    def output(self, seg: Segment) -> None:
        port = self.ifaces.get(seg.tuple.src_addr)
        if port is None:
            self.no_route += 1
            return
        link, direction = port
        link.transmit(seg, direction)

    def receive(self, seg: Segment) -> None:
        if seg.tuple.dst_addr not in self.addrs:
            self.no_route += 1
            return
        now = self.engine.now
        route = self.table.dispatch(seg)
        kind = route.kind
        if kind is RouteKind.DELIVER:
            conn = route.conn
            try:
                fx = conn.on_segment(route.subflow_id, seg, now)
            except ProtocolViolation as exc:
                self._log("protocol_violation", conn, route.subflow_id, str(exc))
                self._reset(seg)
                fx = conn.abort()
            self.apply(conn, fx)
        elif kind is RouteKind.JOIN:
            conn = route.conn
            fx = conn.accept_join(seg, now)
            if fx is None:
                self._reset(seg)
            else:
                self.apply(conn, fx)
        elif kind is RouteKind.FORK:
            listener = route.listener
            child = listener.fork(seg)
            self._adopt(child, listener.app_factory())
            if child.mptcp:
                token = self.table.allocate_token(child)
                fx = child.accept(seg, token, now)
            else:
                fx = child.accept(seg, now)
            self.apply(child, fx)
        elif kind is RouteKind.RESET:
            self._reset(seg)

    def _reset(self, seg: Segment) -> None:
        rst = reset_for(seg)
        if rst is not None:
            self.rst_sent += 1
            self.net.log.append(LogEvent(self.engine.now, self.name, "rst_sent", -1, None,
                                         detail=str(seg.tuple)))
            self.output(rst)

    # --- effects -------------------------------------------------------------

    def _log(self, kind: str, conn, subflow_id: int = -1, detail: str = "") -> None:
        self.net.log.append(LogEvent(self.engine.now, self.name, kind,
                                     self.conn_ids[id(conn)], conn.token, subflow_id, detail))

    def _trace(self, conn, subflow_id: int, metric: str, value: Any) -> None:
        app = self.apps.get(id(conn))
        if app is not None and metric in app.traced:
            self.net.record(conn, subflow_id, metric, value)

    def apply(self, conn, fx: list) -> None:
        """Carry out ``fx``, then let the connection's application react."""
        app = self.apps.get(id(conn))
        now = self.engine.now
        notes: list = []
        for e in fx:
            t = type(e)
            if t is SegmentOut:
                self.output(e.segment)
            elif t is TimerSet:
                self._set_timer(conn, e.key, e.subflow_id, e.deadline)
            elif t is TimerCancel:
                entry = self.timers.get((conn, e.key, e.subflow_id))
                if entry is not None:
                    entry[0] = None
            elif t is Metric:
                self._trace(conn, e.subflow_id, e.name, e.value)
            elif t is StateChange:
                self._trace(conn, e.subflow_id, "state", str(e.new))
            elif t is CongestionEvent:
                self._trace(conn, e.subflow_id, "state", e.kind)
            elif t is SubflowAdded:
                self.table.register(e.subflow.tuple.reversed(), conn, e.subflow.id)
            elif t is SubflowClosed:
                self._log("subflow_closed", conn, e.subflow_id)
            elif t is Established:
                if conn.token is not None and conn.role is Role.INITIATOR:
                    self.table.bind_token(conn.token, conn)
                self._log("established", conn)
            elif t is AppDeliver:
                if app is not None:
                    app.on_deliver(e.dsn, e.length, now)
                    self._trace(conn, -1, "delivered_bytes", app.received)
            elif t is AppDataFin:
                notes.append(e)
            elif t is ConnectionDeallocated:
                self._log("deallocated", conn)
                if conn.token is not None and conn.token in self.table.by_token:
                    self.table.deallocate(conn.token)
                else:
                    self.table.release(conn)
        if app is None:
            return
        for _ in notes:
            self.apply(conn, app.on_data_fin(conn, now))
        more = app.poll(conn, now)
        if more:
            self.apply(conn, more)

    def _set_timer(self, conn, key: str, subflow_id: int, deadline: int) -> None:
        k = (conn, key, subflow_id)
        entry = self.timers.get(k)
        if entry is None:
            entry = self.timers[k] = [deadline, None]
        else:
            entry[0] = deadline
        if entry[1] is None or entry[1] > deadline:
            entry[1] = deadline
            self.engine.schedule_at(deadline, self._fire, k, deadline)

    def _fire(self, k: tuple, scheduled_for: int) -> None:
        entry = self.timers.get(k)
        if entry is None or entry[1] != scheduled_for:
            return
        entry[1] = None
        deadline = entry[0]
        if deadline is None:
            return
        if deadline > self.engine.now:
            entry[1] = deadline
            self.engine.schedule_at(deadline, self._fire, k, deadline)
            return
        entry[0] = None
        conn, key, subflow_id = k
        if conn.deallocated:
            return
        self.apply(conn, conn.on_timer(key, subflow_id, self.engine.now))


class Network:
    """A set of nodes joined by point-to-point links, sharing one engine."""

    def __init__(self, seed: int = 0, params: Optional[ConnParams] = None):
        self.seed = seed
        self.params = params or ConnParams()
        self.engine = Engine()
        self.nodes: dict[str, Node] = {}
        self.links: list[P2PLink] = []
        self.trace: list[tuple] = []
        self.log: list[LogEvent] = []
        self._conn_ids = itertools.count()

    def record(self, conn, subflow_id: int, metric: str, value: Any) -> None:
        self.trace.append((self.engine.now, conn, subflow_id, metric, value))

    def records(self) -> list[TraceRecord]:
        """The trace so far.  Tokens are resolved now, so records written before
        a client learned its token still carry it."""
        return [TraceRecord(t, conn.token or 0, sf, m, v) for t, conn, sf, m, v in self.trace]

    def next_conn_id(self) -> int:
        return next(self._conn_ids)

    def add_node(self, name: str, addrs: Sequence) -> Node:
        node = Node(self, name, addrs)
        self.nodes[name] = node
        return node

    def owner(self, addr: int) -> Node:
        for node in self.nodes.values():
            if addr in node.addrs:
                return node
        raise KeyError(int_to_addr(addr))

    def add_link(self, a_addr, b_addr, bandwidth: float, delay: int, queue_cap: int = 100, *,
                 drop_script=((), ()), loss_rate: float = 0.0, name: Optional[str] = None) -> P2PLink:
        a_addr, b_addr = addr_to_int(a_addr), addr_to_int(b_addr)
        a, b = self.owner(a_addr), self.owner(b_addr)
        name = name or f"link{len(self.links)}"
        link = P2PLink(self.engine, bandwidth, delay, queue_cap, drop_script=drop_script,
                       loss_rate=loss_rate, rng=random.Random(f"{self.seed}:{name}"), name=name)
        a.ifaces[a_addr] = (link, 0)
        b.ifaces[b_addr] = (link, 1)
        link.connect(0, b.receive)
        link.connect(1, a.receive)
        link.ends = (a, b)
        link.taps.append(self._on_link_event)
        self.links.append(link)
        return link

    def _on_link_event(self, now, link, direction, event, seg, detail) -> None:
        if event != "drop":
            return
        sender = link.ends[direction]
        hit = sender.table.lookup(seg.tuple.reversed())
        if hit is None:
            return
        conn, subflow_id = hit
        self.record(conn, subflow_id, "drop", detail)

    def run(self, until: Optional[int] = None) -> None:
        self.engine.run(until)
