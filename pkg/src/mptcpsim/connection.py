"""Connection-level control blocks.

:class:`MptcpConnection` owns a set of subflows, stripes the application byte
stream over them with DSS mappings, reorders by DSN on receipt and runs the
ADD-ADDR / MP-JOIN and DATA-FIN machinery.  :class:`TcpConnection` is the
plain single-path socket used for the ``tcp`` mode and for coexistence
tests.  Both are sans-IO: every public method returns a list of effects.
"""

from __future__ import annotations

import bisect
import enum
import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

from .effects import (
    AppDataFin, AppDeliver, ConnectionDeallocated, DataAck, DeliverMapping,
    Established, SegmentOut, StateChange, SubflowAdded, SubflowClosed,
    TimerCancel, TimerSet,
)
from .errors import AlreadyConnected, ConnectionClosing, InvalidState, ProtocolViolation
from .subflow import DssMapping, Subflow, TcpParams, TcpState
from .wire import AddAddr, Dss, Flags, FourTuple, MpCapable, MpJoin, Segment

__all__ = [
    "ConnParams", "DssMapping", "Listener", "MptcpConnection", "Role", "TcpConnection",
]


class Role(enum.Enum):
    INITIATOR = "initiator"
    LISTENER_CHILD = "listener-child"


@dataclass
class ConnParams:
    tcp: TcpParams = field(default_factory=TcpParams)
    max_subflows: int = 8


def _default_ports() -> Callable[[], int]:
    return itertools.count(49152).__next__


class _Connection:
    mptcp = False

    def __init__(self, local_addrs: Sequence[int], role: Role = Role.INITIATOR,
                 params: Optional[ConnParams] = None, *,
                 port_alloc: Optional[Callable[[], int]] = None):
        self.local_addrs = list(local_addrs)
        self.role = role
        self.params = params or ConnParams()
        self.mss = self.params.tcp.mss
        self.token: Optional[int] = None
        self.subflows: list[Subflow] = []
        self.snd_buf = 0
        self.established = False
        self.closing = False
        self.deallocated = False
        self._port_alloc = port_alloc or _default_ports()

    def __repr__(self) -> str:
        return (f"<{type(self).__name__} token={self.token} role={self.role.value} "
                f"subflows={len(self.subflows)}>")

    def _new_subflow(self, four_tuple: FourTuple) -> Subflow:
        sf = Subflow(len(self.subflows), four_tuple, self.params.tcp, mptcp=self.mptcp)
        self.subflows.append(sf)
        return sf

    def _check_dealloc(self, out: list) -> None:
        if self.deallocated or not self.subflows:
            return
        if all(sf.state is TcpState.CLOSED for sf in self.subflows):
            self.deallocated = True
            self._on_dealloc(out)
            out.append(ConnectionDeallocated(self.token))

    def _on_dealloc(self, out: list) -> None:
        pass

    def on_timer(self, key: str, subflow_id: int, now: int) -> list:
        out: list = []
        if key == "rtx":
            sf = self.subflows[subflow_id]
            out.extend(self._absorb(sf, sf.on_timeout(now), now))
        else:
            self._on_conn_timer(key, now, out)
        return self._finish(now, out)

    def _on_conn_timer(self, key: str, now: int, out: list) -> None:
        raise KeyError(key)

    def send(self, nbytes: int, now: int = 0) -> list:
        """Queue ``nbytes`` of application data; the whole amount is accepted."""
        if self.closing:
            raise ConnectionClosing("send() after close()")
        if nbytes < 0:
            raise ValueError("nbytes must be non-negative")
        if nbytes == 0:
            return []
        self.snd_buf += nbytes
        if not self.established:
            return []
        return self._finish(now, [])

    def abort(self) -> list:
        out: list = []
        for sf in self.subflows:
            out.extend(sf.abort())
        self._check_dealloc(out)
        return out


class MptcpConnection(_Connection):
    """The MPTCP control block."""

    mptcp = True

    def __init__(self, local_addrs: Sequence[int], role: Role = Role.INITIATOR,
                 params: Optional[ConnParams] = None, *,
                 port_alloc: Optional[Callable[[], int]] = None):
        super().__init__(local_addrs, role, params, port_alloc=port_alloc)
        self.remote_addrs: dict[int, int] = {}
        self.next_dsn = 0
        self.data_acked = 0
        self.rcv_nxt_dsn = 0
        self.reorder_buf: dict[int, int] = {}
        self._reorder_keys: list[int] = []
        self.data_fin_dsn: Optional[int] = None
        self.data_fin_sent = False
        self.data_fin_acked = False
        self.peer_data_fin_dsn: Optional[int] = None
        self.data_fin_rcvd = False
        self.active_close = False
        self.scheduler_cursor = 0
        self._fins_started = False
        self._data_fin_tries = 0
        self._data_ack_sf: Optional[int] = None
        self._need_data_ack = False

    # --- establishment -------------------------------------------------------

    def connect(self, dest: FourTuple, now: int = 0) -> list:
        """Open the master subflow: SYN carrying MP-CAPABLE without a token."""
        if self.subflows:
            raise AlreadyConnected("connection already has subflows")
        if dest.src_addr not in self.local_addrs:
            raise ValueError("source address is not local")
        sf = self._new_subflow(dest)
        return [SubflowAdded(sf)] + sf.connect([MpCapable()], now)

    def accept(self, syn: Segment, token: int, now: int = 0) -> list:
        """Listener-child side of the master handshake: SYN-ACK with our token."""
        if self.subflows:
            raise AlreadyConnected("connection already has subflows")
        self.token = token
        sf = self._new_subflow(syn.tuple.reversed())
        return [SubflowAdded(sf)] + sf.accept(syn, [MpCapable(token)], now)

    def accept_join(self, syn: Segment, now: int = 0) -> Optional[list]:
        """Attach a new subflow from an MP-JOIN SYN.  Returns None to refuse."""
        join = syn.option(MpJoin)
        if join is None or join.token != self.token:
            return None
        if self.closing or self.deallocated or len(self.subflows) >= self.params.max_subflows:
            return None
        self.remote_addrs.setdefault(join.addr_id, syn.tuple.src_addr)
        sf = self._new_subflow(syn.tuple.reversed())
        out = [SubflowAdded(sf)] + sf.accept(syn, (), now)
        return self._finish(now, out)

    def on_established(self, now: int = 0) -> list:
        """Advertise every local address other than the master's with ADD-ADDR."""
        master = self.subflows[0]
        out = []
        for addr_id, addr in enumerate(self.local_addrs, start=1):
            if addr == master.tuple.src_addr:
                continue
            seg = Segment(master.tuple, Flags.ACK, master.snd_nxt, master.rcv_nxt,
                          options=(AddAddr(addr_id, addr),))
            out.append(SegmentOut(seg))
        return out

    def on_add_addr(self, opt: AddAddr, now: int = 0) -> list:
        known = self.remote_addrs.get(opt.addr_id)
        if known is not None:
            if known != opt.addr:
                raise ProtocolViolation(f"addr_id {opt.addr_id} re-advertised with a new address")
            return []
        self.remote_addrs[opt.addr_id] = opt.addr
        if self.role is not Role.INITIATOR or self.token is None or self.closing:
            return []
        return self._open_joins(now)

    def _open_joins(self, now: int) -> list:
        master = self.subflows[0]
        used_local = {sf.tuple.src_addr for sf in self.subflows}
        used_remote = {sf.tuple.dst_addr for sf in self.subflows}
        free_local = [(i, a) for i, a in enumerate(self.local_addrs, start=1) if a not in used_local]
        free_remote = [a for _, a in sorted(self.remote_addrs.items()) if a not in used_remote]
        out: list = []
        for (addr_id, local), remote in zip(free_local, free_remote):
            if len(self.subflows) >= self.params.max_subflows:
                break
            sf = self._new_subflow(FourTuple(local, self._port_alloc(), remote, master.tuple.dst_port))
            out.append(SubflowAdded(sf))
            out.extend(sf.connect([MpJoin(self.token, addr_id)], now))
        return out

    # --- inbound -------------------------------------------------------------

    def on_segment(self, subflow_id: int, seg: Segment, now: int) -> list:
        sf = self.subflows[subflow_id]
        out: list = []
        if (subflow_id == 0 and sf.state is TcpState.SYN_SENT
                and seg.has(Flags.SYN) and seg.has(Flags.ACK)):
            cap = seg.option(MpCapable)
            if cap is None or cap.token is None:
                raise ProtocolViolation("SYN-ACK without an MP-CAPABLE token")
            self.token = cap.token
        if not seg.flags & (Flags.SYN | Flags.RST) and sf.state is not TcpState.CLOSED:
            dss = seg.option(Dss)
            if dss is not None:
                if dss.data_ack is not None:
                    self._on_data_ack(dss.data_ack, out)
                if dss.data_fin:
                    fin_dsn = dss.dsn + dss.data_len
                    if self.peer_data_fin_dsn not in (None, fin_dsn):
                        raise ProtocolViolation("DATA-FIN moved")
                    self.peer_data_fin_dsn = fin_dsn
                    self._data_ack_sf = subflow_id
                    self._need_data_ack = True
            add = seg.option(AddAddr)
            if add is not None:
                out.extend(self.on_add_addr(add, now))
        out.extend(self._absorb(sf, sf.on_segment(seg, now), now))
        return self._finish(now, out)

    def _absorb(self, sf: Subflow, fx: list, now: int) -> list:
        out: list = []
        for e in fx:
            t = type(e)
            if t is DeliverMapping:
                out.extend(self.on_mapping_delivered(e.mapping))
                continue
            out.append(e)
            if t is StateChange and e.new is TcpState.ESTABLISHED and sf.id == 0 and not self.established:
                self.established = True
                out.append(Established())
                out.extend(self.on_established(now))
        return out

    def on_mapping_delivered(self, m: DssMapping) -> list:
        """Connection-level reordering of one in-order subflow mapping."""
        out: list = []
        end = m.dsn + m.data_len
        if end <= self.rcv_nxt_dsn:
            out.append(DataAck(self.rcv_nxt_dsn))
            return out
        if m.dsn < self.rcv_nxt_dsn:
            raise ProtocolViolation(f"mapping {m} straddles rcv_nxt_dsn {self.rcv_nxt_dsn}")
        if m.dsn == self.rcv_nxt_dsn:
            start = m.dsn
            self.rcv_nxt_dsn = end
            keys = self._reorder_keys
            while keys and keys[0] == self.rcv_nxt_dsn:
                self.rcv_nxt_dsn += self.reorder_buf.pop(keys.pop(0))
            out.append(AppDeliver(start, self.rcv_nxt_dsn - start))
            self._check_peer_data_fin(out)
        else:
            self._buffer(m)
        out.append(DataAck(self.rcv_nxt_dsn))
        return out

    def _buffer(self, m: DssMapping) -> None:
        known = self.reorder_buf.get(m.dsn)
        if known is not None:
            if known != m.data_len:
                raise ProtocolViolation(f"conflicting mappings at dsn {m.dsn}")
            return
        keys = self._reorder_keys
        i = bisect.bisect_left(keys, m.dsn)
        if i > 0 and keys[i - 1] + self.reorder_buf[keys[i - 1]] > m.dsn:
            raise ProtocolViolation(f"mapping at dsn {m.dsn} overlaps a buffered range")
        if i < len(keys) and m.dsn + m.data_len > keys[i]:
            raise ProtocolViolation(f"mapping at dsn {m.dsn} overlaps a buffered range")
        keys.insert(i, m.dsn)
        self.reorder_buf[m.dsn] = m.data_len

    def _check_peer_data_fin(self, out: list) -> None:
        if (not self.data_fin_rcvd and self.peer_data_fin_dsn is not None
                and self.rcv_nxt_dsn == self.peer_data_fin_dsn):
            self.rcv_nxt_dsn += 1
            self.data_fin_rcvd = True
            out.append(AppDataFin())

    def _on_data_ack(self, value: int, out: list) -> None:
        if value > self.data_acked:
            self.data_acked = value
        if (self.data_fin_dsn is not None and not self.data_fin_acked
                and value >= self.data_fin_dsn + 1):
            self.data_fin_acked = True
            out.append(TimerCancel("data_fin", -1))

    # --- outbound ------------------------------------------------------------

    def schedule(self, now: int = 0) -> list:
        """Round-robin the send buffer over subflows, one MSS chunk per visit."""
        out: list = []
        n = len(self.subflows)
        idle = 0
        while self.snd_buf > 0 and idle < n:
            sf = self.subflows[self.scheduler_cursor]
            self.scheduler_cursor = (self.scheduler_cursor + 1) % n
            chunk = min(self.mss, self.snd_buf)
            if sf.send_window() < chunk:
                idle += 1
                continue
            idle = 0
            m = DssMapping(self.next_dsn, sf.snd_nxt, chunk, sf.id)
            self.next_dsn += chunk
            self.snd_buf -= chunk
            out.extend(sf.transmit(m, now))
        return out

    def close(self, now: int = 0) -> list:
        """Queue a DATA-FIN after the last queued byte.  Idempotent."""
        if self.closing:
            return []
        self.closing = True
        self.active_close = not self.data_fin_rcvd
        self.data_fin_dsn = self.next_dsn + self.snd_buf
        out: list = []
        if not self.established:
            for sf in self.subflows:
                out.extend(self._absorb(sf, sf.close(now), now))
        return self._finish(now, out)

    def _sending_subflow(self) -> Optional[Subflow]:
        live = [sf for sf in self.subflows
                if sf.state in (TcpState.ESTABLISHED, TcpState.CLOSE_WAIT)]
        if not live:
            return None
        return live[self._data_fin_tries % len(live)]

    def _send_data_fin(self, now: int, out: list) -> None:
        sf = self._sending_subflow()
        if sf is None:
            return
        self.data_fin_sent = True
        seg = Segment(sf.tuple, Flags.ACK, sf.snd_nxt, sf.rcv_nxt,
                      options=(Dss(self.data_fin_dsn, 0, 0, None, True),))
        out.append(SegmentOut(seg))
        out.append(TimerSet("data_fin", -1, now + sf.rto * (1 << min(self._data_fin_tries, 6))))

    def _on_conn_timer(self, key: str, now: int, out: list) -> None:
        if key != "data_fin":
            raise KeyError(key)
        if self.data_fin_acked or self.deallocated:
            return
        self._data_fin_tries += 1
        self._send_data_fin(now, out)

    def _advance_close(self, now: int, out: list) -> None:
        if not self.closing or self.deallocated:
            return
        if not self.data_fin_sent and self.snd_buf == 0 and self.established:
            self._send_data_fin(now, out)
        if not (self.data_fin_acked and self.data_fin_rcvd):
            return
        if self.active_close:
            if not self._fins_started:
                self._fins_started = True
                for sf in self.subflows:
                    out.extend(self._absorb(sf, sf.close(now), now))
        else:
            for sf in self.subflows:
                if sf.state is TcpState.CLOSE_WAIT:
                    out.extend(self._absorb(sf, sf.close(now), now))

    def _on_dealloc(self, out: list) -> None:
        if self.data_fin_sent and not self.data_fin_acked:
            out.append(TimerCancel("data_fin", -1))

    def _finish(self, now: int, out: list) -> list:
        self._check_peer_data_fin(out)
        if self._need_data_ack and self.data_fin_rcvd:
            self._need_data_ack = False
            sf = self.subflows[self._data_ack_sf]
            if sf.state is not TcpState.CLOSED:
                out.append(SegmentOut(Segment(sf.tuple, Flags.ACK, sf.snd_nxt, sf.rcv_nxt)))
        if self.established and self.snd_buf:
            out.extend(self.schedule(now))
        self._advance_close(now, out)
        self._check_dealloc(out)
        return self._stamp(out)

    def _stamp(self, out: list) -> list:
        """Piggyback the cumulative DATA-ACK on every outgoing non-SYN segment."""
        if not self.established:
            return out
        ack = self.rcv_nxt_dsn
        for i, e in enumerate(out):
            if type(e) is not SegmentOut:
                continue
            seg = e.segment
            if seg.flags & (Flags.SYN | Flags.RST):
                continue
            opts = list(seg.options)
            for j, o in enumerate(opts):
                if type(o) is Dss:
                    opts[j] = replace(o, data_ack=ack)
                    break
            else:
                opts.append(Dss(data_ack=ack))
            out[i] = SegmentOut(replace(seg, options=tuple(opts)))
        return out

    @property
    def all_data_acked(self) -> bool:
        return self.snd_buf == 0 and self.data_acked >= self.next_dsn


class TcpConnection(_Connection):
    """Single-path NewReno socket sharing the subflow machinery."""

    mptcp = False

    def __init__(self, local_addrs: Sequence[int], role: Role = Role.INITIATOR,
                 params: Optional[ConnParams] = None, *,
                 port_alloc: Optional[Callable[[], int]] = None):
        super().__init__(local_addrs, role, params, port_alloc=port_alloc)
        self.data_fin_rcvd = False

    def connect(self, dest: FourTuple, now: int = 0) -> list:
        if self.subflows:
            raise AlreadyConnected("connection already has a subflow")
        sf = self._new_subflow(dest)
        return [SubflowAdded(sf)] + sf.connect((), now)

    def accept(self, syn: Segment, now: int = 0) -> list:
        if self.subflows:
            raise AlreadyConnected("connection already has a subflow")
        sf = self._new_subflow(syn.tuple.reversed())
        return [SubflowAdded(sf)] + sf.accept(syn, (), now)

    def on_segment(self, subflow_id: int, seg: Segment, now: int) -> list:
        sf = self.subflows[subflow_id]
        return self._finish(now, self._absorb(sf, sf.on_segment(seg, now), now))

    def _absorb(self, sf: Subflow, fx: list, now: int) -> list:
        out: list = []
        for e in fx:
            t = type(e)
            if t is DeliverMapping:
                out.append(AppDeliver(e.mapping.dsn, e.mapping.data_len))
                continue
            out.append(e)
            if t is StateChange:
                if e.new is TcpState.ESTABLISHED and not self.established:
                    self.established = True
                    out.append(Established())
                elif e.new is TcpState.CLOSE_WAIT or (
                        e.new in (TcpState.CLOSING, TcpState.TIME_WAIT) and not self.data_fin_rcvd):
                    if not self.data_fin_rcvd:
                        self.data_fin_rcvd = True
                        out.append(AppDataFin())
        return out

    def _finish(self, now: int, out: list) -> list:
        sf = self.subflows[0] if self.subflows else None
        if sf is not None and self.established:
            while self.snd_buf:
                chunk = min(self.mss, self.snd_buf)
                if sf.send_window() < chunk:
                    break
                m = DssMapping(sf.stats.bytes_sent, sf.snd_nxt, chunk, sf.id)
                self.snd_buf -= chunk
                out.extend(sf.transmit(m, now))
            if self.closing and self.snd_buf == 0:
                out.extend(self._absorb(sf, sf.close(now), now))
        self._check_dealloc(out)
        return out

    def close(self, now: int = 0) -> list:
        if self.closing:
            return []
        self.closing = True
        out: list = []
        if not self.established:
            for sf in self.subflows:
                out.extend(self._absorb(sf, sf.close(now), now))
        return self._finish(now, out)

    @property
    def all_data_acked(self) -> bool:
        if self.snd_buf or not self.subflows:
            return self.snd_buf == 0
        return not self.subflows[0].unacked_data


class Listener:
    """A passive socket in LISTEN.  Each accepted SYN forks an independent child."""

    def __init__(self, addr: int, port: int, local_addrs: Sequence[int],
                 params: Optional[ConnParams] = None, *,
                 port_alloc: Optional[Callable[[], int]] = None, mptcp: bool = True):
        self.addr = addr
        self.port = port
        self.local_addrs = list(local_addrs)
        self.params = params or ConnParams()
        self.mptcp = mptcp
        self.state = TcpState.LISTEN
        self.children: list[_Connection] = []
        self._port_alloc = port_alloc

    def fork(self, syn: Segment) -> _Connection:
        """Create the child for ``syn``; the caller finishes it with ``accept``."""
        if not syn.has(Flags.SYN) or syn.has(Flags.ACK):
            raise InvalidState("listeners only fork on a bare SYN")
        cls = MptcpConnection if self.mptcp and syn.option(MpCapable) is not None else TcpConnection
        child = cls(self.local_addrs, Role.LISTENER_CHILD, self.params, port_alloc=self._port_alloc)
        self.children.append(child)
        return child
