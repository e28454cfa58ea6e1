"""One subflow: a regular TCP connection with NewReno loss recovery.

:class:`Subflow` is a sans-IO state machine.  Its methods take the current
time in integer nanoseconds and return a list of effects (see
:mod:`mptcpsim.effects`); nothing here touches a clock or a network.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .effects import (
    CongestionEvent, DeliverMapping, Metric, Retransmit, SegmentOut,
    StateChange, SubflowClosed, TimerCancel, TimerSet,
)
from .errors import InvalidState, InvariantViolation, WindowExceeded
from .wire import Dss, Flags, FourTuple, MptcpOption, Segment

NS_PER_S = 1_000_000_000
SEQ_MASK = 0xFFFFFFFF
_HALF = 0x80000000


def seq_add(a: int, n: int) -> int:
    return (a + n) & SEQ_MASK


def seq_sub(a: int, b: int) -> int:
    """Forward distance from ``b`` to ``a`` in 32-bit sequence space."""
    return (a - b) & SEQ_MASK


def seq_lt(a: int, b: int) -> bool:
    return a != b and seq_sub(b, a) < _HALF


def seq_leq(a: int, b: int) -> bool:
    return a == b or seq_lt(a, b)


def seq_gt(a: int, b: int) -> bool:
    return seq_lt(b, a)


def seq_geq(a: int, b: int) -> bool:
    return a == b or seq_lt(b, a)


class TcpState(enum.Enum):
    CLOSED = "CLOSED"
    LISTEN = "LISTEN"
    SYN_SENT = "SYN_SENT"
    SYN_RCVD = "SYN_RCVD"
    ESTABLISHED = "ESTABLISHED"
    FIN_WAIT_1 = "FIN_WAIT_1"
    FIN_WAIT_2 = "FIN_WAIT_2"
    CLOSING = "CLOSING"
    TIME_WAIT = "TIME_WAIT"
    CLOSE_WAIT = "CLOSE_WAIT"
    LAST_ACK = "LAST_ACK"

    def __str__(self) -> str:
        return self.value


S = TcpState

#: Every edge of the standard TCP state diagram (RST/abort edges included).
TRANSITIONS = frozenset({
    (S.CLOSED, S.SYN_SENT), (S.LISTEN, S.SYN_RCVD),
    (S.SYN_SENT, S.ESTABLISHED), (S.SYN_SENT, S.CLOSED),
    (S.SYN_RCVD, S.ESTABLISHED), (S.SYN_RCVD, S.FIN_WAIT_1), (S.SYN_RCVD, S.CLOSED),
    (S.ESTABLISHED, S.FIN_WAIT_1), (S.ESTABLISHED, S.CLOSE_WAIT),
    (S.FIN_WAIT_1, S.FIN_WAIT_2), (S.FIN_WAIT_1, S.CLOSING),
    (S.FIN_WAIT_2, S.TIME_WAIT), (S.CLOSING, S.TIME_WAIT),
    (S.CLOSE_WAIT, S.LAST_ACK), (S.LAST_ACK, S.CLOSED), (S.TIME_WAIT, S.CLOSED),
    (S.ESTABLISHED, S.CLOSED), (S.FIN_WAIT_1, S.CLOSED), (S.FIN_WAIT_2, S.CLOSED),
    (S.CLOSING, S.CLOSED), (S.CLOSE_WAIT, S.CLOSED),
})

_SENDING_STATES = (S.ESTABLISHED, S.CLOSE_WAIT)
_RECEIVING_STATES = (S.ESTABLISHED, S.FIN_WAIT_1, S.FIN_WAIT_2)


@dataclass(frozen=True, slots=True)
class DssMapping:
    """Maps ``data_len`` bytes at subflow sequence ``ssn`` to connection DSN ``dsn``."""

    dsn: int
    ssn: int
    data_len: int
    subflow_id: int


@dataclass
class TcpParams:
    mss: int = 536
    initial_cwnd_segments: int = 1
    initial_ssthresh: int = 64 * 1024
    rwnd: int = 512 * 1024
    initial_rto: int = 1 * NS_PER_S
    min_rto: int = 200_000_000
    max_rto: int = 60 * NS_PER_S
    dupack_threshold: int = 3
    time_wait: int = 1 * NS_PER_S
    max_syn_retries: int = 6


@dataclass(slots=True)
class RetxEntry:
    ssn: int
    length: int  # sequence space: payload bytes, or 1 for a FIN
    mapping: Optional[DssMapping]
    fin: bool
    sent_at: int
    retransmitted: bool = False


@dataclass
class SubflowStats:
    bytes_sent: int = 0
    bytes_received: int = 0
    retransmissions: int = 0
    timeouts: int = 0
    halvings: int = 0
    rtt_sampled_ssns: list = field(default_factory=list)


class Subflow:
    def __init__(self, sf_id: int, four_tuple: FourTuple, params: Optional[TcpParams] = None,
                 *, isn: int = 0, mptcp: bool = True):
        self.id = sf_id
        self.tuple = four_tuple
        self.params = p = params or TcpParams()
        self.mss = p.mss
        self.mptcp = mptcp
        self.state = TcpState.CLOSED

        self.isn = isn & SEQ_MASK
        self.snd_una = self.snd_nxt = self.snd_max = self.isn
        self.irs: Optional[int] = None
        self.rcv_nxt = 0
        self.peer_rwnd = p.rwnd
        self.fin_seq: Optional[int] = None

        self.cwnd = p.initial_cwnd_segments * p.mss
        self.ssthresh = p.initial_ssthresh
        self.dup_ack_count = 0
        self.recover = self.isn
        self.in_fast_recovery = False

        self.srtt: Optional[float] = None
        self.rttvar: Optional[float] = None
        self.rto = p.initial_rto
        self.rto_backoff = 0
        self.timer_deadline: Optional[int] = None

        self.retx_queue: deque[RetxEntry] = deque()
        self._ooo: dict[int, tuple] = {}
        self._rcv_offset = 0
        self._syn_options: tuple = ()
        self._syn_sent_at = 0
        self._syn_retries = 0

        self.stats = SubflowStats()
        self._out: list = []

    def __repr__(self) -> str:
        return f"<Subflow {self.id} {self.tuple} {self.state}>"

    # --- effect plumbing -----------------------------------------------

    def _drain(self) -> list:
        out, self._out = self._out, []
        return out

    def _set_state(self, new: TcpState) -> None:
        old = self.state
        if old is not new:
            self.state = new
            self._out.append(StateChange(self.id, old, new))

    def _set_cwnd(self, value: int) -> None:
        value = max(value, self.mss)
        if value != self.cwnd:
            self.cwnd = value
            self._out.append(Metric(self.id, "cwnd", value))

    def _set_ssthresh(self, value: int) -> None:
        if value != self.ssthresh:
            self.ssthresh = value
            self._out.append(Metric(self.id, "ssthresh", value))

    def _set_rto(self, value: int) -> None:
        value = min(max(value, self.params.min_rto), self.params.max_rto)
        if value != self.rto:
            self.rto = value
            self._out.append(Metric(self.id, "rto", value))

    def _arm(self, now: int, delay: Optional[int] = None) -> None:
        self.timer_deadline = now + (self.rto if delay is None else delay)
        self._out.append(TimerSet("rtx", self.id, self.timer_deadline))

    def _cancel_timer(self) -> None:
        if self.timer_deadline is not None:
            self.timer_deadline = None
            self._out.append(TimerCancel("rtx", self.id))

    def _send(self, flags: Flags, ssn: int, payload_len: int = 0,
              options: Sequence[MptcpOption] = ()) -> None:
        ack = self.rcv_nxt if flags & Flags.ACK else 0
        self._out.append(SegmentOut(Segment(self.tuple, flags, ssn, ack, payload_len, tuple(options))))

    def _send_ack(self) -> None:
        self._send(Flags.ACK, self.snd_nxt)

    def _closed(self) -> None:
        self._cancel_timer()
        self._set_state(TcpState.CLOSED)
        self._out.append(SubflowClosed(self.id))

    def _on_established(self) -> None:
        self._set_state(TcpState.ESTABLISHED)
        self._out.append(Metric(self.id, "cwnd", self.cwnd))
        self._out.append(Metric(self.id, "ssthresh", self.ssthresh))
        self._out.append(Metric(self.id, "rto", self.rto))

    # --- handshake -------------------------------------------------------

    def connect(self, options: Sequence[MptcpOption] = (), now: int = 0) -> list:
        """Active open: emit the SYN.  ISN defaults to 0, so the SYN takes SSN 0."""
        if self.state is not TcpState.CLOSED:
            raise InvalidState(f"connect() in state {self.state}")
        self._syn_options = tuple(options)
        self._syn_sent_at = now
        self._send(Flags.SYN, self.isn, options=self._syn_options)
        self.snd_nxt = self.snd_max = seq_add(self.isn, 1)
        self._set_state(TcpState.SYN_SENT)
        self._arm(now)
        return self._drain()

    def accept(self, syn: Segment, options: Sequence[MptcpOption] = (), now: int = 0) -> list:
        """Passive open from a received SYN: emit the SYN-ACK."""
        if self.state is not TcpState.CLOSED:
            raise InvalidState(f"accept() in state {self.state}")
        if not syn.has(Flags.SYN) or syn.has(Flags.ACK):
            raise ValueError("accept() needs a bare SYN")
        self.state = TcpState.LISTEN
        self.irs = syn.ssn
        self.rcv_nxt = seq_add(syn.ssn, 1)
        self._syn_options = tuple(options)
        self._syn_sent_at = now
        self._set_state(TcpState.SYN_RCVD)
        self._send(Flags.SYN | Flags.ACK, self.isn, options=self._syn_options)
        self.snd_nxt = self.snd_max = seq_add(self.isn, 1)
        self._arm(now)
        return self._drain()

    def _handshake_rtt(self, now: int) -> None:
        if self._syn_retries == 0:
            self._rtt_sample(now - self._syn_sent_at, self.isn)

    # --- inbound -----------------------------------------------------------

    def on_segment(self, seg: Segment, now: int) -> list:
        """Drive the state machine with one inbound segment."""
        state = self.state
        if state in (TcpState.CLOSED, TcpState.LISTEN):
            return []
        if seg.has(Flags.RST):
            self._closed()
            return self._drain()

        if state is TcpState.SYN_SENT:
            if seg.has(Flags.SYN) and seg.has(Flags.ACK) and seg.ack_ssn == self.snd_nxt:
                self.irs = seg.ssn
                self.rcv_nxt = seq_add(seg.ssn, 1)
                self.snd_una = seg.ack_ssn
                self._cancel_timer()
                self._handshake_rtt(now)
                self._on_established()
                self._send_ack()
            return self._drain()

        if seg.has(Flags.SYN):
            # retransmitted SYN (our SYN-ACK was lost) or SYN-ACK (our ACK was lost)
            if state is TcpState.SYN_RCVD:
                self._send(Flags.SYN | Flags.ACK, self.isn, options=self._syn_options)
            elif not seg.has(Flags.ACK) or seg.ack_ssn == seq_add(self.isn, 1):
                self._send_ack()
            return self._drain()
        if not seg.has(Flags.ACK):
            return self._drain()

        if state is TcpState.SYN_RCVD:
            if seg.ack_ssn != self.snd_nxt:
                return self._drain()
            self.snd_una = seg.ack_ssn
            self._cancel_timer()
            self._handshake_rtt(now)
            self._on_established()
        else:
            self._process_ack(seg.ack_ssn, now, _is_dup_candidate(seg))
            self._check_fin_acked(now)
            if self.state is TcpState.CLOSED:
                return self._drain()

        self._receive(seg, now)
        return self._drain()

    def _check_fin_acked(self, now: int) -> None:
        if self.fin_seq is None or not seq_gt(self.snd_una, self.fin_seq):
            return
        if self.state is TcpState.FIN_WAIT_1:
            self._set_state(TcpState.FIN_WAIT_2)
        elif self.state is TcpState.CLOSING:
            self._enter_time_wait(now)
        elif self.state is TcpState.LAST_ACK:
            self._closed()

    def _enter_time_wait(self, now: int) -> None:
        self._set_state(TcpState.TIME_WAIT)
        self._arm(now, self.params.time_wait)

    def _receive(self, seg: Segment, now: int) -> None:
        fin = seg.has(Flags.FIN)
        length = seg.payload_len
        if not length and not fin:
            return
        if self.state not in _RECEIVING_STATES:
            # peer's FIN already consumed: this is a retransmission
            self._send_ack()
            if self.state is TcpState.TIME_WAIT:
                self._arm(now, self.params.time_wait)
            return
        mapping = None
        if length:
            dss = seg.option(Dss)
            if dss is not None and dss.has_mapping:
                mapping = DssMapping(dss.dsn, dss.ssn, dss.data_len, self.id)
        if seg.ssn == self.rcv_nxt:
            self._accept(seg.ssn, length, mapping, fin, now)
            while self.rcv_nxt in self._ooo and self.state in _RECEIVING_STATES:
                self._accept(self.rcv_nxt, *self._ooo.pop(self.rcv_nxt), now)
        elif seq_gt(seg.ssn, self.rcv_nxt):
            self._ooo.setdefault(seg.ssn, (length, mapping, fin))
        self._send_ack()

    def _accept(self, ssn: int, length: int, mapping: Optional[DssMapping], fin: bool, now: int) -> None:
        if length:
            if mapping is None:
                mapping = DssMapping(self._rcv_offset, ssn, length, self.id)
            self._rcv_offset += length
            self.rcv_nxt = seq_add(self.rcv_nxt, length)
            self.stats.bytes_received += length
            self._out.append(DeliverMapping(self.id, mapping))
            self._out.append(Metric(self.id, "delivered_bytes", self.stats.bytes_received))
        if fin:
            self.rcv_nxt = seq_add(self.rcv_nxt, 1)
            self._ooo.clear()
            if self.state is TcpState.ESTABLISHED:
                self._set_state(TcpState.CLOSE_WAIT)
            elif self.state is TcpState.FIN_WAIT_1:
                self._set_state(TcpState.CLOSING)
            elif self.state is TcpState.FIN_WAIT_2:
                self._enter_time_wait(now)

    # --- NewReno sender ------------------------------------------------------

    def on_ack(self, ack_ssn: int, now: int, dup_candidate: bool = True) -> list:
        """Process a cumulative ACK.  ACKs outside [snd_una, snd_max] are ignored."""
        self._process_ack(ack_ssn, now, dup_candidate)
        return self._drain()

    def _process_ack(self, ack: int, now: int, dup_candidate: bool) -> None:
        if seq_gt(ack, self.snd_max) or seq_lt(ack, self.snd_una):
            return
        if ack == self.snd_una:
            if dup_candidate and self.snd_una != self.snd_max:
                self._on_dup_ack(now)
            return

        acked = seq_sub(ack, self.snd_una)
        data_acked = 0
        sample_ok = True
        last = None
        q = self.retx_queue
        while q and seq_leq(seq_add(q[0].ssn, q[0].length), ack):
            e = q.popleft()
            if e.retransmitted:
                sample_ok = False
            if not e.fin:
                data_acked += e.length
            last = e
        self.snd_una = ack
        if seq_lt(self.snd_nxt, ack):
            self.snd_nxt = ack
        # Karn: never sample an ACK that covers a retransmitted segment
        if last is not None and sample_ok:
            self._rtt_sample(now - last.sent_at, last.ssn)

        mss = self.mss
        if self.in_fast_recovery:
            if seq_geq(ack, self.recover):
                self.in_fast_recovery = False
                self.dup_ack_count = 0
                self._set_cwnd(self.ssthresh)
                self._out.append(CongestionEvent(self.id, "RECOVERED"))
            else:
                if q:
                    self._retransmit(q[0], now)
                self._set_cwnd(self.cwnd - acked + mss)
        else:
            self.dup_ack_count = 0
            if data_acked:
                if self.cwnd < self.ssthresh:
                    self._set_cwnd(self.cwnd + mss)
                else:
                    self._set_cwnd(self.cwnd + max(1, mss * mss // self.cwnd))

        if self.snd_una == self.snd_max:
            self._cancel_timer()
        else:
            self._arm(now)
        self._pump(now)

    def _on_dup_ack(self, now: int) -> None:
        self.dup_ack_count += 1
        mss = self.mss
        if self.in_fast_recovery:
            self._set_cwnd(self.cwnd + mss)
            return
        if self.dup_ack_count != self.params.dupack_threshold:
            return
        if not seq_geq(self.snd_una, self.recover) or not self.retx_queue:
            return
        flight = seq_sub(self.snd_nxt, self.snd_una)
        self._set_ssthresh(max(flight // 2, 2 * mss))
        self.recover = self.snd_max
        self.in_fast_recovery = True
        self.stats.halvings += 1
        self._out.append(CongestionEvent(self.id, "FAST_RECOVERY"))
        self._retransmit(self.retx_queue[0], now)
        self._set_cwnd(self.ssthresh + 3 * mss)

    def on_timeout(self, now: int) -> list:
        """Retransmission (or TIME_WAIT) timer expiry."""
        self.timer_deadline = None
        state = self.state
        if state is TcpState.TIME_WAIT:
            self._closed()
            return self._drain()
        if state in (TcpState.SYN_SENT, TcpState.SYN_RCVD):
            self._syn_retries += 1
            if self._syn_retries > self.params.max_syn_retries:
                self._closed()
                return self._drain()
            self._backoff()
            flags = Flags.SYN if state is TcpState.SYN_SENT else Flags.SYN | Flags.ACK
            self._send(flags, self.isn, options=self._syn_options)
            self._arm(now)
            return self._drain()
        if state is TcpState.CLOSED:
            return []
        if self.snd_una == self.snd_max:
            raise InvariantViolation(f"subflow {self.id}: RTO fired with no unacked data")

        flight = seq_sub(self.snd_nxt, self.snd_una)
        self._set_ssthresh(max(flight // 2, 2 * self.mss))
        self._set_cwnd(self.mss)
        self.in_fast_recovery = False
        self.dup_ack_count = 0
        self.recover = self.snd_max
        self.stats.timeouts += 1
        self._out.append(CongestionEvent(self.id, "TIMEOUT"))
        self._backoff()
        self.snd_nxt = self.snd_una
        self._pump(now)
        self._arm(now)
        return self._drain()

    def _backoff(self) -> None:
        self.rto_backoff += 1
        self._set_rto(self.rto * 2)

    def _rtt_sample(self, sample: int, ssn: int) -> None:
        r = float(sample)
        if self.srtt is None:
            self.srtt = r
            self.rttvar = r / 2
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - r)
            self.srtt = 0.875 * self.srtt + 0.125 * r
        self.rto_backoff = 0
        self.stats.rtt_sampled_ssns.append(ssn)
        self._set_rto(int(self.srtt + 4 * self.rttvar))

    def _segment_for(self, e: RetxEntry) -> Segment:
        if e.fin:
            return Segment(self.tuple, Flags.FIN | Flags.ACK, e.ssn, self.rcv_nxt)
        opts = ()
        if self.mptcp and e.mapping is not None:
            m = e.mapping
            opts = (Dss(m.dsn, m.ssn, m.data_len),)
        return Segment(self.tuple, Flags.ACK, e.ssn, self.rcv_nxt, e.length, opts)

    def _retransmit(self, e: RetxEntry, now: int) -> None:
        e.retransmitted = True
        e.sent_at = now
        self.stats.retransmissions += 1
        self._out.append(Retransmit(self.id, e.ssn, e.length))
        self._out.append(SegmentOut(self._segment_for(e)))

    def _pump(self, now: int) -> None:
        """Resend rewound segments (after an RTO) as the window allows."""
        if self.snd_nxt == self.snd_max:
            return
        limit = min(self.cwnd, self.peer_rwnd)
        for e in self.retx_queue:
            if seq_lt(e.ssn, self.snd_nxt):
                continue
            if self.snd_nxt == self.snd_max:
                break
            flight = seq_sub(self.snd_nxt, self.snd_una)
            if flight and not e.fin and flight + e.length > limit:
                break
            self._retransmit(e, now)
            self.snd_nxt = seq_add(e.ssn, e.length)

    def _ensure_timer(self, now: int) -> None:
        if self.timer_deadline is None:
            self._arm(now)

    # --- outbound data -----------------------------------------------------

    def send_window(self) -> int:
        """Bytes of new data the subflow may send now."""
        if self.state not in _SENDING_STATES or self.fin_seq is not None:
            return 0
        if self.snd_nxt != self.snd_max:
            return 0
        flight = seq_sub(self.snd_nxt, self.snd_una)
        return max(0, min(self.cwnd, self.peer_rwnd) - flight)

    def transmit(self, mapping: DssMapping, now: int) -> list:
        if self.state not in _SENDING_STATES or self.fin_seq is not None:
            raise InvalidState(f"transmit() in state {self.state}")
        if mapping.data_len > self.send_window():
            raise WindowExceeded(f"{mapping.data_len} > window {self.send_window()}")
        if mapping.ssn != self.snd_nxt:
            raise ValueError(f"mapping ssn {mapping.ssn} != snd_nxt {self.snd_nxt}")
        e = RetxEntry(self.snd_nxt, mapping.data_len, mapping, False, now)
        self.retx_queue.append(e)
        self.snd_nxt = self.snd_max = seq_add(self.snd_nxt, mapping.data_len)
        self.stats.bytes_sent += mapping.data_len
        self._out.append(SegmentOut(self._segment_for(e)))
        self._ensure_timer(now)
        return self._drain()

    def close(self, now: int) -> list:
        """Start (or answer) the FIN handshake.  Idempotent."""
        state = self.state
        if state is TcpState.SYN_SENT:
            self._closed()
            return self._drain()
        if state in (TcpState.SYN_RCVD, TcpState.ESTABLISHED):
            self._set_state(TcpState.FIN_WAIT_1)
        elif state is TcpState.CLOSE_WAIT:
            self._set_state(TcpState.LAST_ACK)
        else:
            return self._drain()
        e = RetxEntry(self.snd_max, 1, None, True, now)
        self.retx_queue.append(e)
        self.fin_seq = self.snd_max
        self.snd_max = seq_add(self.snd_max, 1)
        if self.snd_nxt == self.fin_seq:
            self.snd_nxt = self.snd_max
            self._out.append(SegmentOut(self._segment_for(e)))
        self._ensure_timer(now)
        return self._drain()

    def abort(self) -> list:
        if self.state is not TcpState.CLOSED:
            self._closed()
        return self._drain()

    @property
    def flight(self) -> int:
        return seq_sub(self.snd_nxt, self.snd_una)

    @property
    def unacked_data(self) -> bool:
        return any(not e.fin for e in self.retx_queue)


def _is_dup_candidate(seg: Segment) -> bool:
    if seg.payload_len or seg.flags & (Flags.SYN | Flags.FIN):
        return False
    return all(type(o) is Dss and not o.data_len and not o.data_fin for o in seg.options)
