from __future__ import annotations

from collections import deque

import pytest

from mptcpsim.connection import ConnParams, MptcpConnection, Role, TcpConnection
from mptcpsim.effects import SegmentOut
from mptcpsim.subflow import Subflow, TcpParams
from mptcpsim.wire import Flags, FourTuple, MpJoin, addr_to_int

A1, A2 = addr_to_int("10.0.1.1"), addr_to_int("10.0.2.1")
B1, B2 = addr_to_int("10.0.1.2"), addr_to_int("10.0.2.2")
TUPLE = FourTuple(A1, 49152, B1, 80)

# Acceptance criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def segments(fx) -> list:
    return [e.segment for e in fx if isinstance(e, SegmentOut)]


def of_type(fx, cls) -> list:
    return [e for e in fx if isinstance(e, cls)]


def subflow_pair(params: TcpParams | None = None, *, isn_a: int = 0, isn_b: int = 0,
                 mptcp: bool = False) -> tuple[Subflow, Subflow]:
    """Two subflows taken through the three-way handshake."""
    a = Subflow(0, TUPLE, params, isn=isn_a, mptcp=mptcp)
    b = Subflow(0, TUPLE.reversed(), params, isn=isn_b, mptcp=mptcp)
    (syn,) = segments(a.connect(now=0))
    (synack,) = segments(b.accept(syn, now=0))
    (ack,) = segments(a.on_segment(synack, 10_000_000))
    b.on_segment(ack, 10_000_000)
    return a, b


class Harness:
    """Delivers segments between two sans-IO connections with zero delay.

    ``drop`` may reject segments (returns True to discard).  Connection-level
    timers are ignored; tests that need them call ``on_timer`` themselves.
    """

    def __init__(self, client, server_factory, *, token: int = 0xC0FFEE, drop=None):
        self.client = client
        self.server = None
        self.server_factory = server_factory
        self.token = token
        self.drop = drop or (lambda seg: False)
        self.queue: deque = deque()
        self.effects = {"client": [], "server": []}
        self.now = 0

    def _side_of(self, seg):
        for name, conn in (("client", self.client), ("server", self.server)):
            if conn is None:
                continue
            for sf in conn.subflows:
                if sf.tuple == seg.tuple.reversed():
                    return name, conn, sf.id
        return None

    def feed(self, who: str, fx) -> None:
        self.effects[who].extend(fx)
        for seg in segments(fx):
            if not self.drop(seg):
                self.queue.append(seg)

    def run(self, limit: int = 100_000) -> None:
        while self.queue and limit:
            limit -= 1
            seg = self.queue.popleft()
            hit = self._side_of(seg)
            if hit is not None:
                name, conn, sf_id = hit
                self.feed(name, conn.on_segment(sf_id, seg, self.now))
            elif seg.has(Flags.SYN) and not seg.has(Flags.ACK):
                if seg.option(MpJoin) is not None:
                    fx = self.server.accept_join(seg, self.now)
                    if fx is not None:
                        self.feed("server", fx)
                else:
                    self.server = self.server_factory()
                    if self.server.mptcp:
                        self.feed("server", self.server.accept(seg, self.token, self.now))
                    else:
                        self.feed("server", self.server.accept(seg, self.now))


def mptcp_pair(client_addrs=(A1,), server_addrs=(B1,), params: ConnParams | None = None,
               drop=None) -> Harness:
    params = params or ConnParams()
    client = MptcpConnection(list(client_addrs), Role.INITIATOR, params)
    h = Harness(client, lambda: MptcpConnection(list(server_addrs), Role.LISTENER_CHILD, params),
                drop=drop)
    h.feed("client", client.connect(FourTuple(client_addrs[0], 49152, server_addrs[0], 80)))
    h.run()
    return h


def tcp_pair(params: ConnParams | None = None) -> Harness:
    params = params or ConnParams()
    client = TcpConnection([A1], Role.INITIATOR, params)
    h = Harness(client, lambda: TcpConnection([B1], Role.LISTENER_CHILD, params))
    h.feed("client", client.connect(TUPLE))
    h.run()
    return h


@pytest.fixture
def params() -> TcpParams:
    return TcpParams()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.removeprefix("AC"))):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def acceptance_log() -> dict:
    return ACCEPTANCE
