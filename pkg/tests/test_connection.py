import pytest

from conftest import A1, A2, B1, B2, TUPLE, Harness, mptcp_pair, of_type, segments, tcp_pair
from mptcpsim.connection import ConnParams, Listener, MptcpConnection, Role, TcpConnection
from mptcpsim.effects import (
    AppDataFin, AppDeliver, ConnectionDeallocated, Established, SubflowAdded, SubflowClosed,
)
from mptcpsim.errors import AlreadyConnected, ConnectionClosing, InvalidState, ProtocolViolation
from mptcpsim.subflow import DssMapping, TcpParams, TcpState
from mptcpsim.wire import AddAddr, Dss, Flags, FourTuple, MpCapable, MpJoin, Segment

MSS = 536


def delivered(h, who="server"):
    return [(e.dsn, e.length) for e in of_type(h.effects[who], AppDeliver)]


def finish_time_wait(conn, now=10**10):
    for sf in conn.subflows:
        if sf.state is TcpState.TIME_WAIT:
            conn.on_timer("rtx", sf.id, now)


def test_connect_sends_mp_capable_without_token():
    c = MptcpConnection([A1])
    fx = c.connect(TUPLE)
    assert isinstance(fx[0], SubflowAdded)
    (syn,) = segments(fx)
    assert syn.option(MpCapable) == MpCapable(None)
    with pytest.raises(AlreadyConnected):
        c.connect(TUPLE)


def test_connect_from_foreign_address_rejected():
    with pytest.raises(ValueError):
        MptcpConnection([A2]).connect(TUPLE)


def test_master_handshake_shares_token():
    h = mptcp_pair()
    assert h.client.token == h.server.token == h.token
    assert h.client.established and h.server.established
    assert of_type(h.effects["client"], Established) and of_type(h.effects["server"], Established)


def test_syn_ack_without_token_is_a_protocol_violation():
    c = MptcpConnection([A1])
    c.connect(TUPLE)
    synack = Segment(TUPLE.reversed(), Flags.SYN | Flags.ACK, 0, 1)
    with pytest.raises(ProtocolViolation):
        c.on_segment(0, synack, 0)


def test_add_addr_leads_to_join():
    h = mptcp_pair((A1, A2), (B1, B2))
    assert len(h.client.subflows) == len(h.server.subflows) == 2
    join = h.client.subflows[1]
    assert (join.tuple.src_addr, join.tuple.dst_addr) == (A2, B2)
    assert join.state is TcpState.ESTABLISHED
    syns = [s for s in segments(h.effects["client"]) if s.option(MpJoin)]
    assert [s.option(MpJoin) for s in syns] == [MpJoin(h.token, 2)]
    assert h.client.remote_addrs == {2: B2}
    assert h.server.remote_addrs == {2: A2}


def test_listener_child_never_opens_joins():
    h = mptcp_pair((A1, A2), (B1,))
    assert len(h.client.subflows) == 1
    assert h.server.remote_addrs == {2: A2}


def test_add_addr_conflict_and_repeat():
    h = mptcp_pair((A1, A2), (B1, B2))
    assert h.client.on_add_addr(AddAddr(2, B2)) == []
    with pytest.raises(ProtocolViolation):
        h.client.on_add_addr(AddAddr(2, B1))


def test_join_refusals():
    h = mptcp_pair()
    t = FourTuple(A2, 50000, B2, 80)
    assert h.server.accept_join(Segment(t, Flags.SYN, options=(MpJoin(h.token + 1, 2),))) is None
    full = mptcp_pair(params=ConnParams(max_subflows=1))
    assert full.server.accept_join(Segment(t, Flags.SYN, options=(MpJoin(full.token, 2),))) is None


def test_send_1072_makes_two_mappings():
    h = mptcp_pair(params=ConnParams(tcp=TcpParams(initial_cwnd_segments=2)))
    fx = h.client.send(2 * MSS)
    dss = [s.option(Dss) for s in segments(fx)]
    assert [(d.dsn, d.data_len) for d in dss] == [(0, MSS), (MSS, MSS)]


def test_round_robin_follows_cursor():
    h = mptcp_pair((A1, A2), (B1, B2))
    c = h.client
    assert c.scheduler_cursor == 0
    placed = {s.option(Dss).dsn: s.tuple.src_addr for s in segments(c.send(2 * MSS))}
    assert placed == {0: A1, MSS: A2}
    c2 = mptcp_pair((A1, A2), (B1, B2)).client
    c2.scheduler_cursor = 1
    placed = {s.option(Dss).dsn: s.tuple.src_addr for s in segments(c2.send(2 * MSS))}
    assert placed == {0: A2, MSS: A1}


def test_bulk_transfer_over_two_subflows():
    h = mptcp_pair((A1, A2), (B1, B2))
    h.feed("client", h.client.send(50_000))
    h.run()
    got = delivered(h)
    assert sum(n for _, n in got) == 50_000
    pos = 0
    for dsn, n in got:
        assert dsn == pos
        pos += n
    assert h.client.data_acked == 50_000 and h.client.all_data_acked
    assert all(sf.stats.bytes_sent > 0 for sf in h.client.subflows)


def test_established_segments_carry_data_ack():
    h = mptcp_pair((A1, A2), (B1, B2))
    h.feed("client", h.client.send(10_000))
    h.run()
    for who in ("client", "server"):
        for s in segments(h.effects[who]):
            if s.has(Flags.SYN) or s.has(Flags.RST):
                continue
            assert s.option(Dss) is not None and s.option(Dss).data_ack is not None


def test_connection_level_reordering():
    c = MptcpConnection([B1], Role.LISTENER_CHILD)
    fx = c.on_mapping_delivered(DssMapping(MSS, 1, MSS, 1))
    assert not of_type(fx, AppDeliver) and c.rcv_nxt_dsn == 0
    fx = c.on_mapping_delivered(DssMapping(0, 1, MSS, 0))
    assert [(e.dsn, e.length) for e in of_type(fx, AppDeliver)] == [(0, 2 * MSS)]
    assert not of_type(c.on_mapping_delivered(DssMapping(0, 1, MSS, 1)), AppDeliver)


def test_overlapping_mappings_rejected():
    c = MptcpConnection([B1], Role.LISTENER_CHILD)
    c.on_mapping_delivered(DssMapping(1000, 1, 500, 0))
    with pytest.raises(ProtocolViolation):
        c.on_mapping_delivered(DssMapping(1200, 1, 500, 1))
    with pytest.raises(ProtocolViolation):
        c.on_mapping_delivered(DssMapping(900, 1, 200, 1))
    c.on_mapping_delivered(DssMapping(0, 1, 800, 0))
    with pytest.raises(ProtocolViolation):
        c.on_mapping_delivered(DssMapping(700, 1, 200, 0))


def test_graceful_close_deallocates_after_all_subflows():
    h = mptcp_pair((A1, A2), (B1, B2))
    h.feed("client", h.client.send(20_000))
    h.run()
    h.feed("client", h.client.close())
    h.run()
    assert of_type(h.effects["server"], AppDataFin)
    h.feed("server", h.server.close())
    h.run()
    finish_time_wait(h.client)
    finish_time_wait(h.server)
    for conn in (h.client, h.server):
        assert conn.deallocated
        assert all(sf.state is TcpState.CLOSED for sf in conn.subflows)
    deallocs = of_type(h.effects["server"], ConnectionDeallocated)
    assert len(deallocs) == 1
    fx = h.effects["server"]
    assert fx.index(deallocs[0]) > max(i for i, e in enumerate(fx) if isinstance(e, SubflowClosed))
    with pytest.raises(ConnectionClosing):
        h.client.send(1)


def test_tcp_connection_transfer_and_close():
    h = tcp_pair()
    h.feed("client", h.client.send(5000))
    h.run()
    assert sum(n for _, n in delivered(h)) == 5000
    h.feed("client", h.client.close())
    h.run()
    assert of_type(h.effects["server"], AppDataFin)
    h.feed("server", h.server.close())
    h.run()
    finish_time_wait(h.client)
    assert h.client.deallocated and h.server.deallocated
    assert all(not s.options for s in segments(h.effects["client"]))


def test_listener_forks_by_syn_kind():
    lst = Listener(B1, 80, [B1])
    mp = lst.fork(Segment(TUPLE, Flags.SYN, options=(MpCapable(),)))
    plain = lst.fork(Segment(TUPLE, Flags.SYN))
    assert isinstance(mp, MptcpConnection) and isinstance(plain, TcpConnection)
    assert plain.role is Role.LISTENER_CHILD
    with pytest.raises(InvalidState):
        lst.fork(Segment(TUPLE, Flags.ACK, 1, 1))


def test_abort_deallocates():
    h = mptcp_pair((A1, A2), (B1, B2))
    fx = h.client.abort()
    assert len(of_type(fx, SubflowClosed)) == 2 and of_type(fx, ConnectionDeallocated)


def test_send_validation():
    c = MptcpConnection([A1])
    with pytest.raises(ValueError):
        c.send(-1)
    assert c.send(0) == []
    assert c.send(100) == [] and c.snd_buf == 100
