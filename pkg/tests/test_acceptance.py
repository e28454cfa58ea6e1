"""Acceptance criteria AC1-AC9.  Each test records a PASS/FAIL line that the
terminal summary prints at the end of the run."""

from __future__ import annotations

import hashlib
import random
import time
from collections import Counter
from contextlib import contextmanager

from hypothesis import given, settings

from oracles import slow_start_rounds, stream_digest
from strategies import segments
from mptcpsim.demux import EndpointTable
from mptcpsim.host import BulkSender, Network
from mptcpsim.scenario import builtin, run_scenario, write_trace_csv
from mptcpsim.subflow import TcpState
from mptcpsim.wire import Flags, FourTuple, MpJoin, Segment, addr_to_int, decode_segment, encode_segment

MSS = 536
NS = 1_000_000_000


@contextmanager
def criterion(log, key):
    note = {"detail": ""}
    try:
        yield note
    except BaseException:
        log[key] = (False, note["detail"])
        raise
    log[key] = (True, note["detail"])


def cwnd_series(records):
    return [(r.time, r.value) for r in records if r.metric == "cwnd"]


# --- AC1 -------------------------------------------------------------------------


def test_ac1_single_subflow_equivalence(acceptance_log):
    with criterion(acceptance_log, "AC1") as note:
        t0 = time.perf_counter()
        runs = {}
        for mode in ("mptcp", "tcp"):
            cfg = builtin("fig1a")
            cfg.mode = mode
            runs[mode] = run_scenario(cfg)
        elapsed = time.perf_counter() - t0
        a, b = cwnd_series(runs["mptcp"].records), cwnd_series(runs["tcp"].records)
        note["detail"] = f"{len(a)} cwnd records each, equal={a == b}, {elapsed:.2f} s"
        assert len(runs["mptcp"].network.nodes["client"].conns[0].subflows) == 1
        assert len(a) > 100
        assert a == b
        assert elapsed < 5


# --- AC2 -------------------------------------------------------------------------


def measure_rounds():
    """cwnd at the start of each RTT round up to the first drop.

    A round ends when an ACK covers the highest sequence sent when the round
    began; the marker for the next round is taken once every event at that
    instant (including the sends the ACK triggered) has run.
    """
    events = []

    def hook(net):
        def tap(now, link, direction, kind, seg, detail):
            if kind == "drop":
                events.append(("drop", now, 0))
            elif kind == "tx" and direction == 0 and seg.payload_len:
                events.append(("tx", now, seg.ssn + seg.payload_len))
            elif kind == "rx" and direction == 1 and seg.has(Flags.ACK):
                events.append(("ack", now, seg.ack_ssn))
        net.links[0].taps.append(tap)

    res = run_scenario(builtin("fig1a"), hook)
    cw = cwnd_series(res.records)

    def cwnd_at(t):
        return [v for tt, v in cw if tt <= t][-1]

    snd_max, marker, pending, rounds = 0, None, None, []
    for kind, t, v in events:
        if pending is not None and t > pending:
            marker, pending = snd_max, None
        if kind == "drop":
            break
        if kind == "tx":
            snd_max = max(snd_max, v)
            if marker is None and pending is None:
                marker = snd_max
                rounds.append(cwnd_at(t))
        elif pending is None and marker is not None and v >= marker:
            rounds.append(cwnd_at(t))
            pending = t
    return rounds


def test_ac2_slow_start_doubling(acceptance_log):
    with criterion(acceptance_log, "AC2") as note:
        rounds = measure_rounds()
        expected = slow_start_rounds(MSS, 1, 64 * 1024, len(rounds))
        note["detail"] = f"measured {[r // MSS for r in rounds]} x MSS"
        assert len(rounds) >= 6
        assert rounds == expected


# --- AC3 -------------------------------------------------------------------------


def test_ac3_two_drops_one_recovery(acceptance_log):
    with criterion(acceptance_log, "AC3") as note:
        t0 = time.perf_counter()
        res = run_scenario(builtin("fig1c"))
        elapsed = time.perf_counter() - t0
        t = res.summary["transfers"][0]
        note["detail"] = (f"halvings={t['halvings']} timeouts={t['timeouts']} "
                          f"retransmissions={t['retransmissions']} completed={t['completed']}, "
                          f"{elapsed:.2f} s")
        # both scripted ordinals fall in the same slow-start round
        bounds, start = [], 1
        for w in slow_start_rounds(1, 1, 1 << 20, 10):
            bounds.append(range(start, start + w))
            start += w
        assert [i for i, r in enumerate(bounds) if 17 in r] == [i for i, r in enumerate(bounds) if 28 in r]
        assert (t["halvings"], t["timeouts"], t["retransmissions"]) == (1, 0, 2)
        assert t["completed"] and t["integrity_ok"]
        states = Counter(r.value for r in res.records if r.metric == "state")
        assert states["FAST_RECOVERY"] == 1 and states["RECOVERED"] == 1
        assert elapsed < 5


# --- AC4 -------------------------------------------------------------------------


def test_ac4_two_subflow_aggregation(acceptance_log):
    with criterion(acceptance_log, "AC4") as note:
        first_arrivals = []

        def hook(net):
            for i, link in enumerate(net.links):
                seen = set()

                def tap(now, l, direction, kind, seg, detail, seen=seen, i=i):
                    if kind == "rx" and direction == 0 and seg.payload_len and seg.ssn not in seen:
                        seen.add(seg.ssn)
                        first_arrivals.append((now, i, seg.payload_len))
                link.taps.append(tap)

        t0 = time.perf_counter()
        res = run_scenario(builtin("fig1b"), hook)
        elapsed = time.perf_counter() - t0
        lo, hi = 5 * NS, 30 * NS
        delivered = [r for r in res.records if r.metric == "delivered_bytes" and r.subflow_id == -1]

        def app_bytes_at(t):
            return max([r.value for r in delivered if r.time <= t], default=0)

        window = (hi - lo) / NS
        app_goodput = (app_bytes_at(hi) - app_bytes_at(lo)) * 8 / window
        arrival = Counter()
        for now, i, n in first_arrivals:
            if lo < now <= hi:
                arrival[i] += n
        arrival_goodput = sum(arrival.values()) * 8 / window
        per_sf = [sf["bytes_delivered"] for sf in res.summary["transfers"][0]["subflows"]]
        shares = [x / sum(per_sf) for x in per_sf]
        note["detail"] = (f"in-order {app_goodput / 2e6:.1%}, first-arrival {arrival_goodput / 2e6:.1%} "
                          f"of 2 Mbps; shares {[f'{s:.1%}' for s in shares]}; {elapsed:.2f} s")
        assert len(per_sf) == 2
        assert app_goodput >= 0.85 * 2e6
        assert arrival_goodput >= 0.85 * 2e6
        assert all(s >= 0.30 for s in shares)
        assert elapsed < 10


# --- AC5 -------------------------------------------------------------------------


def loss_trial(i: int):
    rng = random.Random(i)
    cfg = builtin("fig1b")
    cfg.name, cfg.seed, cfg.sim_duration = f"loss{i}", i, 600.0
    for link in cfg.links:
        link.loss_rate = rng.uniform(0.0, 0.05)
    cfg.transfers[0].duration = None
    cfg.transfers[0].bytes = rng.randint(50_000, 300_000)
    return cfg, run_scenario(cfg)


def test_ac5_integrity_under_random_loss(acceptance_log):
    with criterion(acceptance_log, "AC5") as note:
        failures, drops = [], 0
        for i in range(50):
            cfg, res = loss_trial(i)
            want = cfg.transfers[0].bytes
            t = res.summary["transfers"][0]
            sink = res.transfers[0].sink
            drops += sum(l["forward"]["dropped_random"] for l in res.summary["links"])
            ok = (t["completed"] and t["bytes_delivered"] == want and not sink.violations
                  and sink._hash.hexdigest() == stream_digest(want))
            if not ok:
                failures.append(i)
        note["detail"] = f"50 trials, {drops} random drops, violations in {failures or 'none'}"
        assert drops > 0
        assert failures == []


# --- AC6 -------------------------------------------------------------------------


def check_teardown(res) -> int:
    """Check dealloc ordering per connection; return how many RSTs stale tuples drew."""
    per_conn: dict = {}
    for idx, e in enumerate(res.log):
        per_conn.setdefault((e.node, e.conn_id), []).append((idx, e.kind))
    for key, events in per_conn.items():
        deallocs = [i for i, k in events if k == "deallocated"]
        closes = [i for i, k in events if k == "subflow_closed"]
        assert len(deallocs) == 1, key
        assert closes and deallocs[0] > max(closes), key
    for node in res.network.nodes.values():
        for conn in node.conns:
            assert conn.deallocated
            assert all(sf.state is TcpState.CLOSED for sf in conn.subflows)
    rsts = 0
    for name, node in res.network.nodes.items():
        for conn in node.conns:
            for sf in conn.subflows:
                inbound = sf.tuple.reversed()
                before = node.rst_sent
                node.receive(Segment(inbound, Flags.ACK, 1, 1))
                assert node.rst_sent == before + 1
                rsts += 1
    return rsts


def test_ac6_teardown_gating(acceptance_log):
    with criterion(acceptance_log, "AC6") as note:
        checked = []
        for name in ("fig1a", "fig1b", "fig1c"):
            for mode in ("mptcp", "tcp"):
                cfg = builtin(name)
                cfg.mode = mode
                if name != "fig1c":
                    cfg.transfers[0].duration, cfg.sim_duration = 4.0, 10.0
                checked.append(check_teardown(run_scenario(cfg)))
        for i in range(5):
            checked.append(check_teardown(loss_trial(i)[1]))
        note["detail"] = f"{len(checked)} runs, {sum(checked)} stale-tuple probes all reset"


# --- AC7 -------------------------------------------------------------------------


def test_ac7_demux(acceptance_log):
    with criterion(acceptance_log, "AC7") as note:
        cfg = builtin("fig1b")
        cfg.transfers[0].duration, cfg.sim_duration = 2.0, 6.0
        res = run_scenario(cfg)
        server = res.network.nodes["server"]
        child = server.conns[0]
        assert len(child.subflows) == 2 and child.subflows[1].stats.bytes_received > 0

        net = Network(seed=3)
        net.add_node("c", ["10.0.1.1"])
        srv = net.add_node("s", ["10.0.1.2"])
        net.add_link("10.0.1.1", "10.0.1.2", 1e7, 1_000_000)
        srv.listen(80)
        dst = addr_to_int("10.0.1.2")
        net.nodes["c"].open(dst, 80, BulkSender(500_000), mode="mptcp")
        net.nodes["c"].open(dst, 80, BulkSender(500_000), mode="tcp")
        net.run(until=NS // 10)
        live = dict(srv.table.by_token)
        assert len(live) == 1
        assert sorted(type(c).__name__ for c in srv.conns) == ["MptcpConnection", "TcpConnection"]
        bogus = (max(live) + 1) % 2**32
        srv.receive(Segment(FourTuple(addr_to_int("10.0.1.1"), 7, dst, 80), Flags.SYN,
                            options=(MpJoin(bogus, 1),)))
        assert srv.rst_sent == 1
        net.run()
        assert all(srv.apps[id(c)].verify(500_000) for c in srv.conns)

        table = EndpointTable(random.Random("0:server"))
        tokens = [table.allocate_token(i) for i in range(100_000)]
        assert len(set(tokens)) == len(table.by_token) == 100_000
        narrow = random.Random(1)
        crowded = EndpointTable(token_source=lambda: narrow.getrandbits(17))
        ctoks = [crowded.allocate_token(i) for i in range(100_000)]
        assert len(set(ctoks)) == 100_000
        note["detail"] = "join attaches, unknown token reset, TCP+MPTCP coexist, 1e5 tokens unique (x2)"


# --- AC8 -------------------------------------------------------------------------


def test_ac8_determinism(acceptance_log):
    with criterion(acceptance_log, "AC8") as note:
        digests = {}
        for name, mode, seed in (("fig1a", "mptcp", 0), ("fig1b", "mptcp", 7),
                                 ("fig1c", "tcp", 3), ("fig1c", "mptcp", 11)):
            pair = []
            for _ in range(2):
                cfg = builtin(name)
                cfg.mode, cfg.seed = mode, seed
                if name == "fig1b":
                    for link in cfg.links:
                        link.loss_rate = 0.02
                pair.append(hashlib.sha256(write_trace_csv(run_scenario(cfg).records)).hexdigest())
            assert pair[0] == pair[1], (name, mode)
            digests[(name, mode)] = pair[0][:12]
        note["detail"] = f"{len(digests)} scenarios byte-identical across reruns"


# --- AC9 -------------------------------------------------------------------------

_roundtrips = Counter()


@given(segments())
@settings(max_examples=10_000, deadline=None)
def _roundtrip(seg):
    _roundtrips["run"] += 1
    assert decode_segment(encode_segment(seg)) == seg


def test_ac9_wire_roundtrip(acceptance_log):
    with criterion(acceptance_log, "AC9") as note:
        _roundtrips.clear()
        _roundtrip()
        note["detail"] = f"{_roundtrips['run']} random segments round-tripped"
        assert _roundtrips["run"] >= 10_000
