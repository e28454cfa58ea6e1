"""Scenario configuration, built-in experiments, runner and trace output."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Union

from .connection import ConnParams
from .host import BulkSender, LogEvent, Network, Sink, TraceRecord
from .netsim import NS_PER_S, to_ns
from .subflow import TcpParams
from .wire import MAX_PAYLOAD, addr_to_int, int_to_addr

SERVER_PORT = 80
MIN_MSS = 64
MODES = {"mptcp": "mptcp", "tcp": "tcp", "single-path-tcp": "tcp"}


class InvalidConfig(ValueError):
    """A scenario config failed validation; ``errors`` lists (field, message)."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{f}: {m}" for f, m in errors))


@dataclass
class NodeConfig:
    id: str
    addresses: list[str]


@dataclass
class LinkConfig:
    nodes: tuple[str, str]
    bandwidth: float = 1e6  # bits/s
    delay: float = 0.010  # seconds, one way
    queue_cap: int = 100  # packets
    # A list applies to the forward direction (nodes[0] -> nodes[1]);
    # {"forward": [...], "reverse": [...]} sets each direction.
    drop_script: Union[list[int], dict[str, list[int]]] = field(default_factory=list)
    loss_rate: float = 0.0
    # Endpoint addresses; by default each end takes its node's next unused address.
    addresses: Optional[tuple[str, str]] = None


@dataclass
class TransferConfig:
    src: str
    dst: str
    bytes: Optional[int] = None
    duration: Optional[float] = None
    start: float = 0.0


@dataclass
class ScenarioConfig:
    name: str
    nodes: list[NodeConfig]
    links: list[LinkConfig]
    transfers: list[TransferConfig]
    mss: int = 536
    mode: str = "mptcp"
    seed: int = 0
    sim_duration: float = 60.0

    def validate(self) -> None:
        errs: list[tuple[str, str]] = []
        if not self.name or not str(self.name).replace("-", "_").isidentifier():
            errs.append(("name", f"not an identifier: {self.name!r}"))
        if not MIN_MSS <= self.mss <= MAX_PAYLOAD:
            errs.append(("mss", f"must be in [{MIN_MSS}, {MAX_PAYLOAD}], got {self.mss}"))
        if self.mode not in MODES:
            errs.append(("mode", f"must be one of {sorted(MODES)}, got {self.mode!r}"))
        if not 0 <= self.seed < 2 ** 64:
            errs.append(("seed", "must be a 64-bit unsigned integer"))
        if self.sim_duration <= 0:
            errs.append(("sim_duration", "must be positive"))
        ids: dict[str, NodeConfig] = {}
        seen_addrs: set[int] = set()
        if not self.nodes:
            errs.append(("nodes", "at least one node is required"))
        for i, n in enumerate(self.nodes):
            if n.id in ids:
                errs.append((f"nodes[{i}].id", f"duplicate node id {n.id!r}"))
            ids[n.id] = n
            if not n.addresses:
                errs.append((f"nodes[{i}].addresses", "at least one address is required"))
            for j, a in enumerate(n.addresses):
                try:
                    v = addr_to_int(a)
                except ValueError:
                    errs.append((f"nodes[{i}].addresses[{j}]", f"not an IPv4 address: {a!r}"))
                    continue
                if v in seen_addrs:
                    errs.append((f"nodes[{i}].addresses[{j}]", f"address {a} used twice"))
                seen_addrs.add(v)
        for i, ln in enumerate(self.links):
            f = f"links[{i}]"
            if len(ln.nodes) != 2:
                errs.append((f"{f}.nodes", "must name exactly two nodes"))
            else:
                for n in ln.nodes:
                    if n not in ids:
                        errs.append((f"{f}.nodes", f"unknown node {n!r}"))
                if ln.nodes[0] == ln.nodes[1]:
                    errs.append((f"{f}.nodes", "a link needs two distinct nodes"))
            if ln.bandwidth <= 0:
                errs.append((f"{f}.bandwidth", "must be positive"))
            if ln.delay < 0:
                errs.append((f"{f}.delay", "must be non-negative"))
            if ln.queue_cap < 0:
                errs.append((f"{f}.queue_cap", "must be non-negative"))
            if not 0 <= ln.loss_rate < 1:
                errs.append((f"{f}.loss_rate", "must be in [0, 1)"))
            try:
                fwd, rev = _split_script(ln.drop_script)
                if any(k < 1 for k in fwd + rev):
                    errs.append((f"{f}.drop_script", "ordinals are 1-based"))
            except (TypeError, ValueError) as exc:
                errs.append((f"{f}.drop_script", str(exc)))
            if ln.addresses is not None and len(ln.nodes) == 2:
                for k, (n, a) in enumerate(zip(ln.nodes, ln.addresses)):
                    if n in ids and a not in ids[n].addresses:
                        errs.append((f"{f}.addresses[{k}]", f"{a} is not an address of {n}"))
        if not self.transfers:
            errs.append(("transfers", "at least one transfer is required"))
        for i, t in enumerate(self.transfers):
            f = f"transfers[{i}]"
            for end in ("src", "dst"):
                if getattr(t, end) not in ids:
                    errs.append((f"{f}.{end}", f"unknown node {getattr(t, end)!r}"))
            if t.src == t.dst:
                errs.append((f, "src and dst must differ"))
            if t.bytes is not None and t.bytes <= 0:
                errs.append((f"{f}.bytes", "must be positive"))
            if t.duration is not None and t.duration <= 0:
                errs.append((f"{f}.duration", "must be positive"))
            if t.bytes is not None and t.duration is not None:
                errs.append((f, "give bytes or duration, not both"))
            if t.start < 0:
                errs.append((f"{f}.start", "must be non-negative"))
        if errs:
            raise InvalidConfig(errs)

    def to_dict(self) -> dict:
        return asdict(self)


def _split_script(script) -> tuple[list[int], list[int]]:
    if isinstance(script, dict):
        extra = set(script) - {"forward", "reverse"}
        if extra:
            raise ValueError(f"unknown keys {sorted(extra)}")
        return [int(x) for x in script.get("forward", [])], [int(x) for x in script.get("reverse", [])]
    return [int(x) for x in script], []


# --- loading -----------------------------------------------------------------

_TOP_FIELDS = {"name", "nodes", "links", "transfers", "mss", "mode", "seed", "sim_duration"}


def _build(cls, raw: Any, where: str, errs: list):
    if not isinstance(raw, dict):
        errs.append((where, f"expected an object, got {type(raw).__name__}"))
        return None
    known = set(cls.__dataclass_fields__)
    for k in sorted(set(raw) - known):
        errs.append((f"{where}.{k}", "unknown field"))
    try:
        obj = cls(**{k: v for k, v in raw.items() if k in known})
    except TypeError as exc:
        errs.append((where, str(exc)))
        return None
    if cls is LinkConfig:
        obj.nodes = tuple(obj.nodes)
        if obj.addresses is not None:
            obj.addresses = tuple(obj.addresses)
    return obj


def config_from_dict(raw: Any, base: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    """Parse a JSON-shaped dict.  Fields missing from ``raw`` come from ``base``."""
    errs: list[tuple[str, str]] = []
    if not isinstance(raw, dict):
        raise InvalidConfig([("<root>", "expected a JSON object")])
    for k in sorted(set(raw) - _TOP_FIELDS):
        errs.append((k, "unknown field"))
    merged = base.to_dict() if base is not None else {}
    merged.update({k: v for k, v in raw.items() if k in _TOP_FIELDS})
    for req in ("name", "nodes", "links", "transfers"):
        if req not in merged:
            errs.append((req, "required"))
    if errs:
        raise InvalidConfig(errs)
    lists = {}
    for key, cls in (("nodes", NodeConfig), ("links", LinkConfig), ("transfers", TransferConfig)):
        items = merged[key]
        if not isinstance(items, list):
            errs.append((key, "expected a list"))
            continue
        lists[key] = [_build(cls, item, f"{key}[{i}]", errs) for i, item in enumerate(items)]
    scalars = {k: merged[k] for k in ("mss", "mode", "seed", "sim_duration") if k in merged}
    for k, typ in (("mss", int), ("seed", int), ("sim_duration", (int, float)), ("mode", str)):
        if k in scalars and (not isinstance(scalars[k], typ) or isinstance(scalars[k], bool)):
            errs.append((k, f"wrong type {type(scalars[k]).__name__}"))
    if errs:
        raise InvalidConfig(errs)
    cfg = ScenarioConfig(name=merged["name"], **lists, **scalars)
    cfg.validate()
    return cfg


def load_config(source: str) -> ScenarioConfig:
    """A built-in scenario name, or a path to a JSON file.

    A JSON file whose ``name`` matches a built-in only needs the fields it overrides.
    """
    if source in BUILTINS and not source.endswith(".json"):
        cfg = builtin(source)
        cfg.validate()
        return cfg
    path = Path(source)
    if not path.is_file():
        raise InvalidConfig([("scenario", f"no built-in scenario or file named {source!r}")])
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidConfig([("scenario", f"invalid JSON: {exc}")]) from None
    base = builtin(raw["name"]) if isinstance(raw, dict) and raw.get("name") in BUILTINS else None
    return config_from_dict(raw, base)


# --- built-in scenarios ------------------------------------------------------


def _fig1a() -> ScenarioConfig:
    return ScenarioConfig(
        name="fig1a",
        nodes=[NodeConfig("client", ["10.0.1.1"]), NodeConfig("server", ["10.0.1.2"])],
        links=[LinkConfig(("client", "server"))],
        transfers=[TransferConfig("client", "server", duration=30.0)],
        sim_duration=40.0,
    )


def _fig1b() -> ScenarioConfig:
    return ScenarioConfig(
        name="fig1b",
        nodes=[NodeConfig("client", ["10.0.1.1", "10.0.2.1"]),
               NodeConfig("server", ["10.0.1.2", "10.0.2.2"])],
        links=[LinkConfig(("client", "server")), LinkConfig(("client", "server"))],
        transfers=[TransferConfig("client", "server", duration=30.0)],
        sim_duration=40.0,
    )


def _fig1c() -> ScenarioConfig:
    return ScenarioConfig(
        name="fig1c",
        nodes=[NodeConfig("client", ["10.0.1.1"]), NodeConfig("server", ["10.0.1.2"])],
        links=[LinkConfig(("client", "server"), drop_script=[17, 28])],
        transfers=[TransferConfig("client", "server", bytes=100 * 536)],
        sim_duration=20.0,
    )


BUILTINS = {"fig1a": _fig1a, "fig1b": _fig1b, "fig1c": _fig1c}

DESCRIPTIONS = {
    "fig1a": "one subflow over one link; slow start then sawtooth",
    "fig1b": "two subflows over two disjoint links",
    "fig1c": "one subflow, two scripted data drops inside one window",
}


def builtin(name: str) -> ScenarioConfig:
    return BUILTINS[name]()


# --- running -----------------------------------------------------------------


@dataclass
class TransferResult:
    index: int
    sender: Any
    sender_app: BulkSender
    receiver: Any = None
    sink: Optional[Sink] = None


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    records: list[TraceRecord]
    summary: dict
    log: list[LogEvent]
    network: Network
    transfers: list[TransferResult]


def build_network(cfg: ScenarioConfig) -> Network:
    tcp = TcpParams(mss=cfg.mss)
    net = Network(seed=cfg.seed, params=ConnParams(tcp=tcp))
    for n in cfg.nodes:
        net.add_node(n.id, n.addresses)
    used: dict[str, int] = {n.id: 0 for n in cfg.nodes}
    by_id = {n.id: n for n in cfg.nodes}
    for i, ln in enumerate(cfg.links):
        if ln.addresses is not None:
            a_addr, b_addr = ln.addresses
        else:
            ends = []
            for nid in ln.nodes:
                addrs = by_id[nid].addresses
                if used[nid] >= len(addrs):
                    raise InvalidConfig([(f"links[{i}].nodes", f"node {nid!r} has no free address")])
                ends.append(addrs[used[nid]])
                used[nid] += 1
            a_addr, b_addr = ends
        net.add_link(a_addr, b_addr, ln.bandwidth, to_ns(ln.delay), ln.queue_cap,
                     drop_script=_split_script(ln.drop_script), loss_rate=ln.loss_rate,
                     name=f"link{i}")
    return net


def run_scenario(cfg: ScenarioConfig, on_network=None) -> ScenarioResult:
    """Run ``cfg`` to completion or ``sim_duration``.

    ``on_network(net)`` is called after the topology is built and before any
    event runs, so callers can attach link taps.
    """
    cfg.validate()
    mode = MODES[cfg.mode]
    net = build_network(cfg)
    if on_network is not None:
        on_network(net)
    listening: set[str] = set()
    results: list[TransferResult] = []
    for i, t in enumerate(cfg.transfers):
        dst = net.nodes[t.dst]
        if t.dst not in listening:
            dst.listen(SERVER_PORT, mptcp=True)
            listening.add(t.dst)
        app = BulkSender(t.bytes)
        res = TransferResult(i, None, app)
        results.append(res)
        net.engine.schedule_at(to_ns(t.start), _start_transfer, net, t, res, mode)
        if t.bytes is None and t.duration is not None:
            net.engine.schedule_at(to_ns(t.start + t.duration), _stop_transfer, net, t, res)
    net.run(until=to_ns(cfg.sim_duration))
    for res in results:
        _match_receiver(net, cfg.transfers[res.index], res)
    records = net.records()
    summary = summarize(cfg, net, results)
    return ScenarioResult(cfg, records, summary, net.log, net, results)


def _start_transfer(net: Network, t: TransferConfig, res: TransferResult, mode: str) -> None:
    dst = net.nodes[t.dst]
    res.sender = net.nodes[t.src].open(dst.addrs[0], SERVER_PORT, res.sender_app, mode=mode)


def _stop_transfer(net: Network, t: TransferConfig, res: TransferResult) -> None:
    res.sender_app.stop()
    if res.sender is not None and not res.sender.deallocated:
        net.nodes[t.src].apply(res.sender, [])


def _match_receiver(net: Network, t: TransferConfig, res: TransferResult) -> None:
    if res.sender is None or not res.sender.subflows:
        return
    want = res.sender.subflows[0].tuple.reversed()
    node = net.nodes[t.dst]
    for conn in node.conns:
        if conn.subflows and conn.subflows[0].tuple == want:
            res.receiver = conn
            res.sink = node.apps[id(conn)]
            return


def summarize(cfg: ScenarioConfig, net: Network, results: list[TransferResult]) -> dict:
    transfers = []
    for res in results:
        t = cfg.transfers[res.index]
        s, sink = res.sender, res.sink
        delivered = sink.received if sink else 0
        requested = t.bytes if t.bytes is not None else res.sender_app.written
        rx_by_tuple = {}
        if res.receiver is not None:
            rx_by_tuple = {sf.tuple.reversed(): sf.stats.bytes_received for sf in res.receiver.subflows}
        subflows = []
        for sf in (s.subflows if s else []):
            subflows.append({
                "subflow_id": sf.id,
                "local": f"{int_to_addr(sf.tuple.src_addr)}:{sf.tuple.src_port}",
                "remote": f"{int_to_addr(sf.tuple.dst_addr)}:{sf.tuple.dst_port}",
                "bytes_sent": sf.stats.bytes_sent,
                "bytes_delivered": rx_by_tuple.get(sf.tuple, 0),
                "retransmissions": sf.stats.retransmissions,
                "timeouts": sf.stats.timeouts,
                "halvings": sf.stats.halvings,
            })
        completed = bool(sink and sink.fin_at is not None and delivered == requested)
        done_at = sink.last_byte_at if sink else None
        transfers.append({
            "src": t.src,
            "dst": t.dst,
            "conn_token": (s.token or 0) if s else 0,
            "bytes_requested": requested,
            "bytes_delivered": delivered,
            "completed": completed,
            "completion_time": round(done_at / NS_PER_S, 9) if completed and done_at is not None else None,
            "integrity_ok": bool(sink and sink.verify(requested if completed else None)),
            "retransmissions": sum(x["retransmissions"] for x in subflows),
            "timeouts": sum(x["timeouts"] for x in subflows),
            "halvings": sum(x["halvings"] for x in subflows),
            "subflows": subflows,
        })
    return {
        "name": cfg.name,
        "mode": MODES[cfg.mode],
        "seed": cfg.seed,
        "mss": cfg.mss,
        "sim_time": round(net.engine.now / NS_PER_S, 9),
        "events": net.engine.executed,
        "bytes_delivered": sum(x["bytes_delivered"] for x in transfers),
        "transfers": transfers,
        "links": [{"name": ln.name, "forward": asdict(ln.dirs[0].stats), "reverse": asdict(ln.dirs[1].stats)}
                  for ln in net.links],
    }


# --- output ------------------------------------------------------------------

CSV_HEADER = ("time", "conn_token", "subflow_id", "metric", "value")


def format_time(ns: int) -> str:
    return f"{ns // NS_PER_S}.{ns % NS_PER_S:09d}"


def write_trace_csv(records: Iterable[TraceRecord], out: Optional[io.TextIOBase] = None) -> bytes:
    """Render records as CSV.  Writes to ``out`` when given; always returns the bytes.

    Times and RTO values are seconds with nine decimals (exact nanoseconds).
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        value = format_time(r.value) if r.metric == "rto" else r.value
        w.writerow((format_time(r.time), r.conn_token, r.subflow_id, r.metric, value))
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text.encode("ascii")


def read_trace_csv(path: Union[str, Path]) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_plot_script(trace_path: Union[str, Path], subflow_ids: Optional[list[int]] = None,
                     output: Optional[str] = None) -> str:
    """A gnuplot script drawing cwnd against time, one series per subflow.

    Subflow ids are read from the trace when it exists; the script itself
    checks for the file and exits with a message if it is missing.
    """
    trace_path = str(trace_path)
    if subflow_ids is None:
        subflow_ids = [0]
        p = Path(trace_path)
        if p.is_file():
            ids = sorted({int(r["subflow_id"]) for r in read_trace_csv(p) if r["metric"] == "cwnd"})
            subflow_ids = ids or subflow_ids
    output = output or (trace_path.rsplit(".trace.csv", 1)[0] + ".cwnd.png")
    quoted = trace_path.replace("'", "'\\''")
    series = ", \\\n     ".join(
        f"file using 1:((strcol(4) eq \"cwnd\" && $3 == {i}) ? $5 : NaN) "
        f"with steps title \"subflow {i}\"" for i in subflow_ids)
    return (
        f"# cwnd over time from {Path(trace_path).name}\n"
        f"file = '{trace_path}'\n"
        f"if (system(\"test -r '{quoted}' && echo 1 || echo 0\") + 0 == 0) {{\n"
        f"    print \"trace file not found: \".file\n"
        f"    exit\n"
        f"}}\n"
        f"set datafile separator \",\"\n"
        f"set terminal pngcairo size 900,500\n"
        f"set output '{output}'\n"
        f"set xlabel \"time (s)\"\n"
        f"set ylabel \"cwnd (bytes)\"\n"
        f"set grid\n"
        f"plot {series}\n"
    )


def write_outputs(result: ScenarioResult, out_dir: Union[str, Path], plot: bool = False) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = result.config.name
    paths = {"trace": out / f"{name}.trace.csv", "summary": out / f"{name}.summary.json"}
    paths["trace"].write_bytes(write_trace_csv(result.records))
    paths["summary"].write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    if plot:
        paths["plot"] = out / f"{name}.plot.gp"
        paths["plot"].write_text(emit_plot_script(paths["trace"]))
    return paths
