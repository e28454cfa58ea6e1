"""Segment and MPTCP option data model, plus a canonical binary encoding.

The encoding is this simulator's own format, used for golden fixtures and
trace dumps.  It is *not* TCP-on-the-wire.  Layout, all fields big-endian::

    header   src_addr u32 | src_port u16 | dst_addr u32 | dst_port u16 |
             flags u8 | ssn u32 | ack_ssn u32 | payload_len u16
    option   kind u8 | body_len u8 | body

Option bodies have a fixed size per kind, so the encoded length depends only
on which option variants are present.
"""

from __future__ import annotations

import enum
import ipaddress
import struct
from dataclasses import dataclass
from typing import Optional, Union

U8 = 0xFF
U16 = 0xFFFF
U32 = 0xFFFFFFFF
U64 = 0xFFFFFFFFFFFFFFFF

#: Largest payload any segment may carry (the largest configurable MSS).
MAX_PAYLOAD = 9000


class MalformedSegment(ValueError):
    """Raised when a byte sequence is not the encoding of a valid segment."""


class Flags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    ACK = 0x10

    def __str__(self) -> str:
        names = [f.name for f in (Flags.SYN, Flags.ACK, Flags.FIN, Flags.RST) if self & f]
        return "|".join(names) if names else "NONE"


_ALL_FLAGS = int(Flags.FIN | Flags.SYN | Flags.RST | Flags.ACK)


def _check_range(name: str, value: int, limit: int) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value <= limit:
        raise ValueError(f"{name}={value!r} out of range [0, {limit}]")


def addr_to_int(addr: Union[str, int]) -> int:
    return int(ipaddress.IPv4Address(addr))


def int_to_addr(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


@dataclass(frozen=True, slots=True)
class FourTuple:
    src_addr: int
    src_port: int
    dst_addr: int
    dst_port: int

    def __post_init__(self) -> None:
        _check_range("src_addr", self.src_addr, U32)
        _check_range("src_port", self.src_port, U16)
        _check_range("dst_addr", self.dst_addr, U32)
        _check_range("dst_port", self.dst_port, U16)

    def reversed(self) -> FourTuple:
        return FourTuple(self.dst_addr, self.dst_port, self.src_addr, self.src_port)

    def __str__(self) -> str:
        return (
            f"{int_to_addr(self.src_addr)}:{self.src_port}->"
            f"{int_to_addr(self.dst_addr)}:{self.dst_port}"
        )


# --- MPTCP options ---------------------------------------------------------


@dataclass(frozen=True, slots=True)
class MpCapable:
    """MP-CAPABLE.  The token is carried only on the SYN-ACK (no key exchange)."""

    token: Optional[int] = None

    def __post_init__(self) -> None:
        if self.token is not None:
            _check_range("token", self.token, U32)


@dataclass(frozen=True, slots=True)
class MpJoin:
    token: int
    addr_id: int

    def __post_init__(self) -> None:
        _check_range("token", self.token, U32)
        _check_range("addr_id", self.addr_id, U8)


@dataclass(frozen=True, slots=True)
class AddAddr:
    addr_id: int
    addr: int

    def __post_init__(self) -> None:
        _check_range("addr_id", self.addr_id, U8)
        _check_range("addr", self.addr, U32)


@dataclass(frozen=True, slots=True)
class Dss:
    """Data Sequence Signal.

    ``data_len == 0`` means the option carries no mapping; with
    ``data_fin=True`` it is a pure DATA-FIN occupying one DSN at ``dsn``.
    """

    dsn: int = 0
    ssn: int = 0
    data_len: int = 0
    data_ack: Optional[int] = None
    data_fin: bool = False

    def __post_init__(self) -> None:
        _check_range("dsn", self.dsn, U64)
        _check_range("ssn", self.ssn, U32)
        _check_range("data_len", self.data_len, MAX_PAYLOAD)
        if self.data_ack is not None:
            _check_range("data_ack", self.data_ack, U64)
        if not isinstance(self.data_fin, bool):
            raise ValueError("data_fin must be a bool")

    @property
    def has_mapping(self) -> bool:
        return self.data_len > 0


MptcpOption = Union[MpCapable, MpJoin, AddAddr, Dss]


class OptionKind(enum.IntEnum):
    MP_CAPABLE = 0
    MP_JOIN = 1
    DSS = 2
    ADD_ADDR = 3


_KIND_OF = {MpCapable: OptionKind.MP_CAPABLE, MpJoin: OptionKind.MP_JOIN,
            Dss: OptionKind.DSS, AddAddr: OptionKind.ADD_ADDR}

_BODY = {
    OptionKind.MP_CAPABLE: struct.Struct(">BI"),
    OptionKind.MP_JOIN: struct.Struct(">IB"),
    OptionKind.DSS: struct.Struct(">BQIHQ"),
    OptionKind.ADD_ADDR: struct.Struct(">BI"),
}

_DSS_HAS_ACK = 0x01
_DSS_FIN = 0x02


# --- Segment ---------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Segment:
    tuple: FourTuple
    flags: Flags
    ssn: int = 0
    ack_ssn: int = 0
    payload_len: int = 0
    options: tuple = ()

    def __post_init__(self) -> None:
        if not isinstance(self.tuple, FourTuple):
            raise ValueError("tuple must be a FourTuple")
        if int(self.flags) & ~_ALL_FLAGS:
            raise ValueError(f"unknown flag bits {int(self.flags):#x}")
        flags = Flags(self.flags)
        object.__setattr__(self, "flags", flags)
        _check_range("ssn", self.ssn, U32)
        _check_range("ack_ssn", self.ack_ssn, U32)
        if not flags & Flags.ACK and self.ack_ssn != 0:
            raise ValueError("ack_ssn must be 0 when ACK is not set")
        _check_range("payload_len", self.payload_len, MAX_PAYLOAD)
        opts = tuple(self.options)
        object.__setattr__(self, "options", opts)
        seen = set()
        for opt in opts:
            kind = _KIND_OF.get(type(opt))
            if kind is None:
                raise ValueError(f"not an MPTCP option: {opt!r}")
            if kind in seen:
                raise ValueError(f"duplicate {kind.name} option")
            seen.add(kind)
            if kind is OptionKind.DSS and opt.data_len and opt.data_len != self.payload_len:
                raise ValueError("DSS mapping length must equal the payload length")

    def option(self, cls):
        """Return the option of type ``cls`` carried by this segment, or None."""
        for opt in self.options:
            if type(opt) is cls:
                return opt
        return None

    def has(self, flag: Flags) -> bool:
        return bool(self.flags & flag)

    @property
    def seq_len(self) -> int:
        """Subflow sequence space consumed: payload plus one each for SYN and FIN."""
        return self.payload_len + bool(self.flags & Flags.SYN) + bool(self.flags & Flags.FIN)

    def __str__(self) -> str:
        opts = ",".join(type(o).__name__ for o in self.options)
        return (f"<{self.tuple} {self.flags} ssn={self.ssn} ack={self.ack_ssn} "
                f"len={self.payload_len}{' ' + opts if opts else ''}>")


_HEADER = struct.Struct(">IHIHBIIH")
HEADER_SIZE = _HEADER.size


def _encode_option(opt: MptcpOption) -> bytes:
    kind = _KIND_OF[type(opt)]
    body = _BODY[kind]
    if kind is OptionKind.MP_CAPABLE:
        raw = body.pack(opt.token is not None, opt.token or 0)
    elif kind is OptionKind.MP_JOIN:
        raw = body.pack(opt.token, opt.addr_id)
    elif kind is OptionKind.ADD_ADDR:
        raw = body.pack(opt.addr_id, opt.addr)
    else:
        flags = (_DSS_HAS_ACK if opt.data_ack is not None else 0) | (_DSS_FIN if opt.data_fin else 0)
        raw = body.pack(flags, opt.dsn, opt.ssn, opt.data_len, opt.data_ack or 0)
    return bytes((kind, len(raw))) + raw


def encode_segment(seg: Segment) -> bytes:
    t = seg.tuple
    out = [_HEADER.pack(t.src_addr, t.src_port, t.dst_addr, t.dst_port,
                        int(seg.flags), seg.ssn, seg.ack_ssn, seg.payload_len)]
    out.extend(_encode_option(o) for o in seg.options)
    return b"".join(out)


def encoded_length(seg: Segment) -> int:
    return HEADER_SIZE + sum(2 + _BODY[_KIND_OF[type(o)]].size for o in seg.options)


def _decode_option(kind: OptionKind, raw: bytes) -> MptcpOption:
    fields = _BODY[kind].unpack(raw)
    if kind is OptionKind.MP_CAPABLE:
        present, token = fields
        if present not in (0, 1) or (not present and token):
            raise MalformedSegment("inconsistent MP-CAPABLE token field")
        return MpCapable(token if present else None)
    if kind is OptionKind.MP_JOIN:
        return MpJoin(*fields)
    if kind is OptionKind.ADD_ADDR:
        return AddAddr(*fields)
    flags, dsn, ssn, data_len, data_ack = fields
    if flags & ~(_DSS_HAS_ACK | _DSS_FIN):
        raise MalformedSegment(f"unknown DSS flag bits {flags:#x}")
    if not flags & _DSS_HAS_ACK and data_ack:
        raise MalformedSegment("DSS data_ack set without its presence flag")
    return Dss(dsn, ssn, data_len,
               data_ack if flags & _DSS_HAS_ACK else None, bool(flags & _DSS_FIN))


def decode_segment(data: bytes) -> Segment:
    """Inverse of :func:`encode_segment`.  Raises :class:`MalformedSegment`."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise MalformedSegment(f"truncated header: {len(data)} < {HEADER_SIZE} bytes")
    src_addr, src_port, dst_addr, dst_port, flags, ssn, ack_ssn, plen = _HEADER.unpack_from(data)
    pos = HEADER_SIZE
    options = []
    while pos < len(data):
        if pos + 2 > len(data):
            raise MalformedSegment("truncated option header")
        try:
            kind = OptionKind(data[pos])
        except ValueError:
            raise MalformedSegment(f"unknown option kind {data[pos]}") from None
        length = data[pos + 1]
        if length != _BODY[kind].size:
            raise MalformedSegment(f"{kind.name} length {length} != {_BODY[kind].size}")
        end = pos + 2 + length
        if end > len(data):
            raise MalformedSegment(f"{kind.name} option runs past end of buffer")
        try:
            options.append(_decode_option(kind, data[pos + 2:end]))
        except MalformedSegment:
            raise
        except ValueError as exc:
            raise MalformedSegment(str(exc)) from exc
        pos = end
    try:
        return Segment(FourTuple(src_addr, src_port, dst_addr, dst_port),
                       Flags(flags), ssn, ack_ssn, plen, tuple(options))
    except ValueError as exc:
        raise MalformedSegment(str(exc)) from exc
