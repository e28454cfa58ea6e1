"""Per-node endpoint table: four-tuple routing, MPTCP tokens and listeners."""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass
from typing import Any, Callable, Optional

from .errors import InvariantViolation
from .wire import Flags, FourTuple, MpJoin, Segment

TOKEN_SPACE = 1 << 32


class RouteKind(enum.Enum):
    DELIVER = "deliver"
    JOIN = "join"
    FORK = "fork"
    RESET = "reset"
    DROP = "drop"


@dataclass(frozen=True)
class Route:
    kind: RouteKind
    conn: Any = None
    subflow_id: int = -1
    listener: Any = None


class EndpointTable:
    """Routes inbound segments to subflows, connections and listeners.

    ``by_tuple`` is keyed by the *inbound* four-tuple (remote -> local).
    ``token_source`` draws candidate tokens; it defaults to the seeded ``rng``
    and can be replaced by a stub in tests.
    """

    def __init__(self, rng: Optional[random.Random] = None,
                 token_source: Optional[Callable[[], int]] = None):
        self.rng = rng or random.Random(0)
        self.token_source = token_source or (lambda: self.rng.getrandbits(32))
        self.by_tuple: dict[FourTuple, tuple[Any, int]] = {}
        self.by_token: dict[int, Any] = {}
        self.listeners: dict[tuple[int, int], Any] = {}
        self._tuples_of: dict[int, list[FourTuple]] = {}

    # --- registration --------------------------------------------------------

    def allocate_token(self, conn: Any = None) -> int:
        """Draw a token not currently in use and bind it to ``conn``."""
        if len(self.by_token) >= TOKEN_SPACE:
            raise InvariantViolation("token space exhausted")
        while True:
            token = self.token_source() & 0xFFFFFFFF
            if token not in self.by_token:
                self.by_token[token] = conn
                return token

    def bind_token(self, token: int, conn: Any) -> None:
        owner = self.by_token.get(token)
        if owner is not None and owner is not conn:
            raise InvariantViolation(f"token {token:#010x} already bound")
        self.by_token[token] = conn

    def register(self, inbound: FourTuple, conn: Any, subflow_id: int) -> None:
        if inbound in self.by_tuple:
            raise InvariantViolation(f"four-tuple {inbound} already registered")
        self.by_tuple[inbound] = (conn, subflow_id)
        self._tuples_of.setdefault(id(conn), []).append(inbound)

    def listen(self, listener: Any) -> None:
        key = (listener.addr, listener.port)
        if key in self.listeners:
            raise InvariantViolation(f"already listening on {key}")
        self.listeners[key] = listener

    def lookup(self, inbound: FourTuple) -> Optional[tuple[Any, int]]:
        return self.by_tuple.get(inbound)

    # --- routing -------------------------------------------------------------

    def dispatch(self, seg: Segment) -> Route:
        """Decide where ``seg`` goes.  Pure: the table is not modified."""
        hit = self.by_tuple.get(seg.tuple)
        if hit is not None:
            return Route(RouteKind.DELIVER, hit[0], hit[1])
        if seg.has(Flags.RST):
            return Route(RouteKind.DROP)
        if seg.has(Flags.SYN) and not seg.has(Flags.ACK):
            join = seg.option(MpJoin)
            if join is not None:
                conn = self.by_token.get(join.token)
                if conn is None:
                    return Route(RouteKind.RESET)
                return Route(RouteKind.JOIN, conn)
            listener = self.listeners.get((seg.tuple.dst_addr, seg.tuple.dst_port))
            if listener is not None:
                return Route(RouteKind.FORK, listener=listener)
        return Route(RouteKind.RESET)

    # --- teardown ------------------------------------------------------------

    def deallocate(self, token: int) -> None:
        """Forget an MPTCP connection: its token and all of its four-tuples."""
        if token not in self.by_token:
            raise InvariantViolation(f"deallocate of unknown token {token:#010x}")
        self._drop_tuples(self.by_token.pop(token))

    def release(self, conn: Any) -> None:
        """Forget a connection that has no token (plain TCP)."""
        if id(conn) not in self._tuples_of:
            raise InvariantViolation(f"release of unknown connection {conn!r}")
        self._drop_tuples(conn)

    def _drop_tuples(self, conn: Any) -> None:
        for t in self._tuples_of.pop(id(conn), []):
            del self.by_tuple[t]


def reset_for(seg: Segment) -> Optional[Segment]:
    """The RST answering ``seg``, or None when ``seg`` is itself a RST."""
    if seg.has(Flags.RST):
        return None
    back = seg.tuple.reversed()
    if seg.has(Flags.ACK):
        return Segment(back, Flags.RST, seg.ack_ssn)
    return Segment(back, Flags.RST | Flags.ACK, 0, (seg.ssn + seg.seq_len) & 0xFFFFFFFF)
