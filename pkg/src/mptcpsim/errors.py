class InvalidState(RuntimeError):
    """Operation not permitted in the object's current protocol state."""


class WindowExceeded(RuntimeError):
    pass


class ProtocolViolation(RuntimeError):
    """The peer sent something that contradicts state it signalled earlier."""


class AlreadyConnected(RuntimeError):
    pass


class ConnectionClosing(RuntimeError):
    pass


class InvariantViolation(AssertionError):
    """An internal consistency check failed; this is a simulator bug."""
