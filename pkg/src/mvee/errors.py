"""Exception hierarchy shared by every subsystem."""

from __future__ import annotations


class MveeError(Exception):
    """Base class for all errors raised by this package."""


class UnknownAddress(MveeError):
    """An event referenced memory outside the declared shared variables."""


class NotYetPublished(MveeError):
    """The requested ring position has not been published yet."""


class Overwritten(MveeError):
    """The requested ring position was already recycled by the producer."""


class Regression(MveeError):
    """A consumer tried to move its progress counter backwards."""


class ReplayMismatch(MveeError):
    """A slave's sync op disagrees with the master's recorded log."""

    def __init__(self, message: str, *, replica: int = -1, thread: int = -1,
                 field: str = "sync-op", master_value: object = None,
                 deviant_value: object = None) -> None:
        super().__init__(message)
        self.replica = replica
        self.thread = thread
        self.field = field
        self.master_value = master_value
        self.deviant_value = deviant_value


class WindowExhausted(MveeError):
    """The partial-order lookahead window did not contain the thread's entry."""


class InvalidCapability(MveeError):
    """A hidden-buffer capability was not issued by the registry."""


class DoubleRegistration(MveeError):
    """An agent registered itself with the monitor twice."""


class UnknownReplica(MveeError):
    """The monitor was asked about a replica that never registered."""


class UnsupportedTransition(MveeError):
    """An agent role change that the monitor refuses to perform."""


class CapacityExhausted(MveeError):
    """A statically sized agent table ran out of room."""


class ParseError(MveeError):
    def __init__(self, message: str, line: int, column: int = 1) -> None:
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ValidationError(MveeError):
    """Structurally well-formed input that violates a semantic rule."""


class InstanceTooLarge(MveeError):
    """Workload too big for exhaustive interleaving enumeration."""


class DuplicateIntrinsic(MveeError):
    """The same intrinsic name appeared twice in a wrapper-header request."""


class DeadlockDetected(MveeError):
    """Every remaining execution context is blocked."""


class RendezvousTimeout(MveeError):
    """Some replica never reached a pending rendezvous point."""


class DivergenceDetected(MveeError):
    """The monitor found inconsistent behaviour and stopped all replicae."""

    def __init__(self, report) -> None:
        super().__init__(str(report))
        self.report = report
