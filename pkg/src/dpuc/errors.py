"""Exception hierarchy shared by all passes and the simulator."""


class DpucError(Exception):
    """Base class for every error raised by this package."""


class ParseError(DpucError):
    """Malformed graph document."""


class ShapeError(DpucError):
    """Inconsistent producer/consumer tensor shapes."""


class FoldError(DpucError):
    """A quantizer feeds consumers with incompatible requirements."""


class CycleError(DpucError):
    """Graph is not acyclic (defensive; parse already rejects cycles)."""


class InfeasibleError(DpucError):
    """A tiling request cannot be met at the current split depth."""


class UnsupportedError(DpucError):
    """Operation shape outside what the backend implements."""


class AsmError(DpucError):
    """Assembly text parse failure; carries a line number."""

    def __init__(self, lineno, msg):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class CapacityError(DpucError):
    """DDR capacity cap exceeded."""


class UseBeforeDefError(DpucError):
    """An instruction reads bytes that were never written."""


class OutOfBoundsError(DpucError):
    """An address range falls outside its memory."""


class OutOfMemoryError(DpucError):
    """Circular allocator cannot place a request without overlap."""


class PortConflictError(DpucError):
    """An FM memory would need more than one read or write port."""


class EncodingError(DpucError):
    """A required dependency cannot be expressed by instruction type."""


class DeadlockError(DpucError):
    """Typed dependencies are unsatisfiable at simulation time."""


class CompileError(DpucError):
    """All schedules exhausted; carries the per-attempt failure ledger."""

    def __init__(self, msg, attempts=None):
        super().__init__(msg)
        self.attempts = list(attempts or [])
