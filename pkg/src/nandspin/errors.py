"""Exception types shared across the simulator."""


class NandSpinError(Exception):
    """Base class for all simulator errors."""


class SignalDecodeError(NandSpinError):
    """Control signal combination matches no supported operation."""


class ProgramWithoutErase(NandSpinError):
    """Strict-mode program targeted an MTJ that was not erased first."""


class GeometryMismatch(NandSpinError):
    """Operand shape or address is inconsistent with the array geometry."""


class RowOutOfRange(NandSpinError):
    """Bit-row index outside the subarray."""


class BufferIndexOutOfRange(NandSpinError):
    """Weight-buffer row index outside the buffer capacity."""


class BufferRowEmpty(NandSpinError):
    """Weight-buffer row used as an operand before being loaded."""


class CounterOverflow(NandSpinError):
    """Per-column bit counter exceeded its configured width."""


class LayoutError(NandSpinError):
    """Column-vector layout violates row-disjointness or range rules."""


class InsufficientResultRows(NandSpinError):
    """Reserved result rows cannot hold the worst-case output width."""


class DimMismatch(NandSpinError):
    """Tensor dimensions are incompatible with the requested operation."""


class StrideInvalid(NandSpinError):
    """Stride must be a positive integer compatible with the window."""


class DegenerateRange(NandSpinError):
    """Quantization range with Q_max <= Q_min."""


class CapacityExceeded(NandSpinError):
    """Model does not fit the configured array geometry."""


class ModelFormatError(NandSpinError):
    """Model or tensor file fails structural validation."""


class SimulationInvariant(NandSpinError):
    """Internal consistency check failed; indicates a scheduling bug."""
