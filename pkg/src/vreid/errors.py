"""Exception types shared across the library.

Each maps to one failure category the CLI reports (and, where applicable,
one exit code).
"""


class VreidError(Exception):
    """Base class for library errors."""

    category = "error"


class ShapeError(VreidError):
    """Tensor shapes incompatible with the requested operation."""

    category = "shape"


class DegenerateBatchError(VreidError):
    """Batch statistics requested on a batch of size < 2."""

    category = "degenerate-batch"


class LabelError(VreidError):
    """Class index out of range, or a label vector that is not one-hot."""

    category = "label"


class NonFiniteError(VreidError):
    """NaN or Inf produced by a forward operation."""

    category = "non-finite"


class PairingError(VreidError):
    """View-pair construction failed (empty pool or equal views)."""

    category = "pairing"


class ConfigError(VreidError):
    """Config file unparsable or internally inconsistent."""

    category = "config"


class ManifestError(VreidError):
    """Dataset manifest unreadable; message names the line and field."""

    category = "manifest"


class CheckpointError(VreidError):
    """Checkpoint unreadable, wrong version, or wrong config digest."""

    category = "checkpoint"


class PhaseOrderError(VreidError):
    """A training phase was requested before its prerequisites completed."""

    category = "phase-order"


class DivergenceError(VreidError):
    """Training produced a non-finite loss."""

    category = "divergence"
