"""Exception hierarchy shared by every module of the toolkit."""


class AttackToolkitError(Exception):
    """Base class; the CLI turns these into a one-line machine-parsable error."""

    code = "error"


class ShapeError(AttackToolkitError, ValueError):
    code = "shape"

    def __init__(self, message, dimension=None):
        super().__init__(message)
        self.dimension = dimension


class LabelError(AttackToolkitError, ValueError):
    code = "label"


class SingularMatrixError(AttackToolkitError, ValueError):
    code = "singular"


class SpecError(AttackToolkitError, ValueError):
    code = "spec"


class DivergenceError(AttackToolkitError, RuntimeError):
    code = "divergence"

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


class WeightFormatError(AttackToolkitError):
    """Wrong magic bytes or unsupported format version."""

    code = "weights-format"


class WeightTruncatedError(AttackToolkitError):
    code = "weights-truncated"


class WeightShapeTableError(AttackToolkitError):
    code = "weights-shape-table"


class IdxMagicError(AttackToolkitError):
    code = "idx-magic"


class IdxTruncatedError(AttackToolkitError):
    code = "idx-truncated"


class IdxCountMismatchError(AttackToolkitError):
    code = "idx-count-mismatch"


class EvalShortfallError(AttackToolkitError):
    code = "eval-shortfall"

    def __init__(self, message, available, requested):
        super().__init__(message)
        self.available = available
        self.requested = requested
