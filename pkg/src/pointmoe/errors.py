"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class RangeError(ValueError):
    """An integer value does not fit the declared bit budget."""


class InputError(ValueError):
    """Malformed input data (non-finite coordinates, empty clouds, ...)."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """A file does not conform to its declared format."""


class NormalizationError(ValueError):
    """A vector with (near-)zero norm cannot be normalized."""


class DegenerateBatchError(ValueError):
    """Batch normalization over fewer than two tokens in training mode."""


class ConsistencyError(ValueError):
    """Cross-structure bookkeeping is broken (e.g. unmapped fine token)."""


class SupervisionError(ValueError):
    """No supervised tokens remain after masking."""


class AnalyticsError(ValueError):
    """Routing log is unusable for the requested analysis."""


class PlanError(ConfigError):
    """Batch plan cannot satisfy its guarantees."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the offending step in its message."""
