"""Domain exceptions shared across the package."""


class OodsimError(Exception):
    """Base class for all domain errors; CLI maps these to exit code 1."""


class SchemaError(OodsimError):
    """Input file does not match the documented schema."""


class MissingMonth(OodsimError):
    """A state's month grid has a gap."""


class UnknownState(OodsimError):
    """State identifier not present in the loaded panel/graph."""


class UnknownPolicy(OodsimError):
    """Policy identifier not present in the corpus or candidate pool."""


class SelfLoop(OodsimError):
    """Adjacency edge connects a state to itself."""


class SplitTooShort(OodsimError):
    """Month range cannot fit a single history+target window."""


class ConfigError(OodsimError):
    """Invalid or inconsistent configuration."""


class MissingEmbedding(OodsimError):
    """A graph entity has no row in the embedding table."""


class EmptyKG(OodsimError):
    """Policy graph has no entities; caller should use the null-policy path."""


class DimensionMismatch(OodsimError):
    """Tensor shapes inconsistent with the configured dimensions."""


class ShapeError(OodsimError):
    """Prediction/target shapes disagree."""


class DivergenceError(OodsimError):
    """Training loss became non-finite."""


class SplitMismatch(OodsimError):
    """Checkpoint and requested evaluation protocol disagree."""


class WindowOutOfRange(OodsimError):
    """Requested history window is not covered by the panel."""


class InvalidEdit(OodsimError):
    """Policy edit violates its invariants for the given scenario."""


class EmptyPool(OodsimError):
    """Schedule search requested with no candidate policies."""


class BudgetZero(OodsimError):
    """Schedule search requested with a non-positive simulation budget."""


class SpaceTooLarge(OodsimError):
    """Exhaustive enumeration guard tripped."""


class CheckpointError(OodsimError):
    """Checkpoint file is malformed or incompatible."""
