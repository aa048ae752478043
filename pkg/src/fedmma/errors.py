"""Exception hierarchy shared by all fedmma modules."""


class FedmmaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FedmmaError):
    """Operands have incompatible shapes."""


class DegenerateVectorError(FedmmaError):
    """A vector operation received a zero-norm input."""


class ContractError(FedmmaError):
    """A caller violated an operation precondition."""


class NumericError(FedmmaError):
    """A computation produced a non-finite value."""


class ConfigError(FedmmaError):
    """A configuration value or combination is invalid."""


class StateError(FedmmaError):
    """An operation was called in the wrong object state."""


class ProtocolError(FedmmaError):
    """A federation message or aggregation step is malformed."""


class VocabularyError(FedmmaError):
    """A token id is outside the embedding table."""


class GenerationError(FedmmaError):
    """Synthetic data generation could not satisfy its constraints."""


class PartitionError(FedmmaError):
    """A data partition could not be produced under the given settings."""


class EvaluationError(FedmmaError):
    """An evaluation split is empty or otherwise unusable."""
