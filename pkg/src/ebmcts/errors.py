"""Exception types shared across the package."""


class EbmctsError(Exception):
    """Base class for all package errors."""


class InvalidInputError(EbmctsError):
    """An argument violates a documented precondition."""


class CapacityError(EbmctsError):
    """An exact enumeration would exceed its safety bound."""


class EnergyDomainError(EbmctsError):
    """A tabular energy was queried outside its enumerated domain."""


class TransportError(EbmctsError):
    """A remote generator request failed (network, HTTP, or bad payload)."""


class UnsupportedOperationError(EbmctsError):
    """The generator kind cannot provide the requested quantity."""


class NoAnswerError(EbmctsError):
    """A response carries no answer marker to extract from."""


class SearchFailureError(EbmctsError):
    """A search produced no visited child to commit."""


class TreeLogicError(EbmctsError):
    """A tree operation was invoked on a node that cannot accept it."""


class InvalidTrainingSetError(EbmctsError):
    """A labeled set ended up with no usable negatives."""


class DivergenceError(EbmctsError):
    """Training loss blew up past the abort threshold."""


class ConfigError(EbmctsError):
    """A run configuration failed validation."""


class DependencyError(EbmctsError):
    """A required upstream artifact is missing."""
