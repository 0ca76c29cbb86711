"""Exception types raised across the package."""


class ConfParetoError(Exception):
    """Base class for all package errors."""


class SchemaError(ConfParetoError, ValueError):
    """A column, dimension or model/data schema does not match."""


class ParseError(ConfParetoError, ValueError):
    """A cell could not be parsed as a number."""


class FormatError(ConfParetoError, ValueError):
    """A file is structurally malformed (e.g. ragged rows)."""


class InsufficientDataError(ConfParetoError, ValueError):
    pass


class DomainError(ConfParetoError, ValueError):
    """An argument lies outside the domain of an operation."""


class CalibrationError(ConfParetoError, ValueError):
    pass


class OptimizationError(ConfParetoError, RuntimeError):
    pass


class StateError(ConfParetoError, RuntimeError):
    """An object was used before it was ready (e.g. an unfitted model)."""


class DegenerateWeightsError(ConfParetoError, ValueError):
    """All calibration weights and the test weight are zero."""


class ProvenanceError(ConfParetoError, ValueError):
    """A model is being calibrated on the rows it was fitted on."""
