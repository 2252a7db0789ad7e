"""Exception hierarchy shared across the package."""


class IntentLoopError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(IntentLoopError, ValueError):
    """Invalid argument value, or mismatched shapes/label sets."""


class DesignError(IntentLoopError):
    """A computed design (e.g. a digital filter) failed validation."""


class BoundsError(IntentLoopError):
    """A requested window falls outside the available data."""


class NotReadyError(IntentLoopError):
    """A buffer does not yet hold enough samples for the request."""


class DataFormatError(IntentLoopError):
    """A file or stream does not conform to its declared format."""


class DetectionError(IntentLoopError):
    """A signal-derived detection (e.g. movement onset) found no crossing."""


class EmptyTrainingSetError(IntentLoopError):
    """Every candidate training segment was rejected."""


class TrainingError(IntentLoopError):
    """Classifier training could not proceed on the given data."""


class ProtocolError(IntentLoopError):
    """Trial events arrived out of protocol order."""


class ActuatorError(IntentLoopError):
    """The actuator transport is unavailable or refused a command."""


class EmptyConditionError(IntentLoopError):
    """No kept trials remain for a requested condition."""
