"""Exception hierarchy shared by every subpackage."""


class XAgreeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(XAgreeError, ValueError):
    """Operand shapes do not conform for an operation."""


class VocabIndexError(XAgreeError, IndexError):
    """A gather index falls outside the embedding table."""


class ContractError(XAgreeError, ValueError):
    """A documented precondition was violated by the caller."""


class LengthError(ContractError):
    """A sequence is empty or longer than the model accepts."""


class KindError(ContractError):
    """An attention record of the wrong architecture was supplied."""


class StateError(XAgreeError, RuntimeError):
    """An object was used in a state that forbids the request."""


class ConfigError(XAgreeError, ValueError):
    """Invalid configuration value."""


class CapabilityError(XAgreeError, RuntimeError):
    """The request exceeds what the implementation supports."""


class NumericalError(XAgreeError, ArithmeticError):
    """A numerical routine failed (singular system, non-finite result)."""


class TrainingError(XAgreeError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class UndefinedCorrelation(XAgreeError, ValueError):
    """Correlation is undefined, e.g. for a zero-variance vector."""


class CompletenessError(XAgreeError, ValueError):
    """An instance is missing an explanation method."""

    def __init__(self, instance, method):
        super().__init__(f"instance {instance!r} has no explanation for method {method!r}")
        self.instance = instance
        self.method = method


class ParseError(XAgreeError, ValueError):
    """A data file line could not be parsed."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(XAgreeError, ValueError):
    """A record parsed but violates the expected schema."""


class StageError(XAgreeError, RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
