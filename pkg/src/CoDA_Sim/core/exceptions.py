"""Custom exceptions for CoDA-Sim."""


class CoDAError(Exception):
    """Base class for every error raised by CoDA-Sim."""

    pass


class ConfigError(CoDAError):
    """Exception raised when a configuration file or override is invalid.

    Attributes:
        line: 1-based line in the configuration file, or None for flag overrides.
        path: Path of the offending file, if any.
    """

    def __init__(
        self, message: str, line: int | None = None, path: str | None = None
    ) -> None:
        """Initializes the error with an optional source location.

        Args:
            message: Human readable description of the problem.
            line: 1-based line number the problem was found on.
            path: Configuration file path.
        """
        self.message = message
        self.line = line
        self.path = path
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            location = f"line {line}: "
        super().__init__(f"{location}{message}")


class InvalidPopulationError(CoDAError):
    """Exception raised when population sizes are invalid."""

    pass


class UnknownEntityError(CoDAError):
    """Exception raised when a user, item or animation id does not exist."""

    pass


class OutOfVocabularyError(CoDAError):
    """Exception raised when a feature id falls outside a model vocabulary."""

    pass


class EmptyInputError(CoDAError):
    """Exception raised when an operation receives an empty input."""

    pass


class InvalidScoresError(CoDAError):
    """Exception raised when a score lies outside the open interval (0, 1)."""

    pass


class NonFiniteGradientError(CoDAError):
    """Exception raised when backprop produces a NaN or infinite gradient.

    Attributes:
        layer: Name of the parameter whose gradient is not finite.
    """

    def __init__(self, layer: str) -> None:
        """Initializes the error for the offending layer.

        Args:
            layer: Name of the parameter whose gradient is not finite.
        """
        self.layer = layer
        super().__init__(f"Non-finite gradient in layer '{layer}'.")


class DegenerateValidationSetError(CoDAError):
    """Exception raised when AUC is requested on a single-class label set."""

    pass


class DegenerateDataError(CoDAError):
    """Exception raised when training data holds a single label class."""

    pass


class EmptyUserError(CoDAError):
    """Exception raised when a user vector cannot be extracted."""

    pass


class BatchAuthorizationError(CoDAError):
    """Exception raised when a batch id is unknown or owned by another user."""

    pass


class BatchGoneError(CoDAError):
    """Exception raised when a batch has expired past the retention horizon."""

    pass


class PayloadCorruptionError(CoDAError):
    """Exception raised when a payload checksum does not match its content."""

    pass


class PayloadParseError(CoDAError):
    """Exception raised when a payload cannot be decoded."""

    pass


class Base64DecodeError(PayloadParseError):
    """Exception raised when payload text is not valid BASE64."""

    pass


class DeflateDecodeError(PayloadParseError):
    """Exception raised when a payload is not a valid DEFLATE stream."""

    pass


class SampleParseError(PayloadParseError):
    """Exception raised when decompressed bytes are not valid sample records."""

    pass


class TransportError(CoDAError):
    """Exception raised when the simulated down tunnel drops a request.

    Transport failures are retryable and never consume pull quota.
    """

    pass


class DeviceNotRegisteredError(CoDAError):
    """Exception raised when an unregistered device pulls from the tunnel."""

    pass


class ModelStoreUninitializedError(CoDAError):
    """Exception raised when inference runs before a model has been saved."""

    pass


class NoOpenTransactionError(CoDAError):
    """Exception raised when committing or rolling back without a transaction."""

    pass


class TransactionOpenError(CoDAError):
    """Exception raised when a second training transaction is opened."""

    pass


class ModelFormatError(CoDAError):
    """Exception raised when a serialized model blob is malformed."""

    pass


class UnknownStageError(CoDAError):
    """Exception raised when the CLI is asked for an unknown pipeline stage."""

    pass
