"""Exception types shared across the package.

All of them derive from ``ValueError`` so callers that only care about
"bad input" can catch one thing.
"""


class SpeechLMError(ValueError):
    pass


class InputError(SpeechLMError):
    """Input data violates an operation's precondition."""


class ConfigError(SpeechLMError):
    """A configuration value is invalid or inconsistent."""


class ShapeError(SpeechLMError):
    """Tensor dimensions do not conform."""


class FormatError(SpeechLMError):
    """A file on disk is corrupt, truncated or incompatible."""


class EncodingError(SpeechLMError):
    """Text cannot be mapped onto the tokenizer vocabulary."""


class TruncationError(SpeechLMError):
    """A sequence would exceed the model's maximum length."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = list(partial or [])


class ValidationError(SpeechLMError):
    """A manifest or record set is internally inconsistent."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss."""

    def __init__(self, step, batch_ids):
        self.step = step
        self.batch_ids = list(batch_ids)
        super().__init__(f"non-finite loss at step {step}; batch ids: {self.batch_ids}")


class LoaderError(RuntimeError):
    """A pipelined loader worker failed while preparing a batch."""

    def __init__(self, index, cause):
        self.index = index
        super().__init__(f"batch {index} failed: {cause!r}")
