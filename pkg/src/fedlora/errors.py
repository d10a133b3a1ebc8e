"""Exception hierarchy shared by every fedlora module."""


class FedLoraError(Exception):
    """Base class for all errors raised by fedlora."""


class ShapeError(FedLoraError, ValueError):
    """Operand dimensions are incompatible."""


class ContractError(FedLoraError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(FedLoraError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class GraphStateError(FedLoraError, RuntimeError):
    """Backward was requested on a graph that is consumed or missing."""


class TargetIndexError(FedLoraError, IndexError):
    """A token id fell outside the vocabulary."""


class ConfigError(FedLoraError, ValueError):
    """Invalid model, training, or experiment configuration."""


class UnknownSiteError(FedLoraError, KeyError):
    """An adapter names an injection site the base model does not have."""


class DecodeError(FedLoraError, ValueError):
    """An FJLA container could not be decoded."""


class BadMagicError(DecodeError):
    pass


class VersionMismatchError(DecodeError):
    pass


class TruncatedPayloadError(DecodeError):
    pass


class ChecksumError(DecodeError):
    pass


class CorpusParseError(FedLoraError, ValueError):
    """A JSONL line is not valid JSON."""

    def __init__(self, path, line_no, msg):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


class CorpusSchemaError(FedLoraError, ValueError):
    """A JSONL record lacks a required field or has the wrong type."""

    def __init__(self, path, line_no, field):
        super().__init__(f"{path}:{line_no}: missing or invalid field {field!r}")
        self.line_no = line_no
        self.field = field


class RoundAbortedError(FedLoraError, RuntimeError):
    """A client failed during a communication round; nothing was aggregated."""
