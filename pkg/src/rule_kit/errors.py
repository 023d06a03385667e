"""Exception types raised across rule_kit.

Every error derives from :class:`RuleKitError`; input-shape problems also
derive from :class:`ValueError` so generic callers can catch them.
"""

from __future__ import annotations


class RuleKitError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(RuleKitError, ValueError):
    """Bad input values or shapes."""


class DomainError(ValidationError):
    """A numeric argument lies outside the function's domain."""


class ZeroRow(ValidationError):
    def __init__(self, row: int):
        super().__init__(f"row {row} has (near) zero L2 norm")
        self.row = row


class DimMismatch(ValidationError):
    pass


class KTooLarge(ValidationError):
    pass


class NonSquare(ValidationError):
    pass


class NonFinite(RuleKitError, ArithmeticError):
    """A computation produced (or was fed) inf/nan.

    ``trace`` carries the loss history when training aborts.
    """

    def __init__(self, message: str, trace: list[float] | None = None):
        super().__init__(message)
        self.trace = list(trace or [])


class EmptyQuestion(ValidationError):
    pass


class EmptyBatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class MissingAnswer(ValidationError):
    def __init__(self, record_id: str, k: int):
        super().__init__(f"record {record_id!r} has no RAG answer for k={k}")
        self.record_id = record_id
        self.k = k


class NoErrors(RuleKitError):
    """Over-reliance ratio is undefined: no RAG answer was wrong."""


class Malformed(ValidationError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateId(ValidationError):
    def __init__(self, record_id: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"duplicate id {record_id!r}{where}")
        self.record_id = record_id
        self.line = line


class EmbeddingFormatError(ValidationError):
    """Base for EMB1 container problems."""


class BadMagic(EmbeddingFormatError):
    pass


class TruncatedFile(EmbeddingFormatError):
    pass


class DimOverflow(EmbeddingFormatError):
    pass


class EmptyLambdaHat(RuleKitError):
    """Calibration accepted no retrieval depth."""

    def __init__(self, certificate):
        super().__init__("no candidate k passed the risk test")
        self.certificate = certificate
