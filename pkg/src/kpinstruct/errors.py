"""Exception types shared across the package.

Everything raised on purpose derives from :class:`KpinstructError` so callers
(and the CLI exit-code mapping) can tell our failures apart from bugs.
"""

from __future__ import annotations


class KpinstructError(Exception):
    """Base class for all errors raised by this package."""


# --- annotation ingestion ---------------------------------------------------


class MissingFile(KpinstructError):
    def __init__(self, path: str):
        super().__init__(f"file not found: {path}")
        self.path = path


class MalformedJson(KpinstructError):
    def __init__(self, path: str, offset: int, reason: str):
        super().__init__(f"{path}: invalid JSON at byte offset {offset}: {reason}")
        self.path = path
        self.offset = offset


class SchemaViolation(KpinstructError):
    """A required field is missing or holds an out-of-contract value."""

    def __init__(self, field: str, detail: str = ""):
        message = f"schema violation on field {field!r}"
        if detail:
            message += f": {detail}"
        super().__init__(message)
        self.field = field


class DanglingReference(KpinstructError):
    def __init__(self, annotation_id: int, image_id: int):
        super().__init__(
            f"annotation {annotation_id} references unknown image id {image_id}"
        )
        self.annotation_id = annotation_id
        self.image_id = image_id


class UnknownCategory(KpinstructError):
    def __init__(self, category_id: int, annotation_id: int):
        super().__init__(
            f"annotation {annotation_id} uses category id {category_id} "
            "which is absent from the categories table"
        )
        self.category_id = category_id


# --- coordinate normalization -----------------------------------------------


class NonPositiveImageDims(KpinstructError):
    def __init__(self, width, height):
        super().__init__(f"image dimensions must be positive, got {width}x{height}")


class BadLength(KpinstructError):
    def __init__(self, got: int, expected: int):
        super().__init__(f"expected a flat list of {expected} values, got {got}")


class BadVisibility(KpinstructError):
    def __init__(self, value):
        super().__init__(f"visibility flag must be 0, 1 or 2, got {value!r}")


class NoCaptions(KpinstructError):
    def __init__(self, image_id: int):
        super().__init__(f"image {image_id} has no captions to serialize")


# --- prompt construction ----------------------------------------------------


class EmptySeeds(KpinstructError):
    def __init__(self, sample_type: str):
        super().__init__(f"no seed examples available for type {sample_type!r}")


# --- backend gateway ---------------------------------------------------------


class GatewayError(KpinstructError):
    """Base for failures talking to a completion backend."""


class AuthError(GatewayError):
    """Credentials missing or rejected; never retried."""


class RateLimitExhausted(GatewayError):
    """Backend kept answering 429 until the retry budget ran out."""


class BackendError(GatewayError):
    """Backend failed on the final retry attempt or returned garbage."""


class ContentFilterRefusal(GatewayError):
    """Backend refused to complete the request; the item should be skipped."""


# --- response parsing and gating ----------------------------------------------


class StructureViolation(KpinstructError):
    """Raw response text does not follow the expected turn grammar."""


# --- generation pipeline ------------------------------------------------------


class InsufficientImages(KpinstructError):
    def __init__(self, needed: int, available: int, where: str = "plan"):
        super().__init__(
            f"{where} needs {needed} eligible images but only {available} are available"
        )
        self.needed = needed
        self.available = available


# --- evaluation ---------------------------------------------------------------


class MissingAnswer(KpinstructError):
    pass


class MalformedAnswerFile(KpinstructError):
    pass


class JudgeParseError(KpinstructError):
    """Judge output did not contain two integer scores in range."""


class ZeroReference(KpinstructError):
    def __init__(self):
        super().__init__("reference score must be positive to compute a ratio")


class ZeroBaseline(KpinstructError):
    def __init__(self):
        super().__init__("baseline score must be positive to compute improvement")


class EmptyCategory(KpinstructError):
    def __init__(self, sample_type: str):
        super().__init__(f"no judged items for type {sample_type!r}")
        self.sample_type = sample_type


# --- CLI configuration ---------------------------------------------------------


class ConfigError(KpinstructError):
    pass
