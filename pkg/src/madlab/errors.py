"""Exception hierarchy shared across the lab.

Two families matter to callers: ``DataError`` covers malformed inputs and
validation failures (CLI exit code 2), ``NumericError`` covers numerical
breakdowns such as NaN/Inf appearing mid-computation (CLI exit code 3).
Plain I/O problems use the stdlib ``OSError`` family.
"""


class MadlabError(Exception):
    """Base class for all lab-specific errors."""


class DataError(MadlabError):
    """Malformed or inconsistent input data / artifacts."""


class NumericError(MadlabError):
    """Numerical failure (non-finite values, divergence)."""


# --- manifest / corpus ---

class MalformedLineError(DataError):
    def __init__(self, line_no: int, reason: str = ""):
        self.line_no = line_no
        super().__init__(f"manifest line {line_no} is malformed" + (f": {reason}" if reason else ""))


class DuplicateIdError(DataError):
    def __init__(self, sample_id: str):
        self.sample_id = sample_id
        super().__init__(f"duplicate sample id {sample_id!r}")


class UnknownLabelError(DataError):
    def __init__(self, value):
        self.value = value
        super().__init__(f"unknown label {value!r} (expected 'benign' or 'malware')")


class ClassTooSmallError(DataError):
    def __init__(self, label: str, count: int, needed: int):
        self.label = label
        super().__init__(f"class {label!r} has {count} record(s), needs at least {needed}")


class EmptyClassError(DataError):
    def __init__(self, label: str):
        self.label = label
        super().__init__(f"class {label!r} has no records")


class EmptyDatasetError(DataError):
    def __init__(self):
        super().__init__("dataset is empty")


# --- binary parsing ---

class NotPeError(DataError):
    """Input bytes are not a PE image (bad DOS magic or PE signature)."""


class TruncatedError(DataError):
    """A read ran past the end of the byte sequence / file."""

    def __init__(self, offset: int, what: str = ""):
        self.offset = offset
        super().__init__(f"truncated at offset {offset:#x}" + (f" while reading {what}" if what else ""))


class BadRvaError(DataError):
    def __init__(self, rva: int):
        self.rva = rva
        super().__init__(f"RVA {rva:#x} maps to no section")


# --- tensors / model ---

class ShapeMismatchError(DataError):
    def __init__(self, msg: str):
        super().__init__(msg)


class NonFiniteValueError(NumericError):
    def __init__(self, where: str):
        self.where = where
        super().__init__(f"non-finite value in {where}")


class BadMagicError(DataError):
    def __init__(self, got: bytes):
        super().__init__(f"bad model file magic {got!r}")


class VersionMismatchError(DataError):
    def __init__(self, got, expected):
        super().__init__(f"model file format version {got} (this build reads {expected})")


# --- defenses / reporting ---

class BadKError(DataError):
    def __init__(self, k: int, dim: int):
        super().__init__(f"k={k} outside valid range 1..{dim}")


class IncompatibleModelsError(DataError):
    def __init__(self, reason: str):
        super().__init__(f"models are not comparable: {reason}")


class MissingArtifactError(DataError):
    def __init__(self, what: str, path):
        self.path = path
        super().__init__(f"missing {what}: {path}")
