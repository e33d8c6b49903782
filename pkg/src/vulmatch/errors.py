"""Exception hierarchy.

Everything raised on bad user input derives from :class:`InputError`; the CLI
maps those to exit status 2.
"""

from __future__ import annotations


class VulmatchError(Exception):
    """Base class for all errors raised by the package."""


class InputError(VulmatchError):
    """The caller handed us something we cannot work with."""


# source_prep
class NameNotFound(InputError):
    def __init__(self, name: str):
        super().__init__(f"no definition found for function {name!r}")
        self.name = name


class AmbiguousDefinition(InputError):
    def __init__(self, name: str, lines: list[int]):
        super().__init__(f"function {name!r} is defined more than once (lines {lines})")
        self.name = name
        self.lines = lines


class SpanOutOfRange(InputError):
    pass


# diffcore
class ScriptMismatch(InputError):
    pass


class DiffParseError(InputError):
    pass


# binmodel
class SchemaError(InputError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class ValidationError(InputError):
    pass


# siggen
class SignatureError(VulmatchError):
    """A builder could not produce a structure; usually reported as a diagnostic."""


class NoMappedInstructions(SignatureError):
    pass


class NoLeadingBlock(SignatureError):
    pass


class NoCounterpart(SignatureError):
    pass


class SignatureEmpty(SignatureError):
    pass


# sigdb
class SchemaVersionMismatch(InputError):
    pass


class UnknownCve(InputError):
    def __init__(self, cve_id: str):
        super().__init__(f"unknown CVE {cve_id!r}")
        self.cve_id = cve_id


# evalharness
class MissingSignatures(InputError):
    def __init__(self, cve_id: str, function: str | None = None):
        what = cve_id if function is None else f"{cve_id}/{function}"
        super().__init__(f"no signatures stored for {what}")
        self.cve_id = cve_id
        self.function = function
