"""No-inline tagging of C/C++ function definitions.

Detection is lexical: comments, string/char literals and preprocessor lines
are blanked (keeping offsets and newlines intact), then ``name ( ... )``
followed by ``{`` marks a definition.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Iterable

from .errors import AmbiguousDefinition, NameNotFound, SpanOutOfRange

log = logging.getLogger(__name__)

NOINLINE_TAG = "__attribute__((noinline))"
_IDENT = re.compile(r"[A-Za-z_]\w*")
_KEYWORDS = {"if", "while", "for", "switch", "return", "sizeof", "do", "else", "case"}


@dataclass(frozen=True)
class FunctionSpan:
    name: str
    start_line: int
    signature_line: int
    column: int = 0  # offset of the header's first token within signature_line

    def __post_init__(self) -> None:
        if not _IDENT.fullmatch(self.name):
            raise ValueError(f"not a C identifier: {self.name!r}")
        if self.start_line < 1 or self.signature_line < 1:
            raise ValueError("line numbers are 1-based")


def _blank(text: str) -> str:
    """Same-length copy with comments, literals and preprocessor lines neutralized.

    A preprocessor line becomes ``;`` followed by spaces so it delimits headers.
    """
    out = list(text)
    n = len(text)
    i = 0
    line_start = True
    while i < n:
        c = text[i]
        if c == "\n":
            line_start = True
            i += 1
            continue
        if line_start and c in " \t":
            i += 1
            continue
        if line_start and c == "#":
            out[i] = ";"
            i += 1
            while i < n and text[i] != "\n":
                if text[i] == "\\" and i + 1 < n and text[i + 1] == "\n":
                    out[i] = " "
                    i += 2
                    continue
                out[i] = " "
                i += 1
            continue
        line_start = False
        if text.startswith("//", i):
            while i < n and text[i] != "\n":
                out[i] = " "
                i += 1
        elif text.startswith("/*", i):
            end = text.find("*/", i + 2)
            end = n if end < 0 else end + 2
            for k in range(i, end):
                if text[k] != "\n":
                    out[k] = " "
            i = end
        elif c in "\"'":
            k = i + 1
            while k < n and text[k] != c and text[k] != "\n":
                k += 2 if text[k] == "\\" else 1
            end = min(k + 1, n)
            for p in range(i + 1, end - 1):
                if text[p] != "\n":
                    out[p] = " "
            i = end
        else:
            i += 1
    return "".join(out)


def _match_paren(s: str, i: int) -> int:
    depth = 0
    for k in range(i, len(s)):
        if s[k] == "(":
            depth += 1
        elif s[k] == ")":
            depth -= 1
            if depth == 0:
                return k
    return -1


def _skip_trailer(s: str, i: int) -> int:
    """Skip qualifiers/attributes between ``)`` and ``{``; return index of next significant char."""
    n = len(s)
    while i < n:
        while i < n and s[i].isspace():
            i += 1
        m = _IDENT.match(s, i)
        if not m:
            return i
        i = m.end()
        j = i
        while j < n and s[j].isspace():
            j += 1
        if j < n and s[j] == "(":
            close = _match_paren(s, j)
            if close < 0:
                return n
            i = close + 1
    return i


def _header_start(s: str, name_pos: int) -> int:
    k = name_pos - 1
    while k >= 0 and s[k] not in ";{}":
        k -= 1
    k += 1
    while k < name_pos and s[k].isspace():
        k += 1
    return k


def _line_of(text: str, pos: int) -> int:
    return text.count("\n", 0, pos) + 1


def _definitions(blanked: str, name: str) -> list[tuple[int, int]]:
    """(header offset, name offset) of every definition of ``name``."""
    found: list[tuple[int, int]] = []
    if name in _KEYWORDS:
        return found
    for m in re.finditer(rf"(?<![\w.>]){re.escape(name)}\b", blanked):
        pre = blanked[:m.start()].rstrip()
        if pre.endswith("->") or pre.endswith("."):
            continue
        j = m.end()
        while j < len(blanked) and blanked[j].isspace():
            j += 1
        if j >= len(blanked) or blanked[j] != "(":
            continue
        close = _match_paren(blanked, j)
        if close < 0:
            continue
        nxt = _skip_trailer(blanked, close + 1)
        if nxt < len(blanked) and blanked[nxt] == "{":
            found.append((_header_start(blanked, m.start()), m.start()))
    return found


def locate_function_definitions(source_text: str, names: Iterable[str]) -> list[FunctionSpan]:
    blanked = _blank(source_text)
    spans = []
    for name in names:
        defs = _definitions(blanked, name)
        if not defs:
            raise NameNotFound(name)
        if len(defs) > 1:
            raise AmbiguousDefinition(name, [_line_of(source_text, p) for _, p in defs])
        head, pos = defs[0]
        sig_line = _line_of(source_text, head)
        line_start = source_text.rfind("\n", 0, head) + 1
        spans.append(FunctionSpan(name, _line_of(source_text, pos), sig_line, head - line_start))
    return spans


def _line_offsets(text: str) -> list[int]:
    offs = [0]
    for m in re.finditer("\n", text):
        offs.append(m.end())
    return offs


def insert_noinline_tags(source_text: str, spans: Iterable[FunctionSpan]) -> str:
    """Prefix each span's definition header with ``__attribute__((noinline))``.

    Headers that already carry the tag are left alone (logged as a warning).
    """
    offs = _line_offsets(source_text)
    nlines = len(offs) if not source_text.endswith("\n") else len(offs) - 1
    blanked = _blank(source_text)
    edits: list[int] = []
    for span in spans:
        if span.signature_line > max(nlines, 1) or span.start_line > max(nlines, 1):
            raise SpanOutOfRange(f"{span.name}: line {max(span.signature_line, span.start_line)} > {nlines}")
        at = offs[span.signature_line - 1] + span.column
        name_at = blanked.find(span.name, at)
        header = source_text[at:name_at] if name_at >= 0 else ""
        if NOINLINE_TAG in header or _preceded_by_tag(source_text, at):
            log.warning("%s is already tagged noinline; skipping", span.name)
            continue
        edits.append(at)
    out = source_text
    for at in sorted(set(edits), reverse=True):
        out = out[:at] + NOINLINE_TAG + " " + out[at:]
    return out


def _preceded_by_tag(text: str, at: int) -> bool:
    return text[:at].rstrip().endswith(NOINLINE_TAG)


def strip_noinline_tags(text: str) -> str:
    return text.replace(NOINLINE_TAG + " ", "")


def tag_functions(source_text: str, names: Iterable[str]) -> str:
    return insert_noinline_tags(source_text, locate_function_definitions(source_text, names))
