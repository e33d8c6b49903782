"""Line diffing and patch-site classification."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Sequence

from .errors import DiffParseError, ScriptMismatch


class Op(enum.Enum):
    EQUAL = "equal"
    DELETE = "delete"
    INSERT = "insert"


@dataclass(frozen=True)
class Run:
    op: Op
    count: int


@dataclass(frozen=True)
class EditScript:
    runs: tuple[Run, ...]

    @property
    def old_length(self) -> int:
        return sum(r.count for r in self.runs if r.op is not Op.INSERT)

    @property
    def new_length(self) -> int:
        return sum(r.count for r in self.runs if r.op is not Op.DELETE)

    @property
    def cost(self) -> int:
        return sum(r.count for r in self.runs if r.op is not Op.EQUAL)

    def apply(self, old: Sequence[str], new: Sequence[str]) -> list[str]:
        """Replay against ``old``; inserted lines are drawn from ``new``."""
        out: list[str] = []
        i = j = 0
        for r in self.runs:
            if r.op is Op.EQUAL:
                out.extend(old[i:i + r.count])
                i += r.count
                j += r.count
            elif r.op is Op.DELETE:
                i += r.count
            else:
                out.extend(new[j:j + r.count])
                j += r.count
        return out


class SiteKind(enum.Enum):
    ADD = "add"
    DELETE = "delete"
    CHANGE = "change"


@dataclass(frozen=True)
class PatchSite:
    kind: SiteKind
    old_lines: tuple[tuple[int, str], ...]
    new_lines: tuple[tuple[int, str], ...]

    def __post_init__(self) -> None:
        ok = {
            SiteKind.ADD: not self.old_lines and bool(self.new_lines),
            SiteKind.DELETE: bool(self.old_lines) and not self.new_lines,
            SiteKind.CHANGE: bool(self.old_lines) and bool(self.new_lines),
        }[self.kind]
        if not ok:
            raise ValueError(f"inconsistent {self.kind.value} site")

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "old": [{"line": n, "text": t} for n, t in self.old_lines],
            "new": [{"line": n, "text": t} for n, t in self.new_lines],
        }


def _myers_moves(a: Sequence[str], b: Sequence[str]) -> list[Op]:
    n, m = len(a), len(b)
    maxd = n + m
    v = {1: 0}
    trace: list[dict[int, int]] = []
    for d in range(maxd + 1):
        trace.append(dict(v))
        for k in range(-d, d + 1, 2):
            # step down (insert) only when forced or strictly further along;
            # otherwise step right (delete) so deletions come first
            if k == -d or (k != d and v[k - 1] < v[k + 1]):
                x = v[k + 1]
            else:
                x = v[k - 1] + 1
            y = x - k
            while x < n and y < m and a[x] == b[y]:
                x += 1
                y += 1
            v[k] = x
            if x >= n and y >= m:
                return _backtrack(trace, n, m)
    raise AssertionError("unreachable")


def _backtrack(trace: list[dict[int, int]], n: int, m: int) -> list[Op]:
    moves: list[Op] = []
    x, y = n, m
    for d in range(len(trace) - 1, -1, -1):
        v = trace[d]
        k = x - y
        if k == -d or (k != d and v.get(k - 1, -1) < v.get(k + 1, -1)):
            prev_k = k + 1
        else:
            prev_k = k - 1
        prev_x = v.get(prev_k, 0)
        prev_y = prev_x - prev_k
        while x > prev_x and y > prev_y:
            moves.append(Op.EQUAL)
            x -= 1
            y -= 1
        if d > 0:
            moves.append(Op.INSERT if x == prev_x else Op.DELETE)
        x, y = prev_x, prev_y
    moves.reverse()
    return moves


def _compress(moves: list[Op]) -> EditScript:
    runs: list[Run] = []
    for op in moves:
        if runs and runs[-1].op is op:
            runs[-1] = Run(op, runs[-1].count + 1)
        else:
            runs.append(Run(op, 1))
    return EditScript(tuple(runs))


def _reorder_changes(moves: list[Op]) -> list[Op]:
    # within one non-equal stretch put every delete before every insert;
    # the edit cost is unchanged
    out: list[Op] = []
    i = 0
    while i < len(moves):
        if moves[i] is Op.EQUAL:
            out.append(moves[i])
            i += 1
            continue
        j = i
        while j < len(moves) and moves[j] is not Op.EQUAL:
            j += 1
        chunk = moves[i:j]
        out.extend([Op.DELETE] * chunk.count(Op.DELETE))
        out.extend([Op.INSERT] * chunk.count(Op.INSERT))
        i = j
    return out


def diff_lines(old: Sequence[str], new: Sequence[str]) -> EditScript:
    """Minimal line-level edit script (Myers O(ND)).

    Lines compare exactly, whitespace included. Within a changed stretch the
    deletions are emitted before the insertions.
    """
    if not old and not new:
        return EditScript(())
    return _compress(_reorder_changes(_myers_moves(old, new)))


def classify_sites(script: EditScript, old: Sequence[str], new: Sequence[str]) -> list[PatchSite]:
    if script.old_length != len(old) or script.new_length != len(new):
        raise ScriptMismatch(
            f"script covers {script.old_length}/{script.new_length} lines, "
            f"inputs have {len(old)}/{len(new)}"
        )
    sites: list[PatchSite] = []
    i = j = 0
    pend_old: list[tuple[int, str]] = []
    pend_new: list[tuple[int, str]] = []

    def flush() -> None:
        if pend_old or pend_new:
            kind = SiteKind.CHANGE if pend_old and pend_new else (SiteKind.DELETE if pend_old else SiteKind.ADD)
            sites.append(PatchSite(kind, tuple(pend_old), tuple(pend_new)))
            pend_old.clear()
            pend_new.clear()

    for r in script.runs:
        if r.op is Op.EQUAL:
            flush()
            i += r.count
            j += r.count
        elif r.op is Op.DELETE:
            pend_old.extend((i + k + 1, old[i + k]) for k in range(r.count))
            i += r.count
        else:
            pend_new.extend((j + k + 1, new[j + k]) for k in range(r.count))
            j += r.count
    flush()
    return sites


def diff_sites(old: Sequence[str], new: Sequence[str]) -> list[PatchSite]:
    return classify_sites(diff_lines(old, new), old, new)


_HUNK = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")


def parse_unified_diff(text: str) -> list[PatchSite]:
    """Patch sites from a single-file unified diff (``diff -u`` / ``git diff``)."""
    sites: list[PatchSite] = []
    lines = text.splitlines()
    idx = 0
    files = 0
    while idx < len(lines):
        line = lines[idx]
        if line.startswith("--- ") and idx + 1 < len(lines) and lines[idx + 1].startswith("+++ "):
            files += 1
            if files > 1:
                raise DiffParseError("unified diff touches more than one file")
            idx += 2
            continue
        m = _HUNK.match(line)
        if not m:
            idx += 1
            continue
        old_no, new_no = int(m.group(1)), int(m.group(3))
        old_left = int(m.group(2)) if m.group(2) is not None else 1
        new_left = int(m.group(4)) if m.group(4) is not None else 1
        # a zero-length side names the line *before* the hunk
        if old_left == 0:
            old_no += 1
        if new_left == 0:
            new_no += 1
        idx += 1
        pend_old: list[tuple[int, str]] = []
        pend_new: list[tuple[int, str]] = []

        def flush() -> None:
            if pend_old or pend_new:
                kind = SiteKind.CHANGE if pend_old and pend_new else (SiteKind.DELETE if pend_old else SiteKind.ADD)
                sites.append(PatchSite(kind, tuple(pend_old), tuple(pend_new)))
                pend_old.clear()
                pend_new.clear()

        while idx < len(lines) and (old_left > 0 or new_left > 0):
            body = lines[idx]
            tag, content = body[:1], body[1:]
            if body.startswith("\\"):
                idx += 1
                continue
            if tag == " " or body == "":
                flush()
                old_no += 1
                new_no += 1
                old_left -= 1
                new_left -= 1
            elif tag == "-":
                pend_old.append((old_no, content))
                old_no += 1
                old_left -= 1
            elif tag == "+":
                pend_new.append((new_no, content))
                new_no += 1
                new_left -= 1
            else:
                raise DiffParseError(f"line {idx + 1}: unexpected hunk line {body!r}")
            if old_left < 0 or new_left < 0:
                raise DiffParseError(f"line {idx + 1}: hunk longer than its header says")
            idx += 1
        if old_left > 0 or new_left > 0:
            raise DiffParseError("truncated hunk")
        flush()
    return sites


def line_translation(sites: Sequence[PatchSite], new_length: int) -> dict[int, int]:
    """Map every unchanged new-side line number to its old-side number."""
    out: dict[int, int] = {}
    delta = 0  # new - old for the stretch currently being walked
    new_pos = 1
    for site in sites:
        if site.old_lines:
            start_new = site.old_lines[0][0] + delta
        else:
            start_new = site.new_lines[0][0]
        for n in range(new_pos, start_new):
            out[n] = n - delta
        delta += len(site.new_lines) - len(site.old_lines)
        new_pos = start_new + len(site.new_lines)
    for n in range(new_pos, new_length + 1):
        out[n] = n - delta
    return out
