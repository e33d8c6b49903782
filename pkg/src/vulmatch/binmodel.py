"""Interchange model for disassembled functions.

A function document looks like::

    {"schema": "vulmatch-func/1", "binary_id": "curl-7.64.1", "name": "f",
     "entry": "0",
     "blocks": [{"id": "0", "successors": ["1"],
                 "insns": [{"addr": "0x401000", "text": "push rbp"}]}],
     "line_map": [{"addr": "0x401000", "file": "lib/f.c", "line": 12}]}

Loaded functions are immutable; derived views (predecessors, normalized block
text, address -> source line lookups) are computed lazily and cached.
"""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping

from .errors import SchemaError, ValidationError

FUNC_SCHEMA = "vulmatch-func/1"
TARGET_TOKEN = "@tgt"

_PREFIXES = {"rep", "repe", "repz", "repne", "repnz", "lock", "notrack", "bnd", "data16"}
_BRANCHES = {
    "call", "loop", "loope", "loopne", "loopz", "loopnz", "jecxz", "jrcxz", "jcxz", "xbegin",
}
_ABS_TARGET = re.compile(r"^(?:0x[0-9a-f]+|[0-9a-f]+)(?:\s*<[^>]*>)?$")
_HEX_ADDR = re.compile(r"^0x[0-9a-fA-F]+$")
_WS = re.compile(r"\s+")

NormalizedInstruction = tuple[str, tuple[str, ...]]
SourceLine = tuple[str, int]


@dataclass(frozen=True)
class Instruction:
    address: int
    mnemonic: str
    operands: tuple[str, ...]
    raw_text: str

    @classmethod
    def parse(cls, address: int, text: str) -> "Instruction":
        mnemonic, operands = split_instruction_text(text)
        return cls(address, mnemonic, operands, text)


@dataclass(frozen=True)
class BasicBlock:
    id: str
    instructions: tuple[Instruction, ...]
    successors: tuple[str, ...]

    @property
    def start(self) -> int:
        return self.instructions[0].address

    @property
    def end(self) -> int:
        return self.instructions[-1].address


@dataclass(frozen=True)
class LineEntry:
    address: int
    file: str
    line: int


def block_key(block_id: str) -> tuple[int, int, str]:
    """Sort key for block ids: numeric ids numerically, then the rest lexically."""
    if block_id.isdigit():
        return (0, int(block_id), "")
    return (1, 0, block_id)


@dataclass(frozen=True, eq=False)
class BinaryFunction:
    name: str
    binary_id: str
    entry: str
    blocks: tuple[BasicBlock, ...]
    line_map: tuple[LineEntry, ...] = field(default=())

    @cached_property
    def block_map(self) -> dict[str, BasicBlock]:
        return {b.id: b for b in self.blocks}

    def block(self, block_id: str) -> BasicBlock:
        return self.block_map[block_id]

    @cached_property
    def block_ids(self) -> tuple[str, ...]:
        """Block ids in canonical (tie-breaking) order."""
        return tuple(sorted(self.block_map, key=block_key))

    @cached_property
    def predecessor_map(self) -> dict[str, tuple[str, ...]]:
        preds: dict[str, list[str]] = {b.id: [] for b in self.blocks}
        for b in self.blocks:
            for s in b.successors:
                preds[s].append(b.id)
        return {k: tuple(sorted(v, key=block_key)) for k, v in preds.items()}

    def predecessors(self, block_id: str) -> tuple[str, ...]:
        return self.predecessor_map[block_id]

    def successors(self, block_id: str) -> tuple[str, ...]:
        return tuple(sorted(self.block_map[block_id].successors, key=block_key))

    @cached_property
    def normalized(self) -> dict[str, tuple[str, ...]]:
        """Canonical normalized text of every instruction, per block."""
        return {b.id: tuple(normalized_text(i) for i in b.instructions) for b in self.blocks}

    @cached_property
    def lines_at(self) -> dict[int, frozenset[SourceLine]]:
        acc: dict[int, set[SourceLine]] = defaultdict(set)
        for e in self.line_map:
            acc[e.address].add((e.file, e.line))
        return {a: frozenset(s) for a, s in acc.items()}

    def block_lines(self, block_id: str) -> frozenset[SourceLine]:
        out: set[SourceLine] = set()
        for insn in self.block_map[block_id].instructions:
            out |= self.lines_at.get(insn.address, frozenset())
        return frozenset(out)

    @property
    def instruction_count(self) -> int:
        return sum(len(b.instructions) for b in self.blocks)

    @cached_property
    def source_files(self) -> dict[str, int]:
        counts: dict[str, int] = defaultdict(int)
        for e in self.line_map:
            counts[e.file] += 1
        return dict(counts)


# --------------------------------------------------------------------------
# instruction text handling


def _canon(s: str) -> str:
    return _WS.sub(" ", s).strip().lower()


def _split_operands(rest: str) -> list[str]:
    ops: list[str] = []
    depth = 0
    cur: list[str] = []
    for ch in rest:
        if ch in "[(":
            depth += 1
        elif ch in "])":
            depth = max(0, depth - 1)
        if ch == "," and depth == 0:
            ops.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    ops.append("".join(cur))
    return [o for o in (_canon(x) for x in ops) if o]


def split_instruction_text(text: str) -> tuple[str, tuple[str, ...]]:
    words = _canon(text).split(" ")
    head = []
    while words and words[0] in _PREFIXES and len(words) > 1:
        head.append(words.pop(0))
    if not words or not words[0]:
        return " ".join(head), ()
    head.append(words.pop(0))
    return " ".join(head), tuple(_split_operands(" ".join(words)))


def _is_branch(mnemonic: str) -> bool:
    m = mnemonic.split(" ")[-1]
    return m.startswith("j") or m in _BRANCHES


def normalize_instruction(instr: Instruction) -> NormalizedInstruction:
    """Return ``(mnemonic, operands)`` with direct branch/call targets masked.

    >>> normalize_instruction(Instruction.parse(0, "jmp 0x401050"))
    ('jmp', ('@tgt',))
    >>> normalize_instruction(Instruction.parse(0, "XOR EAX, EAX"))
    ('xor', ('eax', 'eax'))
    """
    mnemonic = _canon(instr.mnemonic)
    ops = tuple(_canon(o) for o in instr.operands)
    if _is_branch(mnemonic):
        ops = tuple(TARGET_TOKEN if _ABS_TARGET.match(o) else o for o in ops)
    return mnemonic, ops


def canonical_text(norm: NormalizedInstruction) -> str:
    mnemonic, ops = norm
    return f"{mnemonic} {', '.join(ops)}" if ops else mnemonic


def normalized_text(instr: Instruction) -> str:
    return canonical_text(normalize_instruction(instr))


# --------------------------------------------------------------------------
# loading


def _req(obj: Mapping[str, Any], key: str, typ: type, path: str) -> Any:
    if key not in obj:
        raise SchemaError(f"{path}.{key}" if path else key, "missing field")
    val = obj[key]
    if typ is int and isinstance(val, bool):
        raise SchemaError(f"{path}.{key}" if path else key, "expected integer")
    if not isinstance(val, typ):
        raise SchemaError(f"{path}.{key}" if path else key, f"expected {typ.__name__}")
    return val


def _addr(val: Any, path: str) -> int:
    if not isinstance(val, str) or not _HEX_ADDR.match(val):
        raise SchemaError(path, "address must be a hex string like '0x401000'")
    a = int(val, 16)
    if a >= 1 << 64:
        raise SchemaError(path, "address exceeds 64 bits")
    return a


def load_function(document: Any) -> BinaryFunction:
    """Validate a function document and build a :class:`BinaryFunction`."""
    if not isinstance(document, Mapping):
        raise SchemaError("$", "function document must be an object")
    schema = _req(document, "schema", str, "")
    if schema != FUNC_SCHEMA:
        raise SchemaError("schema", f"unsupported schema {schema!r}")
    binary_id = _req(document, "binary_id", str, "")
    name = _req(document, "name", str, "")
    if not name:
        raise SchemaError("name", "must be non-empty")
    entry = _req(document, "entry", str, "")
    raw_blocks = _req(document, "blocks", list, "")
    if not raw_blocks:
        raise SchemaError("blocks", "a function needs at least one block")

    blocks: list[BasicBlock] = []
    seen_ids: set[str] = set()
    for bi, rb in enumerate(raw_blocks):
        bpath = f"blocks[{bi}]"
        if not isinstance(rb, Mapping):
            raise SchemaError(bpath, "block must be an object")
        bid = _req(rb, "id", str, bpath)
        if bid in seen_ids:
            raise ValidationError(f"{bpath}: duplicate block id {bid!r}")
        seen_ids.add(bid)
        succ = _req(rb, "successors", list, bpath)
        for si, s in enumerate(succ):
            if not isinstance(s, str):
                raise SchemaError(f"{bpath}.successors[{si}]", "expected string")
        if len(set(succ)) != len(succ):
            raise ValidationError(f"{bpath}: duplicate successor ids")
        raw_insns = _req(rb, "insns", list, bpath)
        if not raw_insns:
            raise SchemaError(f"{bpath}.insns", "block must contain instructions")
        insns: list[Instruction] = []
        for ii, ri in enumerate(raw_insns):
            ipath = f"{bpath}.insns[{ii}]"
            if not isinstance(ri, Mapping):
                raise SchemaError(ipath, "instruction must be an object")
            addr = _addr(ri.get("addr"), f"{ipath}.addr")
            text = _req(ri, "text", str, ipath)
            insn = Instruction.parse(addr, text)
            if not insn.mnemonic:
                raise SchemaError(f"{ipath}.text", "empty instruction text")
            if insns and addr <= insns[-1].address:
                raise ValidationError(f"{ipath}: addresses must strictly increase within a block")
            insns.append(insn)
        blocks.append(BasicBlock(bid, tuple(insns), tuple(succ)))

    for b in blocks:
        for s in b.successors:
            if s not in seen_ids:
                raise ValidationError(f"block {b.id!r}: dangling successor {s!r}")
    if entry not in seen_ids:
        raise ValidationError(f"entry block {entry!r} does not exist")

    ordered = sorted(blocks, key=lambda b: b.start)
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.start <= prev.end:
            raise ValidationError(f"blocks {prev.id!r} and {cur.id!r} have overlapping address ranges")

    addresses = {i.address for b in blocks for i in b.instructions}
    raw_map = document.get("line_map", [])
    if not isinstance(raw_map, list):
        raise SchemaError("line_map", "expected list")
    entries: list[LineEntry] = []
    for li, rl in enumerate(raw_map):
        lpath = f"line_map[{li}]"
        if not isinstance(rl, Mapping):
            raise SchemaError(lpath, "line entry must be an object")
        addr = _addr(rl.get("addr"), f"{lpath}.addr")
        file = _req(rl, "file", str, lpath)
        line = _req(rl, "line", int, lpath)
        if line < 1:
            raise SchemaError(f"{lpath}.line", "line numbers are 1-based")
        if addr not in addresses:
            raise ValidationError(f"{lpath}: unmapped address {hex(addr)}")
        entries.append(LineEntry(addr, file, line))

    return BinaryFunction(name, binary_id, entry, tuple(blocks), tuple(entries))


def dump_function(func: BinaryFunction) -> dict[str, Any]:
    return {
        "schema": FUNC_SCHEMA,
        "binary_id": func.binary_id,
        "name": func.name,
        "entry": func.entry,
        "blocks": [
            {
                "id": b.id,
                "successors": list(b.successors),
                "insns": [{"addr": hex(i.address), "text": i.raw_text} for i in b.instructions],
            }
            for b in func.blocks
        ],
        "line_map": [{"addr": hex(e.address), "file": e.file, "line": e.line} for e in func.line_map],
    }


def map_lines_to_instructions(
    func: BinaryFunction, lines: Iterable[SourceLine]
) -> dict[str, list[Instruction]]:
    """Instructions whose line-map entry falls in ``lines``, grouped by block.

    Source lines without any line-map entry simply contribute nothing; one
    source line may land in several blocks.
    """
    wanted = set(lines)
    if not wanted:
        return {}
    out: dict[str, list[Instruction]] = {}
    for bid in func.block_ids:
        hits = [i for i in func.block(bid).instructions if func.lines_at.get(i.address, frozenset()) & wanted]
        if hits:
            out[bid] = hits
    return out
