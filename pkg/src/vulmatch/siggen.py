"""Binary-level vulnerability and patch signatures.

Source patch sites are projected onto the vulnerable and patched binaries
through their line maps. Only instructions that map to patched source lines
(plus the CFG context around them) enter a signature; blocks that changed
between the binaries without mapping to a patched line are ignored.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, NamedTuple, Sequence, Union

from .binmodel import BinaryFunction, Instruction, SourceLine, block_key, map_lines_to_instructions, normalized_text
from .diffcore import PatchSite, SiteKind, diff_sites, line_translation
from .errors import NoCounterpart, NoLeadingBlock, NoMappedInstructions, SignatureEmpty, SignatureError

Block = tuple[str, ...]


class SignatureKind(enum.Enum):
    ADD = "add"
    DELETE = "delete"
    CHANGE_ONE_BLOCK = "change_one_block"
    CHANGE_MANY_BLOCK = "change_many_block"


@dataclass(frozen=True)
class ParentsChildren:
    parent: Block
    children: tuple[Block, ...]
    origin: tuple[str, ...] = ()  # source block ids: parent first, then children

    def __post_init__(self) -> None:
        if not self.parent or not self.children or not all(self.children):
            raise ValueError("parent and every child must be non-empty")

    @property
    def blocks(self) -> tuple[Block, ...]:
        return (self.parent, *self.children)

    @property
    def total(self) -> int:
        return sum(len(b) for b in self.blocks)


@dataclass(frozen=True)
class BlockList:
    blocks: tuple[Block, ...]
    origin: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.blocks or not all(self.blocks):
            raise ValueError("a block list needs non-empty blocks")

    @property
    def total(self) -> int:
        return sum(len(b) for b in self.blocks)


Structure = Union[ParentsChildren, BlockList]


@dataclass(frozen=True)
class Signature:
    cve_id: str
    function_name: str
    kind: SignatureKind
    structures: tuple[Structure, ...]
    patch_signature: BlockList | None = None
    ordinal: int = 0

    def __post_init__(self) -> None:
        if not self.structures:
            raise ValueError("signature needs at least one structure")
        if self.kind is SignatureKind.DELETE:
            if self.patch_signature is not None:
                raise ValueError("delete signatures carry no patch signature")
            if not all(isinstance(s, BlockList) for s in self.structures):
                raise ValueError("delete signatures consist of block lists")
        if self.kind is SignatureKind.ADD and not all(isinstance(s, ParentsChildren) for s in self.structures):
            raise ValueError("add signatures consist of parents-children structures")

    @property
    def total_instructions(self) -> int:
        return sum(s.total for s in self.structures)


class AddedBlocks(NamedTuple):
    added: frozenset[str]
    modified: frozenset[str]


@dataclass(frozen=True)
class AddBatch:
    block_ids: frozenset[str]

    @property
    def ordered(self) -> tuple[str, ...]:
        return tuple(sorted(self.block_ids, key=block_key))


@dataclass
class GenerationResult:
    signatures: list[Signature]
    diagnostics: list[str] = field(default_factory=list)


# --------------------------------------------------------------------------
# helpers


def resolve_source_file(func: BinaryFunction, hint: str | None = None) -> str | None:
    """Pick the line-map file name that patch line numbers refer to."""
    files = func.source_files
    if not files:
        return hint
    if hint is not None:
        if hint in files:
            return hint
        base = os.path.basename(hint)
        same = sorted(f for f in files if os.path.basename(f) == base)
        if len(same) == 1:
            return same[0]
    return min(files, key=lambda f: (-files[f], f))


def _site_lines(sites: Iterable[PatchSite], side: str, file: str | None) -> set[SourceLine]:
    out: set[SourceLine] = set()
    for s in sites:
        for n, _ in (s.old_lines if side == "old" else s.new_lines):
            out.add((file or "", n))
    return out


def _norm(insns: Iterable[Instruction]) -> Block:
    return tuple(normalized_text(i) for i in insns)


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _vocabulary(func: BinaryFunction) -> set[str]:
    return {t for block in func.normalized.values() for t in block}


def _patch_blocks(groups: Iterable[tuple[str, Sequence[Instruction]]], vulnerable: BinaryFunction) -> BlockList | None:
    """Keep only instructions with no equal normalized instruction in the vulnerable function."""
    vocab = _vocabulary(vulnerable)
    blocks: list[Block] = []
    origin: list[str] = []
    for bid, insns in groups:
        kept = tuple(t for t in _norm(insns) if t not in vocab)
        if kept:
            blocks.append(kept)
            origin.append(bid)
    return BlockList(tuple(blocks), tuple(origin)) if blocks else None


# --------------------------------------------------------------------------
# add type


def find_added_blocks(
    patched: BinaryFunction, add_sites: Sequence[PatchSite], source_file: str | None = None
) -> AddedBlocks:
    """Split blocks touched by added lines into fully added and mixed ("modified")."""
    file = resolve_source_file(patched, source_file)
    wanted = _site_lines(add_sites, "new", file)
    added, modified = set(), set()
    for bid in patched.block_ids:
        has_added = has_other = False
        for insn in patched.block(bid).instructions:
            lines = patched.lines_at.get(insn.address)
            if not lines:
                continue
            if lines & wanted:
                has_added = True
            else:
                has_other = True
        if has_added:
            (modified if has_other else added).add(bid)
    if not added and not modified:
        raise NoMappedInstructions("no added source line maps to an instruction")
    return AddedBlocks(frozenset(added), frozenset(modified))


def find_add_batches(patched: BinaryFunction, added: Iterable[str]) -> list[AddBatch]:
    """Connected components of the added blocks, edges taken undirected."""
    members = set(added)
    parent = {b: b for b in members}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for b in members:
        for s in patched.block(b).successors:
            if s in members:
                ra, rb = find(b), find(s)
                if ra != rb:
                    parent[max(ra, rb, key=block_key)] = min(ra, rb, key=block_key)
    groups: dict[str, set[str]] = {}
    for b in members:
        groups.setdefault(find(b), set()).add(b)
    batches = [AddBatch(frozenset(g)) for g in groups.values()]
    return sorted(batches, key=lambda bt: block_key(bt.ordered[0]))


def find_leading_blocks(
    patched: BinaryFunction, batch: AddBatch, added: Iterable[str] | None = None
) -> list[str]:
    """Blocks outside the batch (and outside ``added``) with an edge into it."""
    excluded = set(batch.block_ids) | set(added or ())
    leads = {p for b in batch.block_ids for p in patched.predecessors(b) if p not in excluded}
    if not leads:
        raise NoLeadingBlock(f"batch {list(batch.ordered)} has no unchanged predecessor")
    return sorted(leads, key=block_key)


def find_counterpart_block(
    vulnerable: BinaryFunction,
    patched: BinaryFunction,
    leading_id: str,
    translation: dict[int, int] | None = None,
    source_file: str | None = None,
) -> str:
    """Vulnerable block corresponding to a patched leading block.

    Source-line sets are compared by Jaccard overlap; patched-side line
    numbers of the patched file are first carried back to old numbering with
    ``translation`` (lines without an old counterpart are dropped). Falls back
    to instruction LCS when no line overlaps.
    """
    new_file = resolve_source_file(patched, source_file)
    old_file = resolve_source_file(vulnerable, source_file)
    lead: set[SourceLine] = set()
    for f, n in patched.block_lines(leading_id):
        if f == new_file:
            if translation is not None:
                if n not in translation:
                    continue
                n = translation[n]
            lead.add((old_file or f, n))
        else:
            lead.add((f, n))

    best_id, best = None, Fraction(0)
    if lead:
        for bid in vulnerable.block_ids:
            cand = vulnerable.block_lines(bid)
            union = len(lead | cand)
            score = Fraction(len(lead & cand), union) if union else Fraction(0)
            if score > best:
                best_id, best = bid, score
    if best_id is not None:
        return best_id

    ref = patched.normalized[leading_id]
    best_len = 0
    for bid in vulnerable.block_ids:
        n = _lcs_len(ref, vulnerable.normalized[bid])
        if n > best_len:
            best_id, best_len = bid, n
    if best_id is None:
        raise NoCounterpart(f"no vulnerable block corresponds to leading block {leading_id!r}")
    return best_id


def _context_structure(vulnerable: BinaryFunction, anchor: str) -> ParentsChildren:
    succ = [s for s in vulnerable.successors(anchor) if s != anchor]
    if succ:
        return ParentsChildren(
            vulnerable.normalized[anchor],
            tuple(vulnerable.normalized[s] for s in succ),
            (anchor, *succ),
        )
    # a block that ends the function: anchor it as the child of its parents
    preds = [p for p in vulnerable.predecessors(anchor) if p != anchor]
    if preds:
        p = preds[0]
        return ParentsChildren(vulnerable.normalized[p], (vulnerable.normalized[anchor],), (p, anchor))
    raise SignatureError(f"block {anchor!r} has no CFG neighbours to form a structure")


def build_add_signature(
    vulnerable: BinaryFunction,
    patched: BinaryFunction,
    add_sites: Sequence[PatchSite],
    cve_id: str,
    *,
    translation: dict[int, int] | None = None,
    source_file: str | None = None,
    function_name: str | None = None,
    diagnostics: list[str] | None = None,
) -> Signature:
    diag = diagnostics if diagnostics is not None else []
    if not add_sites:
        raise NoMappedInstructions("no add sites")
    file = resolve_source_file(patched, source_file)
    touched = find_added_blocks(patched, add_sites, source_file)
    batches = find_add_batches(patched, touched.added)

    anchors: list[str] = []
    for batch in batches:
        try:
            leads = find_leading_blocks(patched, batch, touched.added)
        except NoLeadingBlock as exc:
            diag.append(f"add: {exc}")
            continue
        for lead in leads:
            try:
                anchors.append(find_counterpart_block(vulnerable, patched, lead, translation, source_file))
            except NoCounterpart as exc:
                diag.append(f"add: {exc}")
    if not batches:
        # added lines only landed inside mixed blocks: anchor on those directly
        for bid in sorted(touched.modified, key=block_key):
            try:
                anchors.append(find_counterpart_block(vulnerable, patched, bid, translation, source_file))
            except NoCounterpart as exc:
                diag.append(f"add: {exc}")

    structures: list[ParentsChildren] = []
    seen: set[str] = set()
    for anchor in anchors:
        if anchor in seen:
            continue
        seen.add(anchor)
        try:
            structures.append(_context_structure(vulnerable, anchor))
        except SignatureError as exc:
            diag.append(f"add: {exc}")
    if not structures:
        raise SignatureEmpty("add: no parents-children structure could be built")

    wanted = _site_lines(add_sites, "new", file)
    groups: list[tuple[str, list[Instruction]]] = []
    for batch in batches:
        for bid in batch.ordered:
            groups.append((bid, list(patched.block(bid).instructions)))
    for bid in sorted(touched.modified, key=block_key):
        insns = [i for i in patched.block(bid).instructions if patched.lines_at.get(i.address, frozenset()) & wanted]
        groups.append((bid, insns))
    return Signature(
        cve_id,
        function_name or vulnerable.name,
        SignatureKind.ADD,
        tuple(structures),
        _patch_blocks(groups, vulnerable),
    )


# --------------------------------------------------------------------------
# delete type


def build_delete_signature(
    vulnerable: BinaryFunction,
    delete_sites: Sequence[PatchSite],
    cve_id: str,
    *,
    source_file: str | None = None,
    function_name: str | None = None,
) -> Signature:
    file = resolve_source_file(vulnerable, source_file)
    mapped = map_lines_to_instructions(vulnerable, _site_lines(delete_sites, "old", file))
    if not mapped:
        raise NoMappedInstructions("no deleted source line maps to an instruction")
    ids = sorted(mapped, key=block_key)
    structure = BlockList(tuple(_norm(mapped[b]) for b in ids), tuple(ids))
    return Signature(cve_id, function_name or vulnerable.name, SignatureKind.DELETE, (structure,))


# --------------------------------------------------------------------------
# change type


def build_change_signature(
    vulnerable: BinaryFunction,
    patched: BinaryFunction,
    change_sites: Sequence[PatchSite],
    cve_id: str,
    *,
    source_file: str | None = None,
    function_name: str | None = None,
) -> Signature:
    old_file = resolve_source_file(vulnerable, source_file)
    mapped = map_lines_to_instructions(vulnerable, _site_lines(change_sites, "old", old_file))
    if not mapped:
        raise NoMappedInstructions("no changed source line maps to an instruction")
    changed = sorted(mapped, key=block_key)
    norm = vulnerable.normalized
    structures: list[Structure] = []

    if len(changed) == 1:
        kind = SignatureKind.CHANGE_ONE_BLOCK
        b = changed[0]
        preds = [p for p in vulnerable.predecessors(b) if p != b]
        succs = [s for s in vulnerable.successors(b) if s != b]
        if preds:
            structures = [ParentsChildren(norm[p], (norm[b],), (p, b)) for p in preds]
        elif succs:
            structures = [ParentsChildren(norm[b], tuple(norm[s] for s in succs), (b, *succs))]
        else:
            structures = [BlockList((_norm(mapped[b]),), (b,))]
    else:
        kind = SignatureKind.CHANGE_MANY_BLOCK
        members = set(changed)
        linked: set[str] = set()
        for u in changed:
            for v in vulnerable.successors(u):
                if v in members and v != u:
                    structures.append(ParentsChildren(norm[u], (norm[v],), (u, v)))
                    linked.update((u, v))
        lone = [b for b in changed if b not in linked]
        if lone:
            structures.append(BlockList(tuple(_norm(mapped[b]) for b in lone), tuple(lone)))

    new_file = resolve_source_file(patched, source_file)
    new_mapped = map_lines_to_instructions(patched, _site_lines(change_sites, "new", new_file))
    patch = _patch_blocks(((b, new_mapped[b]) for b in sorted(new_mapped, key=block_key)), vulnerable)
    return Signature(cve_id, function_name or vulnerable.name, kind, tuple(structures), patch)


# --------------------------------------------------------------------------
# composition


def signatures_from_sites(
    vulnerable: BinaryFunction,
    patched: BinaryFunction,
    sites: Sequence[PatchSite],
    cve_id: str,
    *,
    new_length: int | None = None,
    source_file: str | None = None,
    function_name: str | None = None,
) -> GenerationResult:
    result = GenerationResult([])
    if not sites:
        result.diagnostics.append("no patch sites")
        return result
    by_kind = {k: [s for s in sites if s.kind is k] for k in SiteKind}
    if new_length is None:
        new_length = max((e.line for e in patched.line_map), default=0)
        new_length = max([new_length, *(n for s in sites for n, _ in s.new_lines)])
    translation = line_translation(sites, new_length)
    name = function_name or vulnerable.name

    jobs = [
        (SiteKind.ADD, lambda: build_add_signature(
            vulnerable, patched, by_kind[SiteKind.ADD], cve_id, translation=translation,
            source_file=source_file, function_name=name, diagnostics=result.diagnostics)),
        (SiteKind.DELETE, lambda: build_delete_signature(
            vulnerable, by_kind[SiteKind.DELETE], cve_id, source_file=source_file, function_name=name)),
        (SiteKind.CHANGE, lambda: build_change_signature(
            vulnerable, patched, by_kind[SiteKind.CHANGE], cve_id, source_file=source_file, function_name=name)),
    ]
    for kind, build in jobs:
        if not by_kind[kind]:
            continue
        try:
            result.signatures.append(build())
        except SignatureError as exc:
            result.diagnostics.append(f"{kind.value}: {type(exc).__name__}: {exc}")
    return result


def generate_signatures(
    vulnerable: BinaryFunction,
    patched: BinaryFunction,
    old_src: str | Sequence[str],
    new_src: str | Sequence[str],
    cve_id: str,
    *,
    source_file: str | None = None,
    function_name: str | None = None,
) -> GenerationResult:
    """Diff the two sources and build Add, Delete and Change signatures (in that order)."""
    old = old_src.splitlines() if isinstance(old_src, str) else list(old_src)
    new = new_src.splitlines() if isinstance(new_src, str) else list(new_src)
    sites = diff_sites(old, new)
    return signatures_from_sites(
        vulnerable, patched, sites, cve_id,
        new_length=len(new), source_file=source_file, function_name=function_name,
    )

