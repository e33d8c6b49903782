"""Signature matching and the vulnerability-existence score.

Instruction equality is equality of normalized text. Per-block similarity is
the LCS length of the two instruction sequences. LCS lengths of one signature
block against every block of a query function are computed in one pass with
the bit-parallel LCS recurrence, each query block occupying its own lane of a
big integer, separated by a guard bit that swallows carries.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Sequence

from .binmodel import BinaryFunction, Instruction, normalized_text
from .siggen import Block, BlockList, ParentsChildren, Signature, SignatureKind, Structure

DEFAULT_PATCH_THRESHOLD = 0.8
EXACT_ASSIGNMENT_LIMIT = 6


@dataclass(frozen=True)
class AlignedPair:
    block: int  # block index inside the structure (parents-children: 0 is the parent)
    index: int  # instruction index inside that block
    query_block: str
    address: int
    text: str


@dataclass(frozen=True)
class StructureMatch:
    matched: int
    total: int
    alignment: tuple[AlignedPair, ...] | None = ()  # None: not computed
    query_blocks: tuple[str | None, ...] = ()
    per_block: tuple[int, ...] = ()  # matched count per signature block

    def __post_init__(self) -> None:
        if not 0 <= self.matched <= self.total:
            raise ValueError("matched must lie in [0, total]")
        if self.alignment is not None and len(self.alignment) != self.matched:
            raise ValueError("alignment length must equal matched")


@dataclass(frozen=True)
class FunctionMatchResult:
    cve_id: str
    function_name: str
    ordinal: int
    kind: SignatureKind
    query_binary: str
    query_name: str
    patched: bool
    structure_matches: tuple[StructureMatch, ...]
    patch_match: StructureMatch | None = None

    @property
    def matched(self) -> int:
        return sum(m.matched for m in self.structure_matches)

    @property
    def total(self) -> int:
        return sum(m.total for m in self.structure_matches)

    @property
    def sim_fraction(self) -> Fraction:
        if self.patched or self.total == 0:
            return Fraction(0)
        return Fraction(self.matched, self.total)

    @property
    def sim(self) -> float:
        return float(self.sim_fraction)


# --------------------------------------------------------------------------
# LCS primitives


def _as_text(block: Sequence[str | Instruction]) -> tuple[str, ...]:
    return tuple(x if isinstance(x, str) else normalized_text(x) for x in block)


def lcs_table(a: Sequence[str], b: Sequence[str]) -> list[list[int]]:
    """Suffix LCS table: ``t[i][j]`` is the LCS length of ``a[i:]`` and ``b[j:]``."""
    n, m = len(a), len(b)
    t = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row, nxt = t[i], t[i + 1]
        ai = a[i]
        for j in range(m - 1, -1, -1):
            row[j] = nxt[j + 1] + 1 if ai == b[j] else max(nxt[j], row[j + 1])
    return t


def lcs_alignment(a: Sequence[str], b: Sequence[str]) -> list[tuple[int, int]]:
    """Lexicographically earliest optimal LCS alignment as (i, j) index pairs."""
    t = lcs_table(a, b)
    pairs: list[tuple[int, int]] = []
    i = j = 0
    rem = t[0][0]
    while rem:
        hit = next(
            (i2, j2)
            for i2 in range(i, len(a))
            for j2 in range(j, len(b))
            if a[i2] == b[j2] and t[i2 + 1][j2 + 1] == rem - 1
        )
        pairs.append(hit)
        i, j = hit[0] + 1, hit[1] + 1
        rem -= 1
    return pairs


def block_similarity(
    sig_block: Sequence[str | Instruction], query_block: Sequence[str | Instruction]
) -> tuple[int, list[tuple[int, int]]]:
    a, b = _as_text(sig_block), _as_text(query_block)
    pairs = lcs_alignment(a, b)
    return len(pairs), pairs


class QueryIndex:
    """Per-query-function precomputation shared by every signature matched against it."""

    def __init__(self, func: BinaryFunction):
        self.func = func
        self.ids: tuple[str, ...] = func.block_ids
        self.position = {bid: k for k, bid in enumerate(self.ids)}
        self.texts = [func.normalized[bid] for bid in self.ids]
        self.succ_pos = [
            tuple(self.position[s] for s in func.successors(bid)) for bid in self.ids
        ]
        masks: dict[str, int] = {}
        lanes: list[tuple[int, int]] = []
        full = 0
        off = 0
        for text in self.texts:
            n = len(text)
            lanes.append((off, (1 << n) - 1))
            full |= ((1 << n) - 1) << off
            for k, sym in enumerate(text):
                masks[sym] = masks.get(sym, 0) | (1 << (off + k))
            off += n + 1  # one guard bit per lane
        self.masks = masks
        self.lanes = lanes
        self.full = full
        self._cache: dict[Block, list[int]] = {}

    def lcs_all(self, block: Block) -> list[int]:
        """LCS length of ``block`` against every query block (in ``ids`` order)."""
        hit = self._cache.get(block)
        if hit is not None:
            return hit
        v = self.full
        full = self.full
        masks = self.masks
        for sym in block:
            m = masks.get(sym)
            if m:
                u = v & m
                v = ((v + u) | (v - u)) & full
        out = [
            mask.bit_count() - ((v >> off) & mask).bit_count()
            for off, mask in self.lanes
        ]
        self._cache[block] = out
        return out

    def align(self, sig_index: int, block: Block, qpos: int) -> list[AlignedPair]:
        qid = self.ids[qpos]
        insns = self.func.block(qid).instructions
        return [
            AlignedPair(sig_index, i, qid, insns[j].address, insns[j].raw_text)
            for i, j in lcs_alignment(block, self.texts[qpos])
        ]


def _index(query: BinaryFunction | QueryIndex) -> QueryIndex:
    return query if isinstance(query, QueryIndex) else QueryIndex(query)


# --------------------------------------------------------------------------
# structure matching


def match_block_list(
    structure: BlockList, query: BinaryFunction | QueryIndex, align: bool = True
) -> StructureMatch:
    """Each signature block takes its best query block; query blocks may be reused."""
    qi = _index(query)
    matched = 0
    alignment: list[AlignedPair] = []
    per_block: list[int] = []
    chosen: list[str | None] = []
    for k, block in enumerate(structure.blocks):
        sims = qi.lcs_all(block)
        best_pos, best = None, 0
        for pos, s in enumerate(sims):
            if s > best:
                best_pos, best = pos, s
        matched += best
        per_block.append(best)
        if best_pos is None:
            chosen.append(None)
        else:
            chosen.append(qi.ids[best_pos])
            if align:
                alignment.extend(qi.align(k, block, best_pos))
    return StructureMatch(
        matched, structure.total, tuple(alignment) if align else None, tuple(chosen), tuple(per_block)
    )


def _assign_exact(sims: list[list[int]]) -> tuple[int, tuple[int | None, ...]]:
    """Best injective partial assignment of rows (children) to columns (successors)."""
    k = len(sims)
    ncols = len(sims[0]) if sims else 0
    row_max = [max(r, default=0) for r in sims]
    tail = [0] * (k + 1)
    for i in range(k - 1, -1, -1):
        tail[i] = tail[i + 1] + row_max[i]
    best = [-1, ()]
    used = [False] * ncols
    pick: list[int | None] = []

    def go(i: int, acc: int) -> None:
        if acc + tail[i] <= best[0]:
            return
        if i == k:
            best[0], best[1] = acc, tuple(pick)
            return
        row = sims[i]
        for j in range(ncols):
            if not used[j]:
                used[j] = True
                pick.append(j)
                go(i + 1, acc + row[j])
                pick.pop()
                used[j] = False
        pick.append(None)
        go(i + 1, acc)
        pick.pop()

    go(0, 0)
    return best[0], best[1]


def _assign_greedy(sims: list[list[int]]) -> tuple[int, tuple[int | None, ...]]:
    pairs = sorted(
        ((s, i, j) for i, row in enumerate(sims) for j, s in enumerate(row)),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    pick: list[int | None] = [None] * len(sims)
    taken: set[int] = set()
    total = 0
    for s, i, j in pairs:
        if pick[i] is None and j not in taken:
            pick[i] = j
            taken.add(j)
            total += s
    return total, tuple(pick)


def match_parents_children(
    structure: ParentsChildren, query: BinaryFunction | QueryIndex, align: bool = True
) -> StructureMatch:
    """Best (parent block, injective child -> successor assignment) in the query."""
    qi = _index(query)
    parent_sims = qi.lcs_all(structure.parent)
    child_sims = [qi.lcs_all(c) for c in structure.children]
    child_cap = sum(len(c) for c in structure.children)
    exact = len(structure.children) <= EXACT_ASSIGNMENT_LIMIT

    best_score, best_p, best_pick = -1, None, ()
    for p, ps in enumerate(parent_sims):
        if ps + child_cap <= best_score:
            continue
        succ = qi.succ_pos[p]
        if succ:
            sims = [[row[s] for s in succ] for row in child_sims]
            cs, pick = _assign_exact(sims) if exact else _assign_greedy(sims)
            pick = tuple(None if j is None else succ[j] for j in pick)
        else:
            cs, pick = 0, (None,) * len(child_sims)
        if ps + cs > best_score:
            best_score, best_p, best_pick = ps + cs, p, pick

    assert best_p is not None
    alignment = qi.align(0, structure.parent, best_p) if align else []
    chosen: list[str | None] = [qi.ids[best_p]]
    per_block = [parent_sims[best_p]]
    for c, (block, q) in enumerate(zip(structure.children, best_pick)):
        if q is None:
            chosen.append(None)
            per_block.append(0)
        else:
            chosen.append(qi.ids[q])
            per_block.append(child_sims[c][q])
            if align:
                alignment.extend(qi.align(c + 1, block, q))
    return StructureMatch(
        best_score, structure.total, tuple(alignment) if align else None, tuple(chosen), tuple(per_block)
    )


def match_structure(structure: Structure, query: BinaryFunction | QueryIndex, align: bool = True) -> StructureMatch:
    if isinstance(structure, ParentsChildren):
        return match_parents_children(structure, query, align)
    return match_block_list(structure, query, align)


# --------------------------------------------------------------------------
# verdicts and scores


def _meets(matched: int, size: int, threshold: float) -> bool:
    return Fraction(matched, size) >= Fraction(str(threshold))


def _patch_found(patch: StructureMatch, structure: BlockList, threshold: float) -> bool:
    return all(_meets(patch.per_block[k], len(b), threshold) for k, b in enumerate(structure.blocks))


def detect_patch(
    signature: Signature, query: BinaryFunction | QueryIndex, threshold: float = DEFAULT_PATCH_THRESHOLD
) -> bool:
    """True iff every patch-signature block reaches ``threshold`` against its best query block."""
    if signature.patch_signature is None or signature.kind is SignatureKind.DELETE:
        return False
    pm = match_block_list(signature.patch_signature, query, align=False)
    return _patch_found(pm, signature.patch_signature, threshold)


def score_signature(
    signature: Signature,
    query: BinaryFunction | QueryIndex,
    threshold: float = DEFAULT_PATCH_THRESHOLD,
    align: bool = True,
) -> FunctionMatchResult:
    qi = _index(query)
    patch_match = None
    patched = False
    if signature.patch_signature is not None and signature.kind is not SignatureKind.DELETE:
        patch_match = match_block_list(signature.patch_signature, qi, align)
        patched = _patch_found(patch_match, signature.patch_signature, threshold)
    matches = tuple(match_structure(s, qi, align) for s in signature.structures)
    return FunctionMatchResult(
        signature.cve_id, signature.function_name, signature.ordinal, signature.kind,
        qi.func.binary_id, qi.func.name, patched, matches, patch_match,
    )


def aggregate(results: Sequence[FunctionMatchResult]) -> Fraction:
    """Instruction-weighted mean of signature scores; zero once any patch matched."""
    if not results or any(r.patched for r in results):
        return Fraction(0)
    weight = sum(r.total for r in results)
    return sum((r.total * r.sim_fraction for r in results), Fraction(0)) / weight


def score_cve(
    signatures: Sequence[Signature], query: BinaryFunction | QueryIndex, threshold: float = DEFAULT_PATCH_THRESHOLD
) -> float:
    if not signatures:
        raise ValueError("score_cve needs at least one signature")
    qi = _index(query)
    return float(aggregate([score_signature(s, qi, threshold, align=False) for s in signatures]))


# --------------------------------------------------------------------------
# ranking


@dataclass(frozen=True)
class RankEntry:
    query_binary: str
    query_name: str
    score: Fraction
    results: tuple[FunctionMatchResult, ...]
    query_index: int = -1  # position in the query list handed to rank_functions

    @property
    def patched(self) -> bool:
        return any(r.patched for r in self.results)


@dataclass
class Ranking:
    cve_id: str
    function_name: str
    entries: list[RankEntry] = field(default_factory=list)


def group_signatures(signatures: Iterable[Signature]) -> dict[tuple[str, str], list[Signature]]:
    groups: dict[tuple[str, str], list[Signature]] = {}
    for s in signatures:
        groups.setdefault((s.cve_id, s.function_name), []).append(s)
    return groups


def _score_chunk(
    groups: list[tuple[tuple[str, str], list[Signature]]],
    queries: list[BinaryFunction],
    threshold: float,
) -> list[list[RankEntry]]:
    """Rows are queries, columns are signature groups."""
    rows = []
    for q in queries:
        qi = QueryIndex(q)
        row = []
        for _, sigs in groups:
            results = tuple(score_signature(s, qi, threshold, align=False) for s in sigs)
            row.append(RankEntry(q.binary_id, q.name, aggregate(results), results))
        rows.append(row)
    return rows


def score_grid(
    groups: list[tuple[tuple[str, str], list[Signature]]],
    queries: Sequence[BinaryFunction],
    threshold: float = DEFAULT_PATCH_THRESHOLD,
    jobs: int = 1,
) -> list[list[RankEntry]]:
    """One row per query (input order), one column per signature group."""
    queries = list(queries)
    if jobs > 1 and len(queries) > 1:
        size = max(1, -(-len(queries) // (jobs * 4)))
        chunks = [queries[i:i + size] for i in range(0, len(queries), size)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = pool.map(_score_chunk, itertools.repeat(groups), chunks, itertools.repeat(threshold))
            return [row for part in parts for row in part]
    return _score_chunk(groups, queries, threshold)


def rank_functions(
    signatures: Iterable[Signature],
    queries: Sequence[BinaryFunction],
    threshold: float = DEFAULT_PATCH_THRESHOLD,
    jobs: int = 1,
) -> list[Ranking]:
    """Score every query function against every (CVE, function) signature group.

    Output is independent of ``jobs``: rows are reassembled in input order and
    each ranking is sorted by (score desc, function name, binary id).
    """
    groups = list(group_signatures(signatures).items())
    rows = score_grid(groups, queries, threshold, jobs)
    rankings = []
    for col, ((cve, fname), _) in enumerate(groups):
        entries = sorted(
            (replace(row[col], query_index=k) for k, row in enumerate(rows)),
            key=lambda e: (-e.score, e.query_name, e.query_binary, e.query_index),
        )
        rankings.append(Ranking(cve, fname, entries))
    return rankings


__all__ = [
    "AlignedPair", "StructureMatch", "FunctionMatchResult", "QueryIndex", "RankEntry", "Ranking",
    "block_similarity", "lcs_alignment", "match_block_list", "match_parents_children", "match_structure",
    "detect_patch", "score_signature", "score_grid", "score_cve", "aggregate", "rank_functions",
]
