"""Corpus metrics (top-1, mismatch) and the side-by-side match report."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational
from typing import Any, Iterable, Sequence

from .binmodel import BinaryFunction
from .errors import InputError, MissingSignatures
from .matcher import (
    DEFAULT_PATCH_THRESHOLD,
    AlignedPair,
    FunctionMatchResult,
    StructureMatch,
    score_grid,
    score_signature,
)
from .sigdb import SignatureDatabase
from .siggen import BlockList, ParentsChildren, Signature, SignatureKind

LOW_SCORE = Fraction(3, 5)


def _exact(x: float | Rational) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


@dataclass
class EvalCase:
    case_id: str
    cve_id: str
    function: str
    corpus: list[tuple[str, list[BinaryFunction]]]
    expected_binary: str

    def __post_init__(self) -> None:
        for label, funcs in self.corpus:
            if label == self.expected_binary and any(f.name == self.function for f in funcs):
                return
        raise InputError(
            f"case {self.case_id}: {self.function!r} not found in binary {self.expected_binary!r}"
        )


@dataclass
class CaseOutcome:
    case_id: str
    cve_id: str
    ranked: list[tuple[str, str, Fraction]]  # (binary label, function, score), best first
    s_gv: Fraction
    others: list[Fraction]  # every corpus score except the ground truth's
    top1: bool
    mismatch: bool = False


@dataclass
class EvalMetrics:
    top1: float
    mismatch: float
    alpha: float
    per_case: list[CaseOutcome]


def is_top1(s_gv: float | Rational, others: Iterable[float | Rational]) -> bool:
    """Ground truth must beat every other score strictly; a tie is a failure."""
    g = _exact(s_gv)
    return all(g > _exact(o) for o in others)


def is_mismatch(s_gv: float | Rational, others: Iterable[float | Rational], alpha: float) -> bool:
    g = _exact(s_gv)
    if g < LOW_SCORE:
        return False
    bar = g - _exact(alpha)
    return any(_exact(o) > bar for o in others)


def top1_from_grid(grid: Sequence[tuple[float, Sequence[float]]]) -> float:
    """``grid`` holds one (ground-truth score, other scores) pair per case."""
    if not grid:
        return 0.0
    return sum(is_top1(g, o) for g, o in grid) / len(grid)


def mismatch_from_grid(grid: Sequence[tuple[float, Sequence[float]]], alpha: float) -> float:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if not grid:
        return 0.0
    return sum(is_mismatch(g, o, alpha) for g, o in grid) / len(grid)


def _case_signatures(case: EvalCase, db: SignatureDatabase) -> list[Signature]:
    sigs = [s for s in db.signatures if s.cve_id == case.cve_id and s.function_name == case.function]
    if not sigs:
        raise MissingSignatures(case.cve_id, case.function)
    return sigs


def score_case(
    case: EvalCase, db: SignatureDatabase, threshold: float = DEFAULT_PATCH_THRESHOLD, jobs: int = 1
) -> CaseOutcome:
    sigs = _case_signatures(case, db)
    funcs: list[tuple[str, BinaryFunction]] = [(label, f) for label, fs in case.corpus for f in fs]
    groups = [((case.cve_id, case.function), sigs)]
    rows = score_grid(groups, [f for _, f in funcs], threshold, jobs)
    scored = [(label, f.name, row[0].score) for (label, f), row in zip(funcs, rows)]
    gt_index = next(
        k for k, (label, name, _) in enumerate(scored) if label == case.expected_binary and name == case.function
    )
    s_gv = scored[gt_index][2]
    others = [sc for k, (_, _, sc) in enumerate(scored) if k != gt_index]
    ranked = sorted(scored, key=lambda t: (-t[2], t[1], t[0]))
    return CaseOutcome(case.case_id, case.cve_id, ranked, s_gv, others, is_top1(s_gv, others))


def evaluate(
    cases: Sequence[EvalCase],
    db: SignatureDatabase,
    alpha: float = 0.1,
    threshold: float = DEFAULT_PATCH_THRESHOLD,
    jobs: int = 1,
) -> EvalMetrics:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    outcomes = [score_case(c, db, threshold, jobs) for c in cases]
    for o in outcomes:
        o.mismatch = is_mismatch(o.s_gv, o.others, alpha)
    n = len(outcomes) or 1
    return EvalMetrics(
        top1=sum(o.top1 for o in outcomes) / n,
        mismatch=sum(o.mismatch for o in outcomes) / n,
        alpha=alpha,
        per_case=outcomes,
    )


def top1_score(cases: Sequence[EvalCase], db: SignatureDatabase, threshold: float = DEFAULT_PATCH_THRESHOLD) -> float:
    return evaluate(cases, db, 0.1, threshold).top1


def mismatch_score(
    cases: Sequence[EvalCase], db: SignatureDatabase, alpha: float, threshold: float = DEFAULT_PATCH_THRESHOLD
) -> float:
    return evaluate(cases, db, alpha, threshold).mismatch


def metrics_to_json(m: EvalMetrics) -> dict[str, Any]:
    return {
        "top1": m.top1,
        "mismatch": m.mismatch,
        "alpha": m.alpha,
        "cases": [
            {
                "id": o.case_id,
                "cve_id": o.cve_id,
                "s_gv": float(o.s_gv),
                "top1": o.top1,
                "mismatch": o.mismatch,
                "ranking": [{"binary": b, "function": f, "score": float(s)} for b, f, s in o.ranked],
            }
            for o in m.per_case
        ],
    }


# --------------------------------------------------------------------------
# report

_LEFT = 44


def _block_labels(structure: ParentsChildren | BlockList) -> list[str]:
    if isinstance(structure, ParentsChildren):
        return ["parent"] + [f"child {k}" for k in range(1, len(structure.children) + 1)]
    return [f"block {k}" for k in range(1, len(structure.blocks) + 1)]


def _fit(s: str, width: int) -> str:
    return s if len(s) <= width else s[: width - 1] + "~"


def render_report(
    result: FunctionMatchResult, signature: Signature, query: BinaryFunction | None = None
) -> str:
    """Two-column text: signature instructions left, aligned query instructions right.

    Rows start with ``=`` (matched) or ``!`` (unmatched). If ``result`` was
    scored without alignments, ``query`` is needed to recompute them.
    """
    if any(m.alignment is None for m in result.structure_matches):
        if query is None:
            raise ValueError("result carries no alignment; pass the query function")
        result = score_signature(signature, query)
    out: list[str] = []
    out.append(f"signature  {signature.cve_id} / {signature.function_name} #{signature.ordinal} ({signature.kind.value})")
    out.append(f"query      {result.query_binary} / {result.query_name}")
    if result.patched:
        out.append("verdict    PATCHED (patch signature matched)")
    else:
        out.append(f"verdict    sim={result.sim:.3f}")
    out.append("")

    n = len(signature.structures)
    for si, (structure, sm) in enumerate(zip(signature.structures, result.structure_matches), 1):
        kind = "parents_children" if isinstance(structure, ParentsChildren) else "block_list"
        qb = ", ".join(b if b is not None else "-" for b in sm.query_blocks)
        out.append(f"structure {si}/{n}  {kind}  query blocks: {qb}")
        out.append(f"    {'SIGNATURE':<{_LEFT}}| QUERY")
        hits: dict[tuple[int, int], AlignedPair] = {(a.block, a.index): a for a in sm.alignment or ()}
        blocks = structure.blocks
        for bi, (label, block) in enumerate(zip(_block_labels(structure), blocks)):
            out.append(f"  [{label}]")
            for ii, text in enumerate(block):
                a = hits.get((bi, ii))
                if a is None:
                    out.append(f"  ! {_fit(text, _LEFT):<{_LEFT}}| ---")
                else:
                    out.append(f"  = {_fit(text, _LEFT):<{_LEFT}}| {a.address:#x}  {a.text}")
        out.append(f"  matched {sm.matched}/{sm.total}")
        out.append("")

    if result.patched and result.patch_match is not None and signature.patch_signature is not None:
        out.append("patch signature blocks:")
        pm = result.patch_match
        for k, block in enumerate(signature.patch_signature.blocks):
            got = pm.per_block[k] if pm.per_block else 0
            where = pm.query_blocks[k] if pm.query_blocks else None
            out.append(f"  block {k + 1}: {got}/{len(block)} -> query block {where if where is not None else '-'}")
        out.append("")

    out.append(f"total {result.matched}/{result.total}, sim={result.sim:.3f}")
    return "\n".join(out) + "\n"


def report_json(result: FunctionMatchResult, signature: Signature) -> dict[str, Any]:
    """JSON sidecar of :func:`render_report`."""
    return {
        "cve_id": signature.cve_id,
        "function": signature.function_name,
        "ordinal": signature.ordinal,
        "kind": signature.kind.value,
        "query": {"binary": result.query_binary, "function": result.query_name},
        "patched": result.patched,
        "matched": result.matched,
        "total": result.total,
        "sim": result.sim,
        "structures": [structure_match_to_json(m) for m in result.structure_matches],
    }


def structure_match_to_json(m: StructureMatch) -> dict[str, Any]:
    return {
        "matched": m.matched,
        "total": m.total,
        "query_blocks": list(m.query_blocks),
        "per_block": list(m.per_block),
        "alignment": None if m.alignment is None else [
            {"sig": [a.block, a.index], "block": a.query_block, "addr": hex(a.address), "text": a.text}
            for a in m.alignment
        ],
    }


def structure_match_from_json(doc: dict[str, Any]) -> StructureMatch:
    align = doc.get("alignment")
    return StructureMatch(
        doc["matched"],
        doc["total"],
        None if align is None else tuple(
            AlignedPair(a["sig"][0], a["sig"][1], a["block"], int(a["addr"], 16), a["text"]) for a in align
        ),
        tuple(doc.get("query_blocks", ())),
        tuple(doc.get("per_block", ())),
    )


def result_to_json(r: FunctionMatchResult) -> dict[str, Any]:
    return {
        "cve_id": r.cve_id,
        "function": r.function_name,
        "ordinal": r.ordinal,
        "kind": r.kind.value,
        "query": {"binary": r.query_binary, "function": r.query_name},
        "patched": r.patched,
        "sim": r.sim,
        "structures": [structure_match_to_json(m) for m in r.structure_matches],
        "patch_match": None if r.patch_match is None else structure_match_to_json(r.patch_match),
    }


def result_from_json(doc: dict[str, Any]) -> FunctionMatchResult:
    pm = doc.get("patch_match")
    return FunctionMatchResult(
        doc["cve_id"],
        doc["function"],
        doc["ordinal"],
        SignatureKind(doc["kind"]),
        doc["query"]["binary"],
        doc["query"]["function"],
        doc["patched"],
        tuple(structure_match_from_json(m) for m in doc["structures"]),
        None if pm is None else structure_match_from_json(pm),
    )
