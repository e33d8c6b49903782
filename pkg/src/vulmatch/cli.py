"""``vulmatch`` command line: prep | diff | sign | match | eval | report.

Exit status: 0 success, 1 internal error, 2 bad input or usage. Diagnostics
go to stderr; data goes to the ``--out`` file (or stdout when allowed).
Set ``VULMATCH_LOG`` (DEBUG, INFO, WARNING, ...) to change verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .binmodel import FUNC_SCHEMA, BinaryFunction, load_function
from .diffcore import diff_sites, parse_unified_diff
from .errors import InputError, UnknownCve
from .evalharness import EvalCase, evaluate, metrics_to_json, render_report, report_json, result_from_json, result_to_json
from .matcher import DEFAULT_PATCH_THRESHOLD, rank_functions, score_signature
from .sigdb import DB_SCHEMA, CveRecord, SignatureDatabase, load, query, save, signature_from_json, signature_to_json, write_atomic
from .siggen import generate_signatures, signatures_from_sites
from .source_prep import tag_functions

MATCH_SCHEMA = "vulmatch-match/1"
CASES_SCHEMA = "vulmatch-cases/1"

log = logging.getLogger("vulmatch")


class UsageError(InputError):
    pass


def _dump(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        write_atomic(out, text)


def _read_text(path: str) -> str:
    with open(path, encoding="utf-8", newline="") as fh:
        return fh.read()


def _read_json(path: str | Path) -> Any:
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON: {exc}") from exc


def _load_func(path: str | Path) -> BinaryFunction:
    try:
        return load_function(_read_json(path))
    except InputError as exc:
        raise InputError(f"{path}: {exc}") from exc


def _threshold(text: str) -> float:
    val = float(text)
    if not 0 < val <= 1:
        raise argparse.ArgumentTypeError("must lie in (0, 1]")
    return val


def _jobs(text: str) -> int:
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return val


def _alpha(text: str) -> float:
    val = float(text)
    if not 0 < val < 1:
        raise argparse.ArgumentTypeError("must lie in (0, 1)")
    return val


# --------------------------------------------------------------------------
# subcommands


def cmd_prep(args: argparse.Namespace) -> int:
    if args.in_place and args.out:
        raise UsageError("--in-place and --out are mutually exclusive")
    text = _read_text(args.source)
    names = [n.strip() for n in args.functions.split(",") if n.strip()]
    if not names:
        raise UsageError("--functions needs at least one name")
    tagged = tag_functions(text, names)
    if args.in_place:
        write_atomic(args.source, tagged)
    else:
        _emit(tagged, args.out)
    return 0


def cmd_diff(args: argparse.Namespace) -> int:
    old = _read_text(args.old).splitlines()
    new = _read_text(args.new).splitlines()
    sites = diff_sites(old, new)
    _emit(_dump({"sites": [s.to_json() for s in sites]}), args.emit_sites)
    return 0


def cmd_sign(args: argparse.Namespace) -> int:
    vuln = _load_func(args.vuln_bin)
    patched = _load_func(args.patched_bin)
    if args.patch:
        sites = parse_unified_diff(_read_text(args.patch))
        result = signatures_from_sites(
            vuln, patched, sites, args.cve, source_file=args.src_file, function_name=args.func
        )
        src_name = args.src_file or args.patch
    else:
        if not (args.old_src and args.new_src):
            raise UsageError("sign needs --old-src and --new-src (or --patch)")
        result = generate_signatures(
            vuln, patched, _read_text(args.old_src), _read_text(args.new_src), args.cve,
            source_file=args.src_file or args.old_src, function_name=args.func,
        )
        src_name = args.src_file or args.old_src
    for d in result.diagnostics:
        log.warning("%s", d)
    if not result.signatures:
        raise InputError(f"no signature could be generated for {args.cve}/{args.func}")

    db = load(args.db) if os.path.exists(args.db) else SignatureDatabase()
    db.add_record(CveRecord(args.cve, args.project, (os.path.basename(src_name),), (args.func,), (vuln.binary_id,)))
    for sig in result.signatures:
        stored = db.add_signature(sig)
        log.info("stored %s/%s %s #%d (%d instructions)", stored.cve_id, stored.function_name,
                 stored.kind.value, stored.ordinal, stored.total_instructions)
    save(db, args.db)
    return 0


def _query_files(path: str) -> list[Path]:
    p = Path(path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise InputError(f"{path}: no such file or directory")
    files = sorted(p.rglob("*.json"), key=lambda f: f.relative_to(p).as_posix())
    if not files:
        raise InputError(f"{path}: no function documents found")
    return files


def cmd_match(args: argparse.Namespace) -> int:
    db = load(args.db)
    sigs = query(db, args.cve)
    if not sigs:
        raise InputError("database holds no signatures")
    queries = [_load_func(f) for f in _query_files(args.query)]
    rankings = rank_functions(sigs, queries, args.patch_threshold, args.jobs)

    groups: dict[tuple[str, str], list] = {}
    for s in sigs:
        groups.setdefault((s.cve_id, s.function_name), []).append(s)

    doc_rankings = []
    for r in rankings:
        entries = []
        details = []
        for rank, e in enumerate(r.entries, 1):
            entries.append({
                "rank": rank,
                "binary": e.query_binary,
                "function": e.query_name,
                "score": float(e.score),
                "score_exact": str(e.score),
                "patched": e.patched,
            })
            if rank <= args.details:
                q = queries[e.query_index]
                details.append({
                    "rank": rank,
                    "binary": e.query_binary,
                    "function": e.query_name,
                    "signatures": [
                        {"signature": signature_to_json(s),
                         "result": result_to_json(score_signature(s, q, args.patch_threshold))}
                        for s in groups[(r.cve_id, r.function_name)]
                    ],
                })
        doc_rankings.append({"cve_id": r.cve_id, "function": r.function_name, "entries": entries, "details": details})
    doc = {"schema": MATCH_SCHEMA, "patch_threshold": args.patch_threshold, "rankings": doc_rankings}
    _emit(_dump(doc), args.out)
    return 0


def _load_cases(path: str) -> list[EvalCase]:
    doc = _read_json(path)
    if not isinstance(doc, dict) or doc.get("schema") != CASES_SCHEMA:
        raise InputError(f"{path}: expected schema {CASES_SCHEMA}")
    base = Path(path).parent
    cache: dict[Path, BinaryFunction] = {}
    cases = []
    for i, c in enumerate(doc.get("cases", [])):
        try:
            corpus = []
            for b in c["corpus"]:
                funcs = []
                for f in b["functions"]:
                    fp = (base / f).resolve()
                    if fp not in cache:
                        cache[fp] = _load_func(fp)
                    funcs.append(cache[fp])
                corpus.append((b["label"], funcs))
            cases.append(EvalCase(str(c.get("id", i)), c["cve_id"], c["function"], corpus, c["expected_binary"]))
        except (KeyError, TypeError) as exc:
            raise InputError(f"{path}: cases[{i}]: malformed case ({exc})") from exc
    return cases


def cmd_eval(args: argparse.Namespace) -> int:
    db = load(args.db)
    cases = _load_cases(args.cases)
    metrics = evaluate(cases, db, args.alpha, args.patch_threshold, args.jobs)
    _emit(_dump(metrics_to_json(metrics)), args.out)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    doc = _read_json(args.result)
    if not isinstance(doc, dict) or doc.get("schema") != MATCH_SCHEMA:
        raise InputError(f"{args.result}: expected schema {MATCH_SCHEMA}")
    texts: list[str] = []
    sidecar: list[dict] = []
    found_cve = False
    for r in doc.get("rankings", []):
        if args.cve and r["cve_id"] != args.cve:
            continue
        found_cve = True
        for d in r.get("details", []):
            if d["rank"] != args.rank:
                continue
            for item in d["signatures"]:
                sig = signature_from_json(item["signature"])
                res = result_from_json(item["result"])
                texts.append(render_report(res, sig))
                sidecar.append(report_json(res, sig))
    if args.cve and not found_cve:
        raise UnknownCve(args.cve)
    if not texts:
        raise InputError(f"no match details at rank {args.rank} in {args.result}")
    _emit(("\n" + "=" * 78 + "\n\n").join(texts), args.out)
    if args.json:
        write_atomic(args.json, _dump({"reports": sidecar}))
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    versions = f"vulmatch {__version__} (formats: {FUNC_SCHEMA}, {DB_SCHEMA}, {MATCH_SCHEMA}, {CASES_SCHEMA})"
    parser = argparse.ArgumentParser(prog="vulmatch", description="Binary vulnerability signature toolkit.")
    parser.add_argument("--version", action="version", version=versions)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("prep", help="tag functions with __attribute__((noinline))")
    p.add_argument("--source", required=True)
    p.add_argument("--functions", required=True, help="comma-separated function names")
    p.add_argument("--in-place", action="store_true")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_prep)

    p = sub.add_parser("diff", help="classify source patch sites")
    p.add_argument("--old", required=True)
    p.add_argument("--new", required=True)
    p.add_argument("--emit-sites", help="write site JSON here instead of stdout")
    p.set_defaults(handler=cmd_diff)

    p = sub.add_parser("sign", help="generate signatures and append them to a database")
    p.add_argument("--cve", required=True)
    p.add_argument("--func", required=True)
    p.add_argument("--vuln-bin", required=True)
    p.add_argument("--patched-bin", required=True)
    p.add_argument("--old-src")
    p.add_argument("--new-src")
    p.add_argument("--patch", help="unified diff to use instead of --old-src/--new-src")
    p.add_argument("--src-file", help="line-map file name the patch refers to")
    p.add_argument("--project", default="unknown")
    p.add_argument("--db", required=True)
    p.set_defaults(handler=cmd_sign)

    p = sub.add_parser("match", help="score query functions against the database")
    p.add_argument("--db", required=True)
    p.add_argument("--query", required=True, help="function document or directory of them")
    p.add_argument("--cve")
    p.add_argument("--patch-threshold", type=_threshold, default=DEFAULT_PATCH_THRESHOLD)
    p.add_argument("--jobs", type=_jobs, default=1)
    p.add_argument("--details", type=int, default=3, help="alignments for the top N of each ranking")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_match)

    p = sub.add_parser("eval", help="top-1 and mismatch scores over evaluation cases")
    p.add_argument("--db", required=True)
    p.add_argument("--cases", required=True)
    p.add_argument("--alpha", type=_alpha, default=0.1)
    p.add_argument("--patch-threshold", type=_threshold, default=DEFAULT_PATCH_THRESHOLD)
    p.add_argument("--jobs", type=_jobs, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("report", help="render a side-by-side alignment report")
    p.add_argument("--result", required=True, help="output of `vulmatch match`")
    p.add_argument("--out", required=True)
    p.add_argument("--json", help="also write the alignment as JSON here")
    p.add_argument("--cve")
    p.add_argument("--rank", type=int, default=1)
    p.set_defaults(handler=cmd_report)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("VULMATCH_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="vulmatch: %(levelname)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def dispatch(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"vulmatch: error: {exc}", file=sys.stderr)
        return 2
    except (InputError, OSError) as exc:
        print(f"vulmatch: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"vulmatch: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())
