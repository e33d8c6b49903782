"""Single-file JSON signature database."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .errors import SchemaError, SchemaVersionMismatch, UnknownCve, ValidationError
from .siggen import BlockList, ParentsChildren, Signature, SignatureKind, Structure

DB_SCHEMA = "vulmatch-db/1"


@dataclass(frozen=True)
class CveRecord:
    cve_id: str
    project: str
    vulnerable_files: tuple[str, ...]
    vulnerable_functions: tuple[str, ...]
    affected_versions: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.cve_id:
            raise ValueError("cve_id must be non-empty")
        for name in ("vulnerable_files", "vulnerable_functions", "affected_versions"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")

    def merged(self, other: "CveRecord") -> "CveRecord":
        def union(a: tuple[str, ...], b: tuple[str, ...]) -> tuple[str, ...]:
            return a + tuple(x for x in b if x not in a)

        return replace(
            self,
            vulnerable_files=union(self.vulnerable_files, other.vulnerable_files),
            vulnerable_functions=union(self.vulnerable_functions, other.vulnerable_functions),
            affected_versions=union(self.affected_versions, other.affected_versions),
        )


@dataclass
class SignatureDatabase:
    records: list[CveRecord] = field(default_factory=list)
    signatures: list[Signature] = field(default_factory=list)
    schema_version: str = DB_SCHEMA

    def record(self, cve_id: str) -> CveRecord | None:
        for r in self.records:
            if r.cve_id == cve_id:
                return r
        return None

    def add_record(self, rec: CveRecord) -> None:
        for i, r in enumerate(self.records):
            if r.cve_id == rec.cve_id:
                self.records[i] = r.merged(rec)
                return
        self.records.append(rec)

    def add_signature(self, sig: Signature) -> Signature:
        """Append ``sig``, assigning the next free ordinal for its (cve, function, kind)."""
        if self.record(sig.cve_id) is None:
            raise ValidationError(f"no CVE record for {sig.cve_id!r}")
        taken = [
            s.ordinal for s in self.signatures
            if (s.cve_id, s.function_name, s.kind) == (sig.cve_id, sig.function_name, sig.kind)
        ]
        stored = replace(sig, ordinal=max(taken, default=-1) + 1)
        self.signatures.append(stored)
        return stored

    def groups(self) -> list[tuple[str, str]]:
        """Distinct (cve_id, function_name) pairs in stored order."""
        seen: dict[tuple[str, str], None] = {}
        for s in self.signatures:
            seen.setdefault((s.cve_id, s.function_name), None)
        return list(seen)


def query(db: SignatureDatabase, cve_id: str | None = None) -> list[Signature]:
    if cve_id is None:
        return list(db.signatures)
    if db.record(cve_id) is None:
        raise UnknownCve(cve_id)
    return [s for s in db.signatures if s.cve_id == cve_id]


# --------------------------------------------------------------------------
# serialization


def structure_to_json(s: Structure) -> dict[str, Any]:
    if isinstance(s, ParentsChildren):
        return {
            "type": "parents_children",
            "parent": list(s.parent),
            "children": [list(c) for c in s.children],
            "origin": list(s.origin),
        }
    return {"type": "block_list", "blocks": [list(b) for b in s.blocks], "origin": list(s.origin)}


def signature_to_json(sig: Signature) -> dict[str, Any]:
    return {
        "cve_id": sig.cve_id,
        "function": sig.function_name,
        "kind": sig.kind.value,
        "ordinal": sig.ordinal,
        "total_instructions": sig.total_instructions,
        "structures": [structure_to_json(s) for s in sig.structures],
        "patch_signature": None if sig.patch_signature is None else structure_to_json(sig.patch_signature),
    }


def _str_list(val: Any, path: str) -> tuple[str, ...]:
    if not isinstance(val, list) or not all(isinstance(x, str) for x in val):
        raise SchemaError(path, "expected a list of strings")
    return tuple(val)


def structure_from_json(doc: Any, path: str) -> Structure:
    if not isinstance(doc, dict):
        raise SchemaError(path, "structure must be an object")
    kind = doc.get("type")
    try:
        if kind == "parents_children":
            children = doc.get("children")
            if not isinstance(children, list):
                raise SchemaError(f"{path}.children", "expected a list")
            return ParentsChildren(
                _str_list(doc.get("parent"), f"{path}.parent"),
                tuple(_str_list(c, f"{path}.children[{i}]") for i, c in enumerate(children)),
                _str_list(doc.get("origin", []), f"{path}.origin"),
            )
        if kind == "block_list":
            blocks = doc.get("blocks")
            if not isinstance(blocks, list):
                raise SchemaError(f"{path}.blocks", "expected a list")
            return BlockList(
                tuple(_str_list(b, f"{path}.blocks[{i}]") for i, b in enumerate(blocks)),
                _str_list(doc.get("origin", []), f"{path}.origin"),
            )
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    raise SchemaError(f"{path}.type", f"unknown structure type {kind!r}")


def signature_from_json(doc: Any, path: str = "signature") -> Signature:
    if not isinstance(doc, dict):
        raise SchemaError(path, "signature must be an object")
    try:
        kind = SignatureKind(doc.get("kind"))
    except ValueError:
        raise SchemaError(f"{path}.kind", f"unknown kind {doc.get('kind')!r}") from None
    structs = doc.get("structures")
    if not isinstance(structs, list):
        raise SchemaError(f"{path}.structures", "expected a list")
    patch_doc = doc.get("patch_signature")
    patch = None
    if patch_doc is not None:
        patch = structure_from_json(patch_doc, f"{path}.patch_signature")
        if not isinstance(patch, BlockList):
            raise ValidationError(f"{path}.patch_signature: must be a block list")
    cve, func, ordinal = doc.get("cve_id"), doc.get("function"), doc.get("ordinal", 0)
    if not isinstance(cve, str) or not isinstance(func, str):
        raise SchemaError(path, "cve_id and function must be strings")
    if not isinstance(ordinal, int) or isinstance(ordinal, bool) or ordinal < 0:
        raise SchemaError(f"{path}.ordinal", "expected a non-negative integer")
    try:
        sig = Signature(
            cve, func, kind,
            tuple(structure_from_json(s, f"{path}.structures[{i}]") for i, s in enumerate(structs)),
            patch, ordinal,
        )
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    total = doc.get("total_instructions")
    if total is not None and total != sig.total_instructions:
        raise ValidationError(f"{path}.total_instructions: stored {total}, structures hold {sig.total_instructions}")
    return sig


def record_to_json(r: CveRecord) -> dict[str, Any]:
    return {
        "cve_id": r.cve_id,
        "project": r.project,
        "vulnerable_files": list(r.vulnerable_files),
        "vulnerable_functions": list(r.vulnerable_functions),
        "affected_versions": list(r.affected_versions),
    }


def record_from_json(doc: Any, path: str) -> CveRecord:
    if not isinstance(doc, dict):
        raise SchemaError(path, "record must be an object")
    cve, project = doc.get("cve_id"), doc.get("project", "")
    if not isinstance(cve, str) or not isinstance(project, str):
        raise SchemaError(path, "cve_id and project must be strings")
    try:
        return CveRecord(
            cve, project,
            _str_list(doc.get("vulnerable_files"), f"{path}.vulnerable_files"),
            _str_list(doc.get("vulnerable_functions"), f"{path}.vulnerable_functions"),
            _str_list(doc.get("affected_versions"), f"{path}.affected_versions"),
        )
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def to_json(db: SignatureDatabase) -> dict[str, Any]:
    return {
        "schema": db.schema_version,
        "records": [record_to_json(r) for r in db.records],
        "signatures": [signature_to_json(s) for s in db.signatures],
    }


def from_json(doc: Any) -> SignatureDatabase:
    if not isinstance(doc, dict):
        raise SchemaError("$", "database must be an object")
    if doc.get("schema") != DB_SCHEMA:
        raise SchemaVersionMismatch(f"unsupported database schema {doc.get('schema')!r} (expected {DB_SCHEMA})")
    recs, sigs = doc.get("records", []), doc.get("signatures", [])
    if not isinstance(recs, list) or not isinstance(sigs, list):
        raise SchemaError("$", "records and signatures must be lists")
    db = SignatureDatabase()
    for i, r in enumerate(recs):
        rec = record_from_json(r, f"records[{i}]")
        if db.record(rec.cve_id) is not None:
            raise ValidationError(f"records[{i}]: duplicate cve_id {rec.cve_id!r}")
        db.records.append(rec)
    keys = set()
    for i, s in enumerate(sigs):
        sig = signature_from_json(s, f"signatures[{i}]")
        if db.record(sig.cve_id) is None:
            raise ValidationError(f"signatures[{i}]: no record for {sig.cve_id!r}")
        key = (sig.cve_id, sig.function_name, sig.kind, sig.ordinal)
        if key in keys:
            raise ValidationError(f"signatures[{i}]: duplicate (cve, function, kind, ordinal)")
        keys.add(key)
        db.signatures.append(sig)
    return db


def dumps(db: SignatureDatabase) -> str:
    return json.dumps(to_json(db), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(db: SignatureDatabase, path: str | os.PathLike) -> None:
    write_atomic(path, dumps(db))


def load(path: str | os.PathLike) -> SignatureDatabase:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(str(path), f"invalid JSON: {exc}") from exc
    return from_json(doc)
