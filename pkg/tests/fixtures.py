"""Hand-built function documents shared by several test modules."""

from __future__ import annotations

from vulmatch.binmodel import BinaryFunction, load_function

FILE = "lib/box.c"


def make_function(
    blocks: dict[str, tuple[list[str], list[str], list[int | None]]],
    *,
    name: str = "f",
    binary_id: str = "bin",
    entry: str | None = None,
    base: int = 0x1000,
    file: str = FILE,
) -> BinaryFunction:
    """``blocks`` maps id -> (instruction texts, successors, source line per instruction).

    A ``None`` line leaves that instruction unmapped. Blocks are laid out in
    dict order, 0x40 bytes apart.
    """
    doc_blocks, line_map = [], []
    for k, (bid, (texts, succ, lines)) in enumerate(blocks.items()):
        assert len(texts) == len(lines)
        start = base + 0x40 * k
        insns = []
        for i, (t, ln) in enumerate(zip(texts, lines)):
            addr = start + 4 * i
            insns.append({"addr": hex(addr), "text": t})
            if ln is not None:
                line_map.append({"addr": hex(addr), "file": file, "line": ln})
        doc_blocks.append({"id": bid, "successors": list(succ), "insns": insns})
    return load_function({
        "schema": "vulmatch-func/1",
        "binary_id": binary_id,
        "name": name,
        "entry": entry or next(iter(blocks)),
        "blocks": doc_blocks,
        "line_map": line_map,
    })


def _body(tag: str) -> list[str]:
    n = int(tag[1:]) if tag[1:].isdigit() else 0x99
    return [f"mov eax, dword ptr [rbp - {0x10 + n:#x}]", f"add eax, {0x100 + n:#x}"]


# Batches {4,5,6} and {9,10} entered from unchanged blocks 1 and 7.
FIGURE_OLD_ORDER = ["b0", "b1", "b2", "b3", "b7", "b8", "b11"]
FIGURE_NEW_ORDER = ["b0", "b1", "a4", "a5", "a6", "b2", "b3", "b7", "a9", "a10", "b8", "b11"]
FIGURE_VULN_EDGES = {
    "0": ["1"], "1": ["2", "7"], "2": ["3"], "3": ["7"], "7": ["8", "11"], "8": ["11"], "11": [],
}
FIGURE_PATCHED_EDGES = {
    "0": ["1"], "1": ["2", "4"], "2": ["3"], "3": ["7"], "4": ["5"], "5": ["6"], "6": ["7"],
    "7": ["8", "9"], "8": ["11"], "9": ["10"], "10": ["11"], "11": [],
}


def figure_sources() -> tuple[list[str], list[str]]:
    old = [f"stmt_{t}();" for t in FIGURE_OLD_ORDER]
    new = [f"stmt_{t}();" for t in FIGURE_NEW_ORDER]
    return old, new


def _figure(order: list[str], edges: dict[str, list[str]], binary_id: str, base: int) -> BinaryFunction:
    line_of = {t[1:]: k + 1 for k, t in enumerate(order)}
    tag_of = {t[1:]: t for t in order}
    blocks = {}
    for bid in sorted(edges, key=int):
        texts = _body(tag_of[bid])
        blocks[bid] = (texts, edges[bid], [line_of[bid]] * len(texts))
    return make_function(blocks, name="box_parse", binary_id=binary_id, base=base)


def figure_pair() -> tuple[BinaryFunction, BinaryFunction]:
    vuln = _figure(FIGURE_OLD_ORDER, FIGURE_VULN_EDGES, "box-1.0", 0x1000)
    patched = _figure(FIGURE_NEW_ORDER, FIGURE_PATCHED_EDGES, "box-1.1", 0x8000)
    return vuln, patched


# 23 signature instructions over three blocks; the query shifts four
# rip-relative displacements (struct field offsets moved), so 19 match.
REPORT_PARENT = [
    "push rbp", "mov rbp, rsp", "push rbx", "sub rsp, 0x28",
    "mov qword ptr [rbp - 0x28], rdi", "mov rcx, qword ptr [rip + 0xfc246]",
    "test rcx, rcx", "je 0x401100",
]
REPORT_CHILD = [
    "mov rax, qword ptr [rbp - 0x28]", "mov edx, dword ptr [rax + 0x10]",
    "mov rsi, qword ptr [rip + 0xfc1a0]", "mov rdi, rax", "call 0x402000",
    "mov dword ptr [rbp - 0x14], eax", "jmp 0x401120",
]
REPORT_LONE = [
    "mov rax, qword ptr [rbp - 0x28]", "mov rax, qword ptr [rax + 0x8]",
    "lea rdx, [rip + 0xfc300]", "mov esi, 0x1", "mov rdi, rax",
    "mov r8, qword ptr [rip + 0xfc310]", "call 0x402100", "nop",
]
REPORT_SHIFTED = {
    "mov rcx, qword ptr [rip + 0xfc246]": "mov rcx, qword ptr [rip + 0xfc236]",
    "mov rsi, qword ptr [rip + 0xfc1a0]": "mov rsi, qword ptr [rip + 0xfc190]",
    "lea rdx, [rip + 0xfc300]": "lea rdx, [rip + 0xfc2f0]",
    "mov r8, qword ptr [rip + 0xfc310]": "mov r8, qword ptr [rip + 0xfc300]",
}


def report_fixture():
    """(signature, query) with 23 signature instructions of which 19 match."""
    from vulmatch.siggen import BlockList, ParentsChildren, Signature, SignatureKind

    vuln = make_function({
        "0": (REPORT_PARENT, ["1", "2"], [None] * 8),
        "1": (REPORT_CHILD, ["2"], [None] * 7),
        "2": (REPORT_LONE, [], [None] * 8),
    }, name="read_header", binary_id="libimg-2.1.2")
    shift = lambda xs: [REPORT_SHIFTED.get(x, x) for x in xs]
    query = make_function({
        "0": (shift(REPORT_PARENT), ["1", "2"], [None] * 8),
        "1": (shift(REPORT_CHILD), ["2"], [None] * 7),
        "2": (shift(REPORT_LONE), [], [None] * 8),
    }, name="read_header", binary_id="firmware-x", base=0x9000)
    n = vuln.normalized
    sig = Signature(
        "CVE-2099-0023", "read_header", SignatureKind.CHANGE_MANY_BLOCK,
        (ParentsChildren(n["0"], (n["1"],), ("0", "1")), BlockList((n["2"],), ("2",))),
    )
    return sig, query, vuln
