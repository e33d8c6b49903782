import itertools
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

import toycc
from fixtures import make_function
from vulmatch.binmodel import load_function
from vulmatch.matcher import (
    QueryIndex,
    aggregate,
    block_similarity,
    detect_patch,
    lcs_alignment,
    match_block_list,
    match_parents_children,
    rank_functions,
    score_cve,
    score_signature,
)
from vulmatch.siggen import BlockList, ParentsChildren, Signature, SignatureKind, generate_signatures

SYMS = ["push rbp", "mov rbp, rsp", "xor eax, eax", "ret", "nop", "add eax, 0x1"]


def lcs_brute(a, b):
    """Longest common subsequence by enumerating subsequences of ``a``."""
    for r in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), r):
            it = iter(b)
            if all(a[i] in it for i in idx):
                return r
    return 0


def all_optimal_alignments(a, b):
    n = lcs_brute(a, b)
    out = []
    for ia in itertools.combinations(range(len(a)), n):
        for jb in itertools.combinations(range(len(b)), n):
            if all(a[i] == b[j] for i, j in zip(ia, jb)):
                out.append(list(zip(ia, jb)))
    return out


def random_query(rng, max_blocks=6, syms=SYMS):
    n = rng.randint(1, max_blocks)
    blocks = {}
    for i in range(n):
        texts = [rng.choice(syms) for _ in range(rng.randint(1, 5))]
        succ = sorted({str(rng.randrange(n)) for _ in range(rng.randint(0, 3))})
        blocks[str(i)] = (texts, succ, [None] * len(texts))
    return make_function(blocks, name=f"q{rng.random():.6f}")


def oracle_parents_children(structure, func):
    """Exhaustive max over parents and injective partial child -> successor maps."""
    best = 0
    kids = list(structure.children)
    for p in func.block_ids:
        ps = lcs_brute(structure.parent, func.normalized[p])
        succ = list(func.successors(p))
        slots = succ + [None] * len(kids)
        for perm in itertools.permutations(slots, len(kids)):
            real = [s for s in perm if s is not None]
            if len(real) != len(set(real)):
                continue
            cs = sum(lcs_brute(c, func.normalized[s]) for c, s in zip(kids, perm) if s is not None)
            best = max(best, ps + cs)
    return best


# --------------------------------------------------------------------------
# block similarity


def test_block_similarity_examples():
    assert block_similarity(SYMS[:3], SYMS[:3])[0] == 3
    assert block_similarity(["push rbp", "mov rbp, rsp", "xor eax, eax"], ["push rbp", "xor eax, eax"])[0] == 2
    assert block_similarity(["nop"], ["ret"]) == (0, [])


def test_alignment_is_lexicographically_earliest():
    rng = random.Random(2)
    for _ in range(200):
        a = [rng.choice("abc") for _ in range(rng.randint(1, 6))]
        b = [rng.choice("abc") for _ in range(rng.randint(0, 6))]
        got = lcs_alignment(a, b)
        opts = all_optimal_alignments(a, b)
        assert got == min(opts)


def test_bit_parallel_lcs_matches_brute_force():
    rng = random.Random(4)
    for _ in range(200):
        f = random_query(rng)
        qi = QueryIndex(f)
        block = tuple(rng.choice(SYMS) for _ in range(rng.randint(1, 6)))
        assert qi.lcs_all(block) == [lcs_brute(block, f.normalized[b]) for b in f.block_ids]


# --------------------------------------------------------------------------
# structures


def test_change_block_three_of_five():
    sig_block = ("push rbp", "mov rbp, rsp", "mov eax, 0x1", "mov ecx, 0x2", "ret")
    q = make_function({"0": (["push rbp", "mov eax, 0x1", "nop", "ret"], [], [None] * 4)})
    sig = Signature("C", "f", SignatureKind.CHANGE_ONE_BLOCK, (BlockList((sig_block,)),))
    r = score_signature(sig, q)
    assert r.sim_fraction == Fraction(3, 5) and r.sim == 0.6


def test_block_list_reuses_query_blocks():
    q = make_function({"0": (["nop", "ret"], [], [None, None])})
    bl = BlockList((("nop", "ret"), ("nop", "ret")))
    m = match_block_list(bl, q)
    assert (m.matched, m.total) == (4, 4)
    assert m.query_blocks == ("0", "0")


def add_structure_fixture():
    parent = ("push rbp", "mov rbp, rsp", "sub rsp, 0x20", "mov dword ptr [rbp - 0x4], edi",
              "cmp dword ptr [rbp - 0x4], 0x0", "jle @tgt")
    child = ("mov eax, 0x0", "call @tgt", "leave", "ret")
    q = make_function({
        "0": (["push rbp", "mov rbp, rsp", "sub rsp, 0x30", "mov dword ptr [rbp - 0x4], edi",
               "cmp dword ptr [rbp - 0x4], 0x0", "jle 0x1040"], ["1"], [None] * 6),
        "1": (["mov eax, 0x0", "call 0x9000", "pop rbp", "ret"], [], [None] * 4),
    })
    return ParentsChildren(parent, (child,)), q


def test_add_structure_eight_of_ten():
    pc, q = add_structure_fixture()
    m = match_parents_children(pc, q)
    assert (m.matched, m.total) == (8, 10)
    sig = Signature("C", "f", SignatureKind.ADD, (pc,))
    assert score_signature(sig, q).sim_fraction == Fraction(4, 5)


def test_combined_eleven_of_fifteen():
    pc, q = add_structure_fixture()
    change = BlockList((("push rbp", "mov rbp, rsp", "nop", "xchg eax, eax", "jle @tgt"),))
    sig = Signature("C", "f", SignatureKind.CHANGE_MANY_BLOCK, (change, pc))
    r = score_signature(sig, q)
    assert [(m.matched, m.total) for m in r.structure_matches] == [(3, 5), (8, 10)]
    assert r.sim_fraction == Fraction(11, 15)
    # weighted aggregate of two single-structure signatures agrees
    a = score_signature(Signature("C", "f", SignatureKind.CHANGE_ONE_BLOCK, (change,)), q)
    b = score_signature(Signature("C", "f", SignatureKind.ADD, (pc,)), q)
    assert aggregate([a, b]) == Fraction(3 + 8, 5 + 10)
    assert (Fraction(3, 5) * 5 + Fraction(4, 5) * 10) / 15 == aggregate([a, b])


def test_children_on_non_successors_score_zero():
    pc = ParentsChildren(("push rbp", "nop"), (("xor eax, eax", "ret"),))
    linked = make_function({
        "0": (["push rbp", "nop"], ["1"], [None, None]),
        "1": (["xor eax, eax", "ret"], [], [None, None]),
    })
    unlinked = make_function({
        "0": (["push rbp", "nop"], [], [None, None]),
        "1": (["xor eax, eax", "ret"], [], [None, None]),
    })
    assert match_parents_children(pc, linked).matched == 4
    m = match_parents_children(pc, unlinked).matched
    assert m == 4 - 2
    assert m == oracle_parents_children(pc, unlinked)


def test_injective_children():
    pc = ParentsChildren(("push rbp",), (("ret",), ("ret",)))
    q = make_function({
        "0": (["push rbp"], ["1"], [None]),
        "1": (["ret"], [], [None]),
    })
    assert match_parents_children(pc, q).matched == 2


def test_parents_children_oracle_equivalence():
    rng = random.Random(17)
    for _ in range(200):
        q = random_query(rng)
        k = rng.randint(1, 3)
        pc = ParentsChildren(
            tuple(rng.choice(SYMS) for _ in range(rng.randint(1, 4))),
            tuple(tuple(rng.choice(SYMS) for _ in range(rng.randint(1, 4))) for _ in range(k)),
        )
        m = match_parents_children(pc, q)
        assert m.matched == oracle_parents_children(pc, q)
        assert len(m.alignment) == m.matched


def test_greedy_assignment_beyond_limit():
    kids = tuple((f"mov eax, {i:#x}",) for i in range(8))
    pc = ParentsChildren(("push rbp",), kids)
    blocks = {"p": (["push rbp"], [str(i) for i in range(8)], [None])}
    for i in range(8):
        blocks[str(i)] = ([f"mov eax, {i:#x}"], [], [None])
    q = make_function(blocks)
    assert match_parents_children(pc, q).matched == 9


@settings(max_examples=150, deadline=None)
@given(st.data())
def test_appending_to_a_query_block_never_lowers_matched(data):
    rng = random.Random(data.draw(st.integers(0, 10**6)))
    blocks = {}
    n = rng.randint(1, 5)
    for i in range(n):
        texts = [rng.choice(SYMS) for _ in range(rng.randint(1, 4))]
        blocks[str(i)] = (texts, sorted({str(rng.randrange(n)) for _ in range(2)}), [None] * len(texts))
    structs = [
        ParentsChildren(tuple(rng.choice(SYMS) for _ in range(3)), ((rng.choice(SYMS), rng.choice(SYMS)),)),
        BlockList((tuple(rng.choice(SYMS) for _ in range(4)),)),
    ]
    before = [m.matched for m in (match_parents_children(structs[0], make_function(blocks)),
                                  match_block_list(structs[1], make_function(blocks)))]
    target = str(rng.randrange(n))
    texts, succ, lines = blocks[target]
    extra = [rng.choice(SYMS) for _ in range(rng.randint(1, 3))]
    blocks[target] = (texts + extra, succ, lines + [None] * len(extra))
    after = [m.matched for m in (match_parents_children(structs[0], make_function(blocks)),
                                 match_block_list(structs[1], make_function(blocks)))]
    assert all(a >= b for a, b in zip(after, before))


# --------------------------------------------------------------------------
# verdicts and ranking


def pair_signatures(seed, kind):
    p = toycc.make_pair(seed, kind)
    vuln, patched = load_function(p.vuln_doc), load_function(p.patched_doc)
    return vuln, patched, generate_signatures(vuln, patched, p.old_src, p.new_src, p.cve_id).signatures


def test_detect_patch_examples():
    vuln, patched, sigs = pair_signatures(21, "change_one")
    (sig,) = sigs
    assert sig.patch_signature is not None
    assert detect_patch(sig, patched)
    assert not detect_patch(sig, vuln)
    r = score_signature(sig, patched)
    assert r.patched and r.sim == 0.0


def test_delete_signature_never_patched():
    vuln, patched, sigs = pair_signatures(22, "delete")
    (sig,) = sigs
    assert sig.kind is SignatureKind.DELETE
    forged = Signature(sig.cve_id, sig.function_name, SignatureKind.DELETE, sig.structures)
    assert not detect_patch(forged, patched)


def test_patch_threshold_is_inclusive():
    sig = Signature("C", "f", SignatureKind.CHANGE_ONE_BLOCK, (BlockList((("nop",),)),),
                    BlockList((("a", "b", "c", "d", "e"),)))
    q = make_function({"0": (["a", "b", "c", "d", "nop"], [], [None] * 5)})
    assert detect_patch(sig, q, 0.8)
    assert not detect_patch(sig, q, 0.81)


def test_any_patch_zeroes_aggregate():
    vuln, patched, sigs = pair_signatures(23, "change_one")
    bl = Signature(sigs[0].cve_id, sigs[0].function_name, SignatureKind.DELETE,
                   (BlockList((patched.normalized[patched.block_ids[0]],)),))
    assert score_cve([bl], patched) == 1.0
    assert score_cve([bl, sigs[0]], patched) == 0.0
    assert score_cve(sigs, vuln) == 1.0


def test_single_signature_aggregate_is_its_sim():
    pc, q = add_structure_fixture()
    sig = Signature("C", "f", SignatureKind.ADD, (pc,))
    assert score_cve([sig], q) == score_signature(sig, q).sim


def test_rank_functions_puts_origin_first():
    vuln, patched, sigs = pair_signatures(24, "add")
    corpus = [load_function(toycc.random_function(s)) for s in range(30)] + [patched, vuln]
    (ranking,) = rank_functions(sigs, corpus)
    assert ranking.entries[0].query_name == vuln.name and ranking.entries[0].query_binary == vuln.binary_id
    assert ranking.entries[0].score == 1
    assert all(e.score < 1 for e in ranking.entries[1:])
    patched_entry = next(e for e in ranking.entries if e.query_binary == patched.binary_id)
    assert patched_entry.score == 0 and patched_entry.patched
    positive = [e for e in ranking.entries if e.score > 0]
    assert ranking.entries.index(patched_entry) >= len(positive)


def test_rank_functions_parallel_matches_serial():
    _, _, sigs = pair_signatures(25, "change_many")
    corpus = [load_function(toycc.random_function(s)) for s in range(40)]
    a = rank_functions(sigs, corpus, jobs=1)
    b = rank_functions(sigs, corpus, jobs=3)
    assert a == b


def test_structure_match_invariants():
    from vulmatch.matcher import StructureMatch

    with pytest.raises(ValueError):
        StructureMatch(3, 2)
    with pytest.raises(ValueError):
        StructureMatch(1, 2, ())
