import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from vulmatch.diffcore import (
    EditScript,
    Op,
    PatchSite,
    Run,
    SiteKind,
    classify_sites,
    diff_lines,
    diff_sites,
    line_translation,
    parse_unified_diff,
)
from vulmatch.errors import DiffParseError, ScriptMismatch


def brute_force_distance(old, new):
    """Minimal insert+delete count: n + m - 2 * longest common subsequence, found by
    enumerating every subsequence of ``old``."""

    def is_subseq(sub, seq):
        it = iter(seq)
        return all(x in it for x in sub)

    best = 0
    for r in range(len(old), -1, -1):
        if r <= best:
            break
        for idx in itertools.combinations(range(len(old)), r):
            if is_subseq([old[i] for i in idx], new):
                best = r
                break
    return len(old) + len(new) - 2 * best


def runs(script):
    return [(r.op, r.count) for r in script.runs]


def test_empty_inputs():
    s = diff_lines([], [])
    assert s.apply([], []) == []
    assert s.cost == 0


def test_change_example():
    s = diff_lines(["a", "b", "c"], ["a", "x", "c"])
    assert runs(s) == [(Op.EQUAL, 1), (Op.DELETE, 1), (Op.INSERT, 1), (Op.EQUAL, 1)]
    assert brute_force_distance(["a", "b", "c"], ["a", "x", "c"]) == s.cost


def test_insert_example():
    s = diff_lines(["a", "c"], ["a", "b", "c"])
    assert runs(s) == [(Op.EQUAL, 1), (Op.INSERT, 1), (Op.EQUAL, 1)]


def test_classify_examples():
    assert diff_sites(["a", "b", "c"], ["a", "x", "c"]) == [
        PatchSite(SiteKind.CHANGE, ((2, "b"),), ((2, "x"),))
    ]
    assert diff_sites(["a", "c"], ["a", "b", "c"]) == [PatchSite(SiteKind.ADD, (), ((2, "b"),))]
    assert diff_sites(["a", "b"], ["a"]) == [PatchSite(SiteKind.DELETE, ((2, "b"),), ())]


def test_asymmetric_change_is_one_site():
    sites = diff_sites(["a", "b", "c", "z"], ["a", "1", "2", "3", "4", "5", "z"])
    assert [s.kind for s in sites] == [SiteKind.CHANGE]
    assert len(sites[0].old_lines) == 2 and len(sites[0].new_lines) == 5


def test_whitespace_sensitive():
    sites = diff_sites(["x = 1;"], ["x = 1; "])
    assert [s.kind for s in sites] == [SiteKind.CHANGE]


def test_script_mismatch():
    with pytest.raises(ScriptMismatch):
        classify_sites(EditScript((Run(Op.EQUAL, 3),)), ["a"], ["a"])


def test_site_invariants():
    with pytest.raises(ValueError):
        PatchSite(SiteKind.ADD, ((1, "a"),), ((1, "b"),))
    with pytest.raises(ValueError):
        PatchSite(SiteKind.CHANGE, (), ((1, "b"),))


def test_minimality_against_brute_force():
    rng = random.Random(7)
    for _ in range(500):
        old = [rng.choice("abcde") for _ in range(rng.randint(0, 8))]
        new = [rng.choice("abcde") for _ in range(rng.randint(0, 8))]
        assert diff_lines(old, new).cost == brute_force_distance(old, new), (old, new)


def test_round_trip_random():
    rng = random.Random(11)
    for _ in range(1000):
        old = [rng.choice("abcde") for _ in range(rng.randint(0, 50))]
        new = [rng.choice("abcde") for _ in range(rng.randint(0, 50))]
        s = diff_lines(old, new)
        assert s.old_length == len(old) and s.new_length == len(new)
        assert s.apply(old, new) == new


def test_delete_precedes_insert_within_a_change():
    rng = random.Random(3)
    for _ in range(300):
        old = [rng.choice("abc") for _ in range(rng.randint(0, 12))]
        new = [rng.choice("abc") for _ in range(rng.randint(0, 12))]
        ops = [r.op for r in diff_lines(old, new).runs]
        for a, b in zip(ops, ops[1:]):
            assert (a, b) != (Op.INSERT, Op.DELETE)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from("abcde"), max_size=20), st.lists(st.sampled_from("abcde"), max_size=20))
def test_sites_partition_changed_lines(old, new):
    script = diff_lines(old, new)
    sites = classify_sites(script, old, new)
    old_seen = [n for s in sites for n, _ in s.old_lines]
    new_seen = [n for s in sites for n, _ in s.new_lines]
    assert len(old_seen) == len(set(old_seen))
    assert len(new_seen) == len(set(new_seen))
    deleted = sum(r.count for r in script.runs if r.op is Op.DELETE)
    inserted = sum(r.count for r in script.runs if r.op is Op.INSERT)
    assert len(old_seen) == deleted and len(new_seen) == inserted
    assert old_seen == sorted(old_seen) and new_seen == sorted(new_seen)
    for s in sites:
        assert all(old[n - 1] == t for n, t in s.old_lines)
        assert all(new[n - 1] == t for n, t in s.new_lines)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from("abcde"), max_size=20), st.lists(st.sampled_from("abcde"), max_size=20))
def test_line_translation_maps_unchanged_lines(old, new):
    sites = diff_sites(old, new)
    tr = line_translation(sites, len(new))
    changed_new = {n for s in sites for n, _ in s.new_lines}
    assert set(tr) == set(range(1, len(new) + 1)) - changed_new
    for n, o in tr.items():
        assert new[n - 1] == old[o - 1]
    assert sorted(tr.values()) == list(tr.values())


def _unified(old, new):
    import difflib

    return "".join(difflib.unified_diff([l + "\n" for l in old], [l + "\n" for l in new], "a/f.c", "b/f.c", n=1))


def test_unified_diff_matches_internal_diff_on_simple_edits():
    old = ["int f() {", "  int a;", "  a = 1;", "  b = 2;", "  return a;", "}"]
    new = ["int f() {", "  int a;", "  if (x) return 0;", "  a = 1;", "  return a;", "}"]
    assert parse_unified_diff(_unified(old, new)) == diff_sites(old, new)


def test_unified_diff_change_and_pure_sides():
    text = (
        "--- a/x.c\n+++ b/x.c\n"
        "@@ -2,3 +2,3 @@\n ctx\n-old\n+new\n ctx2\n"
        "@@ -9,0 +10,2 @@\n+add1\n+add2\n"
        "@@ -20 +21,0 @@\n-gone\n"
    )
    sites = parse_unified_diff(text)
    assert sites == [
        PatchSite(SiteKind.CHANGE, ((3, "old"),), ((3, "new"),)),
        PatchSite(SiteKind.ADD, (), ((10, "add1"), (11, "add2"))),
        PatchSite(SiteKind.DELETE, ((20, "gone"),), ()),
    ]


def test_unified_diff_rejects_garbage():
    with pytest.raises(DiffParseError):
        parse_unified_diff("@@ -1,2 +1,2 @@\n a\n?b\n")
    with pytest.raises(DiffParseError):
        parse_unified_diff("@@ -1,3 +1,3 @@\n a\n")
    with pytest.raises(DiffParseError):
        parse_unified_diff("--- a\n+++ b\n@@ -1 +1 @@\n-a\n+b\n--- c\n+++ d\n")
