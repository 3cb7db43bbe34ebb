import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from conftest import R, T, brute_force, small_rulesets, small_universe
from neurotss.ruleset import (TABLE1_SCHEMA, Prefix, Rule, Ruleset, generate_ruleset, generate_traffic,
                              linear_scan, linear_scan_batch, table1_universe)
from neurotss.tss import InsertionError, TssIndex, truncate_key

R9 = Rule(8, 8, (Prefix(0b000, 3), Prefix(0b100, 3)), 8)
R10 = Rule(9, 9, (Prefix(0b100, 3), Prefix(0b000, 1)), 9)


def _ls(rs, p):
    got = linear_scan(rs, p)
    return None if got is None else got[0]


def _id(m):
    return None if m is None else m.rule_id


def test_build_table1(table1_tss):
    tss = table1_tss
    assert tss.signatures == [(3, 3), (2, 2), (3, 0), (0, 3), (1, 1)]
    members = [tss.tuple_members(i) for i in range(5)]
    assert members == [[R["R1"], R["R2"]], [R["R3"]], [R["R4"], R["R5"]], [R["R6"], R["R7"]], [R["R8"]]]
    assert tss.mismatch_count == 0


def test_build_empty_and_grouping():
    assert len(TssIndex.build(Ruleset(TABLE1_SCHEMA, []))) == 0
    rs = generate_ruleset(3, seed=0, signatures=[(8, 8)])
    tss = TssIndex.build(rs)
    assert len(tss) == 1 and tss.tuples[0].size == 3


def test_truncate_key():
    assert truncate_key([0b110], (2,), [3]) == 0b110
    assert truncate_key([0b111], (2,), [3]) == 0b110
    assert truncate_key([0b101], (0,), [3]) == 0
    assert truncate_key([0b000, 0b011], (3, 3), [3, 3]) == 0b000011


def test_lookup_in_tuple(table1_tss):
    hit = table1_tss.lookup_in_tuple(T["T1"], (0b000, 0b011))
    assert hit.rule_id == R["R1"] and hit.access_count == 2 and hit.tuple_idx == T["T1"]
    assert table1_tss.lookup_in_tuple(T["T3"], (0b000, 0b011)) is None
    assert table1_tss.probe(T["T3"], (0b000, 0b011)) == (None, 1)
    assert table1_tss.lookup_in_tuple(T["T4"], (0b110, 0b011)).rule_id == R["R6"]


def test_ordered_search(table1_tss):
    assert table1_tss.ordered_search((0b000, 0b011), skip=T["T3"]).rule_id == R["R1"]
    assert table1_tss.ordered_search((0b101, 0b110)) is None
    single = TssIndex.build(generate_ruleset(3, seed=0, signatures=[(8, 8)]))
    res, spent = single.search((0, 0, 0, 0, 0), skip=0)
    assert res is None and spent == 0


def test_insert_r9_exact(table1_tss):
    assert table1_tss.insert_rule(R9) == T["T1"]
    assert table1_tss.mismatch_count == 0
    assert table1_tss.lookup_in_tuple(T["T1"], (0b000, 0b100)).rule_id == 8


def test_insert_r10_restricted(table1_tss):
    assert table1_tss.insert_rule(R10) == T["T3"]
    assert table1_tss.mismatch_count == 1
    assert len(table1_tss) == 5
    # truncated to (3, 0): keyed on x=100 only
    assert table1_tss.lookup_in_tuple(T["T3"], (0b100, 0b011)).rule_id == 9
    assert table1_tss.lookup_in_tuple(T["T3"], (0b100, 0b111)) is None


def test_insert_into_empty_index_fails():
    with pytest.raises(InsertionError):
        TssIndex(TABLE1_SCHEMA).insert_rule(R9)


def test_insert_without_candidate_fails():
    tss = TssIndex.build(Ruleset(TABLE1_SCHEMA, [Rule(0, 0, (Prefix(0b100, 3), Prefix(0b100, 3)))]))
    with pytest.raises(InsertionError):
        tss.insert_rule(Rule(1, 1, (Prefix(0, 0), Prefix(0, 0))))
    assert tss.mismatch_count == 0 and len(tss.rules()) == 1


def test_insert_duplicate_priority_rejected(table1_tss):
    with pytest.raises(ValueError):
        table1_tss.insert_rule(Rule(50, 3, R9.conditions))


def test_delete_keeps_empty_tuple(table1_tss):
    assert table1_tss.delete_rule(R["R3"])
    assert len(table1_tss) == 5 and table1_tss.tuples[T["T2"]].size == 0
    assert not table1_tss.delete_rule(99)


def test_delete_r1_falls_through(table1, table1_tss):
    table1_tss.delete_rule(R["R1"])
    assert table1_tss.lookup_in_tuple(T["T1"], (0b000, 0b011)) is None
    assert table1_tss.ordered_search((0b000, 0b011), skip=T["T1"]).rule_id == R["R6"]
    reduced = Ruleset(TABLE1_SCHEMA, [r for r in table1.rules if r.id != R["R1"]])
    assert _ls(reduced, (0b000, 0b011)) == R["R6"]


def test_modify(table1_tss):
    assert table1_tss.modify_rule(R["R6"], priority=-1)
    assert table1_tss.ordered_search((0b000, 0b011)).rule_id == R["R6"]
    assert table1_tss.precedence_order[0] == T["T4"]
    assert table1_tss.modify_rule(R["R6"], action=42)
    assert table1_tss.ordered_search((0b000, 0b011)).action == 42
    assert not table1_tss.modify_rule(99, action=1)


def test_surjection_and_host_lookup():
    rs = generate_ruleset(500, seed=4)
    tss = TssIndex.build(rs)
    ids = [rid for i in range(len(tss)) for rid in tss.tuple_members(i)]
    assert sorted(ids) == sorted(r.id for r in rs)
    tr = generate_traffic(rs, 3000, seed=5)
    for p, truth in zip(tr.packets, tr.truth):
        assert tss.lookup_in_tuple(tss.home_of(truth), p).rule_id == truth


def test_correct_fallback_table1_exhaustive(table1, table1_tss):
    for p in table1_universe():
        expect = _ls(table1, p)
        assert _id(table1_tss.ordered_search(p)) == expect
        for j in range(len(table1_tss)):
            if table1_tss.lookup_in_tuple(j, p) is None:
                assert _id(table1_tss.ordered_search(p, skip=j)) == expect


@settings(max_examples=50, deadline=None)
@given(small_rulesets(max_rules=30))
def test_correct_fallback_and_pruning_fuzz(rs):
    tss = TssIndex.build(rs)
    for p in small_universe()[::37]:
        expect = brute_force(rs, p)
        expect = None if expect is None else expect[0]
        assert _id(tss.ordered_search(p)) == expect
        assert _id(tss.ordered_search(p, prune=False)) == expect
        for j in range(len(tss)):
            if tss.lookup_in_tuple(j, p) is None:
                assert _id(tss.ordered_search(p, skip=j)) == expect
                assert _id(tss.ordered_search(p, skip=j, prune=False)) == expect


@pytest.mark.parametrize("seed", range(3))
def test_correct_fallback_generated(seed):
    rs = generate_ruleset(1000, seed=seed)
    tss = TssIndex.build(rs)
    tr = generate_traffic(rs, 2000, seed=seed + 10)
    rng = random.Random(seed)
    for p, truth in zip(tr.packets, tr.truth):
        j = rng.randrange(len(tss))
        if tss.lookup_in_tuple(j, p) is None:
            assert _id(tss.ordered_search(p, skip=j)) == truth
        assert _id(tss.ordered_search(p)) == _id(tss.ordered_search(p, prune=False)) == truth


@settings(max_examples=30, deadline=None)
@given(small_rulesets(min_rules=3, max_rules=25), st.lists(st.tuples(st.booleans(), st.integers(0, 10**6)),
                                                           max_size=30))
def test_updates_keep_tuple_count_and_correctness(rs, ops):
    tss = TssIndex.build(rs)
    t = len(tss)
    rng = random.Random(len(ops))
    live = {r.id: r for r in rs.rules}
    next_id, next_prio = 1000, 1000
    for is_insert, salt in ops:
        if is_insert or not live:
            donor = rs.rules[salt % len(rs.rules)]
            rule = Rule(next_id, next_prio - salt % 2000, donor.conditions, next_id)
            if rule.priority in {r.priority for r in live.values()}:
                continue
            try:
                tss.insert_rule(rule)
                live[rule.id] = rule
            except InsertionError:
                pass
            next_id += 1
            next_prio += 1
        else:
            rid = rng.choice(sorted(live))
            assert tss.delete_rule(rid)
            del live[rid]
        assert len(tss) == t
    current = Ruleset(rs.schema, list(live.values()))
    for p in small_universe()[::53]:
        expect = brute_force(current, p)
        assert _id(tss.ordered_search(p)) == (None if expect is None else expect[0])
        for j in range(t):
            if tss.lookup_in_tuple(j, p) is None:
                assert _id(tss.ordered_search(p, skip=j)) == (None if expect is None else expect[0])


def test_singleton_bucket_costs_two(table1_tss):
    # T5 holds only R8; its bucket for key (0**, 0**) is a singleton
    hit = table1_tss.lookup_in_tuple(T["T5"], (0b001, 0b000))
    assert hit.rule_id == R["R8"] and hit.access_count == 2


def test_summary_golden(table1_tss):
    assert table1_tss.summary() == (
        "index\tsignature\trules\tmax_precedence\n"
        "0\t3,3\t2\t0\n"
        "1\t2,2\t1\t2\n"
        "2\t3,0\t2\t3\n"
        "3\t0,3\t2\t5\n"
        "4\t1,1\t1\t7\n"
    )


def test_json_roundtrip_after_updates(table1_tss):
    table1_tss.insert_rule(R10)
    table1_tss.delete_rule(R["R3"])
    back = TssIndex.from_json(table1_tss.to_json())
    assert back.signatures == table1_tss.signatures
    assert back.mismatch_count == 1
    assert [back.tuple_members(i) for i in range(5)] == [table1_tss.tuple_members(i) for i in range(5)]
    for p in table1_universe():
        assert back.ordered_search(p) == table1_tss.ordered_search(p)


def test_readers_never_see_half_applied_updates(table1_tss):
    p = (0b000, 0b100)  # only R9 covers this point
    before, after = table1_tss.ordered_search(p), None
    stop = threading.Event()
    seen = set()
    errors = []

    def reader():
        while not stop.is_set():
            try:
                with table1_tss.lock.read():
                    seen.add(_id(table1_tss.ordered_search(p)))
            except Exception as e:  # pragma: no cover - failure path
                errors.append(e)

    threads = [threading.Thread(target=reader) for _ in range(3)]
    for th in threads:
        th.start()
    for _ in range(200):
        table1_tss.insert_rule(R9)
        table1_tss.delete_rule(R9.id)
    stop.set()
    for th in threads:
        th.join()
    assert not errors
    assert seen <= {_id(before), R9.id}
