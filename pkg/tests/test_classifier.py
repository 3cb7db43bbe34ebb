import io
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import R, T, small_rulesets, small_universe
from neurotss.classifier import (Classifier, ClassifyStats, constant_predictor, oracle_predictor, stats_row,
                                 write_stats_csv)
from neurotss.model import ModelConfig, ResidualMlp, TrainingConfig, label_packets, train
from neurotss.ruleset import Trace, generate_ruleset, generate_traffic, linear_scan, table1_universe
from neurotss.tss import TssIndex


def _ids(results):
    return [None if r is None else r.rule_id for r in results]


def table1_trace(table1):
    pts = table1_universe()
    truth = [None if (m := linear_scan(table1, p)) is None else m[0] for p in pts]
    return Trace(pts, truth)


def test_perfect_predictor_no_fallback(table1_tss):
    clf = Classifier(None, table1_tss, predictor=oracle_predictor(table1_tss))
    stats = ClassifyStats()
    res = clf.classify((0b000, 0b011), stats)
    assert res.rule_id == R["R1"] and res.tuple_idx == T["T1"]
    assert stats.fallbacks == 0 and stats.memory_accesses == 2


def test_forced_miss_falls_back(table1_tss):
    clf = Classifier(None, table1_tss, predictor=constant_predictor(T["T3"]))
    stats = ClassifyStats()
    assert clf.classify((0b000, 0b011), stats).rule_id == R["R1"]
    assert stats.fallbacks == 1


def test_scenario1_preserved_unless_strict(table1_tss):
    clf = Classifier(None, table1_tss, predictor=constant_predictor(T["T4"]))
    assert clf.classify((0b000, 0b011)).rule_id == R["R6"]
    assert clf.with_strict().classify((0b000, 0b011)).rule_id == R["R1"]


def test_no_match_uses_default_action(table1_tss):
    clf = Classifier(None, table1_tss, predictor=constant_predictor(0), default_action=-1)
    res = clf.classify((0b101, 0b110))
    assert res is None and clf.action(res) == -1
    assert clf.action(clf.classify((0b000, 0b011))) == R["R1"]


def test_classify_batch_matches_single():
    rs = generate_ruleset(300, seed=8)
    tss = TssIndex.build(rs)
    model = ResidualMlp(ModelConfig(7, len(tss), 16, 1), seed=1)
    clf = Classifier(model, tss)
    assert clf.classify_batch([]) == []
    tr = generate_traffic(rs, 1000, seed=9)
    batch = clf.classify_batch(tr.packets)
    assert batch[:1] == [clf.classify(tr.packets[0])]
    assert batch == [clf.classify(p) for p in tr.packets]


def test_evaluate_perfect(table1, table1_tss):
    clf = Classifier(None, table1_tss, predictor=oracle_predictor(table1_tss))
    s = clf.evaluate(table1_trace(table1))
    assert s.model_accuracy == 1.0 and s.classification_accuracy == 1.0 and s.scenario1_errors == 0


def test_evaluate_always_missing_tuple(table1, table1_tss):
    table1_tss.delete_rule(R["R3"])  # T2 becomes empty
    tr = generate_traffic(table1_tss.ruleset(), 500, seed=1)
    clf = Classifier(None, table1_tss, predictor=constant_predictor(T["T2"]))
    s = clf.evaluate(tr)
    assert s.model_accuracy == 0.0 and s.classification_accuracy == 1.0
    assert s.fallbacks == 500


def test_trained_table1_ordering(table1, table1_tss):
    raw = label_packets(table1_tss, table1_universe())
    model = train(ResidualMlp(ModelConfig(2, 5, 16, 1), seed=3), raw,
                  TrainingConfig(epochs_per_round=20, max_rounds=1, seed=3)).model
    pts = [p for p in table1_universe() if linear_scan(table1, p) is not None]
    tr = Trace(pts, [linear_scan(table1, p)[0] for p in pts])
    s = Classifier(model, table1_tss).evaluate(tr)
    assert len(tr) == 41
    assert s.classification_accuracy >= s.model_accuracy


@settings(max_examples=40, deadline=None)
@given(small_rulesets(max_rules=20), st.integers(0, 2**31))
def test_accuracy_ordering_and_no_scenario1_means_exact(rs, seed):
    tss = TssIndex.build(rs)
    rng = np.random.default_rng(seed)
    pts = small_universe()[::29]
    table = rng.integers(0, len(tss), size=len(pts))
    lookup = {p: int(t) for p, t in zip(pts, table)}
    clf = Classifier(None, tss, predictor=lambda arr: np.array([lookup[tuple(int(v) for v in row)] for row in arr]))
    truth = [None if (m := linear_scan(rs, p)) is None else m[0] for p in pts]
    s = clf.evaluate(Trace(pts, truth))
    assert s.classification_accuracy >= s.model_accuracy
    got = _ids(clf.classify_batch(pts))
    if s.scenario1_errors == 0:
        assert got == truth
    assert _ids(clf.with_strict().classify_batch(pts)) == truth


def test_replay_doubles_counters(table1, table1_tss):
    clf = Classifier(None, table1_tss, predictor=constant_predictor(T["T3"]))
    tr = table1_trace(table1)
    once = clf.evaluate(tr)
    twice = clf.evaluate(tr, clf.evaluate(tr))
    assert twice == ClassifyStats(*(2 * getattr(once, f) for f in once.__dataclass_fields__))


def test_concurrent_classify_merges(table1, table1_tss):
    raw = label_packets(table1_tss, table1_universe())
    model = train(ResidualMlp(ModelConfig(2, 5, 16, 1)), raw, TrainingConfig(epochs_per_round=5, max_rounds=1)).model
    clf = Classifier(model, table1_tss)
    pts = table1_universe() * 20
    serial = ClassifyStats()
    expect = clf.classify_batch(pts, serial)
    parts = [ClassifyStats() for _ in range(4)]
    outs = [None] * 4

    def work(k):
        outs[k] = clf.classify_batch(pts[k::4], parts[k])

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    [t.start() for t in threads]
    [t.join() for t in threads]
    merged = ClassifyStats()
    for p in parts:
        merged.merge(p)
    assert merged == serial
    for k in range(4):
        assert outs[k] == expect[k::4]


def test_stats_csv_golden():
    s = ClassifyStats(packets=4, model_correct=3, classification_correct=4, memory_accesses=10)
    buf = io.StringIO()
    write_stats_csv([stats_row("acl1", s, 5)], buf)
    assert buf.getvalue() == ("ruleset,model_acc,class_acc,tuple_count,mean_mem_accesses\n"
                              "acl1,0.750000,1.000000,5,2.5000\n")
