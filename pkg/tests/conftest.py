import numpy as np
import pytest
from hypothesis import strategies as st

from neurotss.ruleset import (FieldKind, Masked, Prefix, Range, Rule, Ruleset, table1_ruleset,
                              table1_universe)
from neurotss.tss import TssIndex

# Eight-rule fixture: rules R1..R8 have ids 0..7; tuples T1..T5 have indices 0..4.
R = {f"R{i + 1}": i for i in range(8)}
T = {f"T{i + 1}": i for i in range(5)}

SMALL_SCHEMA = (
    FieldKind("prefix", 4, "a"),
    FieldKind("prefix", 4, "b"),
    FieldKind("range", 4, "c"),
    FieldKind("masked", 3, "d"),
)


@pytest.fixture
def table1():
    return table1_ruleset()


@pytest.fixture
def table1_tss(table1):
    return TssIndex.build(table1)


@pytest.fixture
def universe():
    return table1_universe()


@st.composite
def small_rulesets(draw, min_rules=1, max_rules=25):
    """Random rulesets over SMALL_SCHEMA, priorities a random permutation."""
    n = draw(st.integers(min_rules, max_rules))
    prios = draw(st.permutations(range(n)))
    rules = []
    for i in range(n):
        conds = []
        for fk in SMALL_SCHEMA:
            if fk.kind == "prefix":
                length = draw(st.integers(0, fk.width))
                v = draw(st.integers(0, fk.max_value))
                conds.append(Prefix(v & ~((1 << (fk.width - length)) - 1) & fk.max_value, length))
            elif fk.kind == "range":
                lo = draw(st.integers(0, fk.max_value))
                conds.append(Range(lo, draw(st.integers(lo, fk.max_value))))
            else:
                m = draw(st.integers(0, fk.max_value))
                conds.append(Masked(draw(st.integers(0, fk.max_value)) & m, m))
        rules.append(Rule(i, prios[i], tuple(conds), i))
    return Ruleset(SMALL_SCHEMA, rules)


def small_universe():
    return [(a, b, c, d) for a in range(16) for b in range(16) for c in range(0, 16, 3) for d in range(8)]


def brute_force(ruleset, packet):
    """Independent oracle: enumerate every rule, check each field bit by bit."""
    best = None
    for r in ruleset.rules:
        ok = True
        for fk, c, v in zip(ruleset.schema, r.conditions, packet):
            if isinstance(c, Prefix):
                bits_v = format(v, f"0{fk.width}b")[:c.length]
                bits_r = format(c.value, f"0{fk.width}b")[:c.length]
                ok &= bits_v == bits_r
            elif isinstance(c, Range):
                ok &= c.lo <= v <= c.hi
            else:
                ok &= all(((c.mask >> b) & 1) == 0 or ((v >> b) & 1) == ((c.value >> b) & 1)
                          for b in range(fk.width))
        if ok and (best is None or r.priority < best[1]):
            best = (r.id, r.priority)
    return best


_criteria: dict[int, tuple[str, str, float]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    n, name = mark.args
    if rep.when == "call" or n not in _criteria:
        _criteria[n] = (name, "PASS" if rep.passed else "FAIL", rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        name, verdict, secs = _criteria[n]
        terminalreporter.write_line(f"{verdict} criterion {n:2d}: {name} ({secs:.2f}s)")
