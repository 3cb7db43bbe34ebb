"""Tuple space middleware: prefix-length tuples, truncated-key buckets, ordered fallback."""

from __future__ import annotations

import bisect
import json
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, Sequence

from .ruleset import FieldKind, Rule, Ruleset, format_rule, parse_rule_tokens, validate_rule

Signature = tuple[int, ...]


class InsertionError(RuntimeError):
    """No existing tuple can host the rule; a full rebuild is required."""


class RWLock:
    """Many readers or one writer. Writers wait for readers to leave and block new ones."""

    def __init__(self):
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False
        self._waiting_writers = 0

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer or self._waiting_writers:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            self._waiting_writers += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._waiting_writers -= 1
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


@dataclass(frozen=True)
class MatchResult:
    rule_id: int
    priority: int
    action: int
    tuple_idx: int
    access_count: int


def truncate_key(values: Sequence[int], signature: Signature, widths: Sequence[int]) -> int:
    """Mask each value to its signature prefix and concatenate big-endian into one int."""
    key = 0
    for v, length, w in zip(values, signature, widths):
        key = (key << w) | ((v >> (w - length)) << (w - length) if length else 0)
    return key


@dataclass
class Tuple:
    index: int
    signature: Signature
    buckets: dict[int, list[Rule]] = field(default_factory=dict)
    max_precedence: float = math.inf
    size: int = 0

    def refresh(self) -> None:
        # buckets are priority-sorted, so each bucket head is its best rule
        self.max_precedence = min((b[0].priority for b in self.buckets.values() if b), default=math.inf)
        self.size = sum(len(b) for b in self.buckets.values())


class TssIndex:
    """Fixed set of tuples built from a ruleset.

    Tuple indices are the model's class labels, so the tuple set never
    changes after `build`; immediate updates only move rules in and out of
    existing buckets.
    """

    def __init__(self, schema: Sequence[FieldKind]):
        self.schema = tuple(schema)
        self.sig_fields = [i for i, fk in enumerate(self.schema) if fk.kind == "prefix"]
        self.sig_widths = [self.schema[i].width for i in self.sig_fields]
        self.tuples: list[Tuple] = []
        self.precedence_order: list[int] = []
        self.mismatch_count = 0
        self.lock = RWLock()
        self._home: dict[int, int] = {}
        self._rules: dict[int, Rule] = {}
        self._prios: set[int] = set()
        self._by_sig: dict[Signature, int] = {}

    # construction

    @classmethod
    def build(cls, ruleset: Ruleset) -> TssIndex:
        tss = cls(ruleset.schema)
        for r in ruleset.rules:
            sig = r.prefix_lengths(tss.schema)
            idx = tss._by_sig.get(sig)
            if idx is None:
                idx = len(tss.tuples)
                tss.tuples.append(Tuple(idx, sig))
                tss._by_sig[sig] = idx
            tss._place(r, idx)
        for t in tss.tuples:
            t.refresh()
        tss._reorder()
        return tss

    @classmethod
    def from_signatures(cls, schema: Sequence[FieldKind], signatures: Sequence[Signature]) -> TssIndex:
        tss = cls(schema)
        for sig in signatures:
            sig = tuple(sig)
            if sig in tss._by_sig:
                raise ValueError(f"duplicate signature {sig}")
            tss._by_sig[sig] = len(tss.tuples)
            tss.tuples.append(Tuple(len(tss.tuples), sig))
        tss._reorder()
        return tss

    def _key_of_rule(self, rule: Rule, sig: Signature) -> int:
        vals = [rule.conditions[i].value for i in self.sig_fields]
        return truncate_key(vals, sig, self.sig_widths)

    def _place(self, rule: Rule, idx: int) -> None:
        if rule.id in self._rules:
            raise ValueError(f"rule id {rule.id} already present")
        t = self.tuples[idx]
        bucket = t.buckets.setdefault(self._key_of_rule(rule, t.signature), [])
        pos = bisect.bisect_left([r.priority for r in bucket], rule.priority)
        bucket.insert(pos, rule)
        self._home[rule.id] = idx
        self._rules[rule.id] = rule
        self._prios.add(rule.priority)

    def _reorder(self) -> None:
        self.precedence_order = sorted(range(len(self.tuples)),
                                       key=lambda i: (self.tuples[i].max_precedence, i))

    # introspection

    def __len__(self) -> int:
        return len(self.tuples)

    @property
    def signatures(self) -> list[Signature]:
        return [t.signature for t in self.tuples]

    def rules(self) -> list[Rule]:
        return sorted(self._rules.values(), key=lambda r: r.priority)

    def ruleset(self) -> Ruleset:
        return Ruleset(self.schema, self.rules())

    def home_of(self, rule_id: int) -> int | None:
        return self._home.get(rule_id)

    def rule(self, rule_id: int) -> Rule | None:
        return self._rules.get(rule_id)

    def tuple_members(self, idx: int) -> list[int]:
        return sorted((r.id for b in self.tuples[idx].buckets.values() for r in b),
                      key=lambda i: self._rules[i].priority)

    # lookup

    def packet_key(self, packet: Sequence[int], sig: Signature) -> int:
        return truncate_key([packet[i] for i in self.sig_fields], sig, self.sig_widths)

    def probe(self, idx: int, packet: Sequence[int]) -> tuple[Rule | None, int]:
        t = self.tuples[idx]
        bucket = t.buckets.get(self.packet_key(packet, t.signature))
        if not bucket:
            return None, 1
        schema = self.schema
        n = 1
        for r in bucket:
            n += 1
            for fk, c, v in zip(schema, r.conditions, packet):
                if not c.contains(v, fk.width):
                    break
            else:
                return r, n
        return None, n

    def lookup_in_tuple(self, idx: int, packet: Sequence[int]) -> MatchResult | None:
        r, n = self.probe(idx, packet)
        return None if r is None else MatchResult(r.id, r.priority, r.action, idx, n)

    def search(self, packet: Sequence[int], skip: int | None = None,
               prune: bool = True) -> tuple[MatchResult | None, int]:
        """Best match over all tuples but `skip`, plus the accesses spent (also on a miss)."""
        best: Rule | None = None
        best_idx = -1
        total = 0
        for idx in self.precedence_order:
            t = self.tuples[idx]
            if idx == skip or not t.size:
                continue
            if prune and best is not None and t.max_precedence >= best.priority:
                # precedence_order is ascending, every later tuple is no better
                break
            r, n = self.probe(idx, packet)
            total += n
            if r is not None and (best is None or r.priority < best.priority):
                best, best_idx = r, idx
        if best is None:
            return None, total
        return MatchResult(best.id, best.priority, best.action, best_idx, total), total

    def ordered_search(self, packet: Sequence[int], skip: int | None = None,
                       prune: bool = True) -> MatchResult | None:
        return self.search(packet, skip, prune)[0]

    # immediate updates

    def choose_tuple(self, rule: Rule) -> tuple[int, bool]:
        """Host tuple for a new rule and whether its signature matches exactly."""
        if not self.tuples:
            raise InsertionError("index has no tuples")
        sig = rule.prefix_lengths(self.schema)
        exact = self._by_sig.get(sig)
        if exact is not None:
            return exact, True
        best, best_sum = None, -1
        for t in self.tuples:
            if all(lt <= lr for lt, lr in zip(t.signature, sig)):
                s = sum(t.signature)
                if s > best_sum:
                    best, best_sum = t.index, s
        if best is None:
            raise InsertionError(f"no tuple can host rule {rule.id} with signature {sig}")
        return best, False

    def insert_rule(self, rule: Rule) -> int:
        validate_rule(self.schema, rule)
        with self.lock.write():
            if rule.id in self._rules:
                raise ValueError(f"rule id {rule.id} already present")
            if rule.priority in self._prios:
                raise ValueError(f"priority {rule.priority} already in use")
            idx, exact = self.choose_tuple(rule)
            self._place(rule, idx)
            if not exact:
                self.mismatch_count += 1
            self.tuples[idx].refresh()
            self._reorder()
        return idx

    def delete_rule(self, rule_id: int) -> bool:
        with self.lock.write():
            rule = self._rules.pop(rule_id, None)
            if rule is None:
                return False
            idx = self._home.pop(rule_id)
            self._prios.discard(rule.priority)
            t = self.tuples[idx]
            key = self._key_of_rule(rule, t.signature)
            bucket = t.buckets[key]
            bucket.remove(rule)
            if not bucket:
                del t.buckets[key]
            t.refresh()
            self._reorder()
        return True

    def modify_rule(self, rule_id: int, action: int | None = None, priority: int | None = None) -> bool:
        with self.lock.write():
            old = self._rules.get(rule_id)
            if old is None:
                return False
            if priority is not None and priority != old.priority and priority in self._prios:
                raise ValueError(f"priority {priority} already in use")
            new = Rule(old.id, old.priority if priority is None else priority, old.conditions,
                       old.action if action is None else action)
            idx = self._home[rule_id]
            t = self.tuples[idx]
            bucket = t.buckets[self._key_of_rule(old, t.signature)]
            bucket.remove(old)
            pos = bisect.bisect_left([r.priority for r in bucket], new.priority)
            bucket.insert(pos, new)
            self._rules[rule_id] = new
            self._prios.discard(old.priority)
            self._prios.add(new.priority)
            t.refresh()
            self._reorder()
        return True

    # text dump / serialization

    def summary(self) -> str:
        lines = ["index\tsignature\trules\tmax_precedence"]
        for t in self.tuples:
            mp = "-" if math.isinf(t.max_precedence) else str(t.max_precedence)
            lines.append(f"{t.index}\t{','.join(map(str, t.signature))}\t{t.size}\t{mp}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "schema": [[fk.kind, fk.width, fk.name] for fk in self.schema],
            "mismatch_count": self.mismatch_count,
            "tuples": [
                {"signature": list(t.signature),
                 "rules": [[r.id, r.priority, r.action, format_rule(self.schema, r)]
                           for rid in self.tuple_members(t.index) for r in [self._rules[rid]]]}
                for t in self.tuples
            ],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> TssIndex:
        doc = json.loads(text)
        schema = tuple(FieldKind(k, w, n) for k, w, n in doc["schema"])
        tss = cls.from_signatures(schema, [tuple(t["signature"]) for t in doc["tuples"]])
        for idx, t in enumerate(doc["tuples"]):
            for rid, prio, action, line in t["rules"]:
                conds = parse_rule_tokens(line[1:].split(), schema)
                rule = Rule(rid, prio, conds, action)
                validate_rule(schema, rule)
                tss._place(rule, idx)
        tss.mismatch_count = int(doc.get("mismatch_count", 0))
        for t in tss.tuples:
            t.refresh()
        tss._reorder()
        return tss

    def iter_tuples(self) -> Iterator[Tuple]:
        return iter(self.tuples)


def build(ruleset: Ruleset) -> TssIndex:
    return TssIndex.build(ruleset)

