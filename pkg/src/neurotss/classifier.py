"""Two-stage classification: model picks a tuple, the TSS verifies, ordered search on a miss."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

from .model import ResidualMlp
from .ruleset import Trace, segment_batch
from .tss import MatchResult, TssIndex


@dataclass
class ClassifyStats:
    packets: int = 0
    model_correct: int = 0
    classification_correct: int = 0
    memory_accesses: int = 0
    fallbacks: int = 0
    # predicted tuple held a match but a better rule lives elsewhere
    scenario1_errors: int = 0

    def merge(self, other: ClassifyStats) -> ClassifyStats:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    @property
    def model_accuracy(self) -> float:
        return self.model_correct / self.packets if self.packets else 1.0

    @property
    def classification_accuracy(self) -> float:
        return self.classification_correct / self.packets if self.packets else 1.0

    @property
    def mean_accesses(self) -> float:
        return self.memory_accesses / self.packets if self.packets else 0.0


STATS_FIELDS = ["ruleset", "model_acc", "class_acc", "tuple_count", "mean_mem_accesses"]


class Classifier:
    """A model paired with the TSS whose tuple indices it predicts.

    `strict` routes every packet through a full ordered search after the
    predicted-tuple probe, so results always equal a linear scan. Off by
    default: a lower-priority hit in the predicted tuple is returned as is.
    """

    def __init__(self, model: ResidualMlp | None, tss: TssIndex, strict: bool = False,
                 default_action: int | None = None,
                 predictor: Callable[[np.ndarray], np.ndarray] | None = None):
        if model is not None and model.num_classes != len(tss):
            raise ValueError(f"model has {model.num_classes} classes but the index has {len(tss)} tuples")
        if model is None and predictor is None:
            raise ValueError("need a model or a predictor")
        self.model = model
        self.tss = tss
        self.schema = tss.schema
        self.strict = strict
        self.default_action = default_action
        self._predictor = predictor

    def with_strict(self, strict: bool = True) -> Classifier:
        return Classifier(self.model, self.tss, strict, self.default_action, self._predictor)

    def predict_tuples(self, packets: Sequence[Sequence[int]]) -> np.ndarray:
        if len(packets) == 0:
            return np.zeros(0, dtype=np.int64)
        if self._predictor is not None:
            return np.asarray(self._predictor(np.asarray(packets, dtype=np.int64)), dtype=np.int64)
        return np.asarray(self.model.predict(segment_batch(packets, self.schema)), dtype=np.int64)

    def resolve(self, packet: Sequence[int], idx: int,
                stats: ClassifyStats | None = None) -> MatchResult | None:
        """Search-engine stage for one packet given its predicted tuple."""
        tss = self.tss
        hit = tss.lookup_in_tuple(idx, packet)
        cost = hit.access_count if hit is not None else 1
        fell_back = hit is None
        if hit is None:
            res, spent = tss.search(packet, skip=idx)
            cost += spent
        elif self.strict:
            better, spent = tss.search(packet, skip=idx)
            cost += spent
            res = better if better is not None and better.priority < hit.priority else hit
        else:
            res = hit
        if res is not None and res.access_count != cost:
            res = MatchResult(res.rule_id, res.priority, res.action, res.tuple_idx, cost)
        if stats is not None:
            stats.packets += 1
            stats.memory_accesses += cost
            stats.fallbacks += fell_back
        return res

    def classify(self, packet: Sequence[int], stats: ClassifyStats | None = None) -> MatchResult | None:
        return self.classify_batch([packet], stats)[0]

    def classify_batch(self, packets: Sequence[Sequence[int]],
                       stats: ClassifyStats | None = None) -> list[MatchResult | None]:
        if len(packets) == 0:
            return []
        preds = self.predict_tuples(packets)
        with self.tss.lock.read():
            return [self.resolve(p, int(i), stats) for p, i in zip(packets, preds)]

    def action(self, result: MatchResult | None) -> int | None:
        return self.default_action if result is None else result.action

    def evaluate(self, trace: Trace, stats: ClassifyStats | None = None) -> ClassifyStats:
        """Model/classification accuracy and access counts against the trace's ground truth.

        Packets without a ground-truth match count as model-correct when no
        rule is returned and classification-correct when the result is absent.
        """
        stats = stats if stats is not None else ClassifyStats()
        if not len(trace):
            return stats
        preds = self.predict_tuples(trace.packets)
        tss = self.tss
        with tss.lock.read():
            for p, idx, truth in zip(trace.packets, preds, trace.truth):
                idx = int(idx)
                res = self.resolve(p, idx, stats)
                got = None if res is None else res.rule_id
                if truth is None:
                    stats.model_correct += got is None
                else:
                    stats.model_correct += tss.home_of(truth) == idx
                    if got is not None and got != truth and res.tuple_idx == idx:
                        stats.scenario1_errors += 1
                stats.classification_correct += got == truth
        return stats


def stats_row(name: str, stats: ClassifyStats, tuple_count: int) -> dict:
    return {"ruleset": name, "model_acc": f"{stats.model_accuracy:.6f}",
            "class_acc": f"{stats.classification_accuracy:.6f}", "tuple_count": tuple_count,
            "mean_mem_accesses": f"{stats.mean_accesses:.4f}"}


def write_stats_csv(rows: list[dict], dst, header: bool = True) -> None:
    w = csv.DictWriter(dst, fieldnames=STATS_FIELDS, lineterminator="\n")
    if header:
        w.writeheader()
    w.writerows(rows)


def oracle_predictor(tss: TssIndex) -> Callable[[np.ndarray], np.ndarray]:
    """Perfect tuple predictor: host tuple of the linear-scan winner (0 when nothing matches)."""
    from .ruleset import RuleMatrix

    def predict(packets: np.ndarray) -> np.ndarray:
        won = RuleMatrix(tss.schema, tss.rules()).scan(packets)
        return np.array([tss.home_of(int(w)) if w >= 0 else 0 for w in won], dtype=np.int64)

    return predict


def constant_predictor(idx: int) -> Callable[[np.ndarray], np.ndarray]:
    return lambda packets: np.full(len(packets), idx, dtype=np.int64)
