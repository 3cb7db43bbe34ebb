"""Batched two-stage pipeline with double buffering, plus the rule update engine."""

from __future__ import annotations

import csv
import enum
import itertools
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .classifier import Classifier, ClassifyStats
from .model import (ModelConfig, ResidualMlp, TrainingConfig, generate_training_data, incremental_train,
                    label_packets, train)
from .ruleset import (FieldKind, Packet, ParseError, Rule, Ruleset, format_rule, generate_traffic,
                      parse_rule_tokens)
from .tss import InsertionError, MatchResult, TssIndex


@dataclass(frozen=True)
class PipelineConfig:
    batch_size: int = 8192
    lanes: int = 4
    window_seconds: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.lanes < 1:
            raise ValueError("batch_size and lanes must be >= 1")


class BufferOwnershipError(RuntimeError):
    pass


class _Buffer:
    def __init__(self, index: int):
        self.index = index
        self.owner: str | None = None
        self.batch_no = -1
        self.packets: list[Packet] = []
        self.preds: np.ndarray | None = None
        self.classifier: Classifier | None = None


class DoubleBuffer:
    """Two result buffers handed between the inference and search stages.

    A buffer moves free -> inference -> full -> search -> free. Acquiring a
    buffer someone else holds raises, which is the ownership check tests use.
    """

    def __init__(self):
        self.buffers = [_Buffer(0), _Buffer(1)]
        self.free: queue.Queue[_Buffer] = queue.Queue()
        self.full: queue.Queue[_Buffer | None] = queue.Queue()
        for b in self.buffers:
            self.free.put(b)
        self._lock = threading.Lock()
        self.events: list[tuple[str, int, str]] = []

    def acquire(self, buf: _Buffer, stage: str) -> None:
        with self._lock:
            if buf.owner is not None:
                raise BufferOwnershipError(f"{stage} tried to take buffer {buf.index} held by {buf.owner}")
            buf.owner = stage
            self.events.append((stage, buf.index, "acquire"))

    def release(self, buf: _Buffer, stage: str) -> None:
        with self._lock:
            if buf.owner != stage:
                raise BufferOwnershipError(f"{stage} released buffer {buf.index} it does not hold")
            buf.owner = None
            self.events.append((stage, buf.index, "release"))


class ClassifierHandle:
    """Atomic publication point for the live classifier."""

    def __init__(self, classifier: Classifier):
        self._current = classifier
        self._lock = threading.Lock()

    @property
    def current(self) -> Classifier:
        with self._lock:
            return self._current

    def publish(self, classifier: Classifier) -> None:
        with self._lock:
            self._current = classifier


@dataclass
class WindowRecord:
    window_index: int
    packets: int
    elapsed: float
    throughput: float
    decision_taken: str = "None"
    extra: dict = field(default_factory=dict)


@dataclass
class PipelineReport:
    results: list[MatchResult | None]
    windows: list[WindowRecord]
    stats: ClassifyStats
    events: list[tuple[str, int, str]]


REPORT_FIELDS = ["window_index", "packets", "elapsed", "throughput", "decision_taken"]


def write_report(windows: Sequence[WindowRecord], dst, extra_fields: Sequence[str] = ()) -> None:
    w = csv.writer(dst, lineterminator="\n")
    w.writerow(REPORT_FIELDS + list(extra_fields))
    for r in windows:
        w.writerow([r.window_index, r.packets, f"{r.elapsed:.6g}", f"{r.throughput:.6g}", r.decision_taken]
                   + [r.extra.get(k, "") for k in extra_fields])


def _batches(source: Iterable[Packet], size: int) -> Iterator[list[Packet]]:
    it = iter(source)
    while True:
        batch = list(itertools.islice(it, size))
        if not batch:
            return
        yield batch


def _infer(classifier: Classifier, packets: list[Packet], pool: ThreadPoolExecutor | None,
           lanes: int) -> np.ndarray:
    if pool is None or lanes == 1 or len(packets) < 2:
        return classifier.predict_tuples(packets)
    segments = [s for s in np.array_split(np.arange(len(packets)), lanes) if len(s)]
    futures = [pool.submit(classifier.predict_tuples, [packets[i] for i in seg]) for seg in segments]
    return np.concatenate([f.result() for f in futures])


def run_pipeline(classifier: Classifier | ClassifierHandle, source: Iterable[Packet],
                 config: PipelineConfig = PipelineConfig(),
                 on_window: Callable[[WindowRecord], Classifier | None] | None = None,
                 clock: Callable[[], float] = time.perf_counter) -> PipelineReport:
    """Classify `source` with inference and search overlapped across two buffers.

    Inference splits each batch across `lanes` workers and fills one buffer
    while the search stage drains the other. Results keep input order. When a
    window closes, `on_window` may return a replacement classifier; it is used
    from the next batch that inference picks up.
    """
    handle = classifier if isinstance(classifier, ClassifierHandle) else ClassifierHandle(classifier)
    buffers = DoubleBuffer()
    failure: list[BaseException] = []
    stop = threading.Event()

    def inference_stage():
        pool = ThreadPoolExecutor(config.lanes) if config.lanes > 1 else None
        try:
            for n, batch in enumerate(_batches(source, config.batch_size)):
                buf = buffers.free.get()
                if stop.is_set():
                    break
                buffers.acquire(buf, "inference")
                clf = handle.current
                buf.batch_no, buf.packets, buf.classifier = n, batch, clf
                buf.preds = _infer(clf, batch, pool, config.lanes)
                buffers.release(buf, "inference")
                buffers.full.put(buf)
        except BaseException as e:  # surfaced in the caller thread
            failure.append(e)
        finally:
            if pool is not None:
                pool.shutdown()
            buffers.full.put(None)

    worker = threading.Thread(target=inference_stage, name="inference", daemon=True)
    results: list[MatchResult | None] = []
    windows: list[WindowRecord] = []
    stats = ClassifyStats()
    win_packets = 0
    win_start = clock()

    def close_window(now: float) -> None:
        nonlocal win_packets, win_start
        elapsed = now - win_start
        rec = WindowRecord(len(windows), win_packets, elapsed, win_packets / elapsed if elapsed > 0 else 0.0)
        windows.append(rec)
        if on_window is not None:
            replacement = on_window(rec)
            if replacement is not None:
                handle.publish(replacement)
        win_packets, win_start = 0, now

    worker.start()
    try:
        while True:
            buf = buffers.full.get()
            if buf is None:
                break
            buffers.acquire(buf, "search")
            clf = buf.classifier
            with clf.tss.lock.read():
                for p, idx in zip(buf.packets, buf.preds):
                    results.append(clf.resolve(p, int(idx), stats))
            win_packets += len(buf.packets)
            buffers.release(buf, "search")
            buffers.free.put(buf)
            now = clock()
            if now - win_start >= config.window_seconds:
                close_window(now)
    finally:
        stop.set()
        buffers.free.put(buffers.buffers[0])  # unblock a waiting producer
        worker.join()
    if failure:
        raise failure[0]
    if win_packets:
        close_window(clock())
    return PipelineReport(results, windows, stats, buffers.events)


# Update policy ################################################################

class UpdateDecision(enum.Enum):
    NONE = "None"
    INCREMENTAL = "Incremental"
    FULL_RETRAIN = "FullRetrain"


@dataclass
class ThroughputMonitor:
    tau: float = 0.05
    th_base: float | None = None
    th_cur: float | None = None

    def record_window(self, packets: int, elapsed: float) -> float:
        if elapsed <= 0:
            raise ValueError("window elapsed time must be positive")
        self.th_cur = packets / elapsed
        if self.th_base is None:
            self.th_base = self.th_cur
        return self.th_cur

    @property
    def degradation(self) -> float:
        if not self.th_base or self.th_cur is None:
            return 0.0
        return 1.0 - self.th_cur / self.th_base

    def reset(self) -> None:
        """Forget th_base; the next window re-latches it (after a full retrain)."""
        self.th_base = None
        self.th_cur = None


def record_window(monitor: ThroughputMonitor, packets: int, elapsed: float) -> ThroughputMonitor:
    monitor.record_window(packets, elapsed)
    return monitor


def decide_update(monitor: ThroughputMonitor, mismatch_count: float, theta: float,
                  tau: float | None = None) -> UpdateDecision:
    tau = monitor.tau if tau is None else tau
    if monitor.degradation <= tau:
        return UpdateDecision.NONE
    if mismatch_count > theta:
        return UpdateDecision.FULL_RETRAIN
    return UpdateDecision.INCREMENTAL


@dataclass(frozen=True)
class Insert:
    conditions: tuple
    priority: int | None = None
    action: int | None = None
    rule_id: int | None = None


@dataclass(frozen=True)
class Delete:
    rule_id: int


@dataclass(frozen=True)
class Modify:
    rule_id: int
    action: int | None = None
    priority: int | None = None


Update = Insert | Delete | Modify


def apply_immediate(classifier: Classifier, update: Update) -> int | bool:
    """Apply one rule update to the classifier's index; the model is not touched.

    Inserts return the host tuple index and propagate InsertionError when no
    tuple fits. Deletes and modifies return whether the rule existed.
    """
    tss = classifier.tss
    if isinstance(update, Delete):
        return tss.delete_rule(update.rule_id)
    if isinstance(update, Modify):
        return tss.modify_rule(update.rule_id, update.action, update.priority)
    rules = tss.rules()
    rid = update.rule_id if update.rule_id is not None else max((r.id for r in rules), default=-1) + 1
    prio = update.priority if update.priority is not None else max((r.priority for r in rules), default=-1) + 1
    action = update.action if update.action is not None else rid
    return tss.insert_rule(Rule(rid, prio, tuple(update.conditions), action))


def parse_update_script(text: str, schema: Sequence[FieldKind]) -> list[list[Update]]:
    """Windows of updates. '=' lines open a window, '+[priority] @rule' inserts, '-id' deletes."""
    windows: list[list[Update]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("="):
            windows.append([])
            continue
        if not windows:
            windows.append([])
        try:
            if line.startswith("-"):
                windows[-1].append(Delete(int(line[1:])))
            elif line.startswith("+"):
                body = line[1:].strip()
                prio = None
                if not body.startswith("@"):
                    head, _, body = body.partition("@")
                    prio = int(head)
                    body = "@" + body
                windows[-1].append(Insert(parse_rule_tokens(body[1:].split(), schema), prio))
            else:
                raise ValueError("expected '=', '+' or '-'")
        except ValueError as e:
            raise ParseError(lineno, str(e)) from None
    return windows


class UpdateEngine:
    """Deferred-update policy: throughput trigger (tau) and mismatch threshold (theta).

    With `proportional`, theta is compared with mismatches / ruleset size
    instead of the absolute mismatch count.
    """

    def __init__(self, theta: float = 10_000, tau: float = 0.05, incremental_epochs: int = 50,
                 incremental_seconds: float | None = None, proportional: bool = False,
                 training: TrainingConfig | None = None, neurons: int | None = None,
                 blocks: int | None = None):
        self.theta = theta
        self.monitor = ThroughputMonitor(tau)
        self.incremental_epochs = incremental_epochs
        self.incremental_seconds = incremental_seconds
        self.proportional = proportional
        self.training = training or TrainingConfig()
        self.neurons = neurons
        self.blocks = blocks
        self.below_threshold = False

    def mismatch_measure(self, tss: TssIndex) -> float:
        if self.proportional:
            n = len(tss.rules())
            return tss.mismatch_count / n if n else 0.0
        return tss.mismatch_count

    def observe(self, classifier: Classifier, packets: int, elapsed: float) -> UpdateDecision:
        self.monitor.record_window(packets, elapsed)
        return decide_update(self.monitor, self.mismatch_measure(classifier.tss), self.theta)

    def execute_deferred(self, classifier: Classifier, decision: UpdateDecision,
                         traffic: Sequence[Packet], epochs: int | None = None) -> Classifier:
        """Build the replacement classifier for `decision` from a sample of current traffic."""
        if decision is UpdateDecision.NONE:
            raise ValueError("nothing to execute for decision None")
        cfg = self.training
        if decision is UpdateDecision.INCREMENTAL:
            data = generate_training_data(classifier.tss, traffic, cfg.alpha)
            model = incremental_train(classifier.model, data,
                                      self.incremental_epochs if epochs is None else epochs, cfg,
                                      self.incremental_seconds)
            return Classifier(model, classifier.tss, classifier.strict, classifier.default_action)
        tss = TssIndex.build(classifier.tss.ruleset())
        old = classifier.model.config
        mc = ModelConfig(old.input_dim, len(tss), self.neurons or old.neurons,
                         old.blocks if self.blocks is None else self.blocks)
        result = train(ResidualMlp(mc, cfg.seed), label_packets(tss, traffic), cfg)
        self.below_threshold = result.below_threshold
        self.monitor.reset()
        return Classifier(result.model, tss, classifier.strict, classifier.default_action)


# Update simulation ############################################################

@dataclass(frozen=True)
class CostClock:
    """Deterministic elapsed-time model: fixed inference cost per packet plus cost per memory access."""

    inference_cost: float = 4.0
    access_cost: float = 1.0
    unit: float = 1e-9

    def elapsed(self, packets: int, accesses: int) -> float:
        return (packets * self.inference_cost + accesses * self.access_cost) * self.unit


def simulate_updates(classifier: Classifier, script: Sequence[Sequence[Update]],
                     engine: UpdateEngine | None = None, packets_per_window: int = 5000,
                     seed: int = 0, config: PipelineConfig = PipelineConfig(batch_size=1024, lanes=1),
                     clock: CostClock | None = CostClock(),
                     injected: Sequence[float] | None = None) -> list[WindowRecord]:
    """Replay an update script window by window.

    Each window applies its immediate updates, classifies fresh traffic drawn
    from the current ruleset, and records throughput. With an engine (IU+DU)
    the window's throughput feeds the deferred policy and any new classifier
    serves from the next window. `injected` overrides measured throughputs.
    `clock=None` measures wall time.
    """
    handle = ClassifierHandle(classifier)
    records: list[WindowRecord] = []
    for w, ops in enumerate(script):
        clf = handle.current
        inserted = failed = deleted = 0
        for op in ops:
            try:
                apply_immediate(clf, op)
                inserted += isinstance(op, Insert)
                deleted += isinstance(op, Delete)
            except InsertionError:
                failed += 1
        ruleset = clf.tss.ruleset()
        trace = generate_traffic(ruleset, packets_per_window if len(ruleset) else 0, seed + 7919 * (w + 1))
        t0 = time.perf_counter()
        report = run_pipeline(clf, trace.packets, config, clock=lambda: 0.0)
        wall = time.perf_counter() - t0
        stats = clf.evaluate(trace)
        strict = clf.with_strict().classify_batch(trace.packets)
        divergence = sum((a is None) != (b is None) or (a is not None and a.rule_id != b.rule_id)
                         for a, b in zip(report.results, strict))
        n = len(trace)
        if injected is not None and w < len(injected):
            throughput = injected[w]
            elapsed = n / throughput if throughput > 0 else 0.0
        elif clock is not None:
            elapsed = clock.elapsed(n, report.stats.memory_accesses)
            throughput = n / elapsed if elapsed > 0 else 0.0
        else:
            elapsed = wall
            throughput = n / elapsed if elapsed > 0 else 0.0
        rec = WindowRecord(w, n, elapsed, throughput)
        rec.extra = {"inserted": inserted, "deleted": deleted, "insert_failures": failed,
                     "mismatch_count": clf.tss.mismatch_count,
                     "model_acc": f"{stats.model_accuracy:.6f}",
                     "class_acc": f"{stats.classification_accuracy:.6f}",
                     "divergence": divergence,
                     "degradation": ""}
        if engine is not None and elapsed > 0:
            decision = engine.observe(clf, n, elapsed)
            rec.decision_taken = decision.value
            rec.extra["degradation"] = f"{engine.monitor.degradation:.6f}"
            if decision is not UpdateDecision.NONE:
                sample = generate_traffic(ruleset, packets_per_window, seed + 104729 * (w + 1)).packets
                fresh = engine.execute_deferred(clf, decision, sample)
                check = generate_traffic(ruleset, packets_per_window, seed + 15485863 * (w + 1))
                rec.extra["pre_deploy_acc"] = f"{clf.evaluate(check).model_accuracy:.6f}"
                rec.extra["post_deploy_acc"] = f"{fresh.evaluate(check).model_accuracy:.6f}"
                handle.publish(fresh)
        records.append(rec)
    return records


SIM_EXTRA_FIELDS = ["inserted", "deleted", "insert_failures", "mismatch_count", "model_acc", "class_acc",
                    "divergence", "degradation", "pre_deploy_acc", "post_deploy_acc"]


def drift_script(base: Ruleset, donor: Ruleset, windows: int, per_window: int, seed: int = 0) -> list[list[Update]]:
    """Each window deletes `per_window` random live rules and inserts as many donor rules.

    Inserted rules take over the freed priorities so they land among the
    existing rules rather than at the bottom of the ruleset.
    """
    rng = np.random.default_rng(seed)
    live = {r.id: r.priority for r in base.rules}
    next_id = max(live, default=-1) + 1
    donors = list(donor.rules)
    rng.shuffle(donors)
    script: list[list[Update]] = []
    for _ in range(windows):
        ops: list[Update] = []
        victims = rng.choice(sorted(live), size=min(per_window, len(live)), replace=False)
        freed = []
        for rid in victims:
            freed.append(live.pop(int(rid)))
            ops.append(Delete(int(rid)))
        for prio in freed:
            if not donors:
                break
            d = donors.pop()
            ops.append(Insert(d.conditions, prio, next_id, next_id))
            live[next_id] = prio
            next_id += 1
        script.append(ops)
    return script


def format_update_script(script: Sequence[Sequence[Update]], schema: Sequence[FieldKind]) -> str:
    out = []
    for w, ops in enumerate(script):
        out.append(f"= window {w}")
        for op in ops:
            if isinstance(op, Delete):
                out.append(f"-{op.rule_id}")
            elif isinstance(op, Insert):
                line = format_rule(schema, Rule(0, 0, tuple(op.conditions)))
                out.append(f"+{'' if op.priority is None else op.priority} {line}")
    return "\n".join(out) + "\n"
