"""Residual MLP tuple predictor: forward/backward, Adam training with the alpha/beta loop, model files."""

from __future__ import annotations

import copy
import csv
import struct
import time
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .ruleset import RuleMatrix, segment_batch
from .tss import TssIndex

MAGIC = b"NTSSMLP\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIII")


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    neurons: int = 64
    blocks: int = 2

    def __post_init__(self):
        if min(self.input_dim, self.num_classes, self.neurons) < 1 or self.blocks < 0:
            raise ValueError(f"invalid model dimensions {self}")


@dataclass
class TrainingConfig:
    alpha: int = 100
    beta: float = 0.95
    batch_size: int = 256
    epochs_per_round: int = 200
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_decay_every: int = 40
    max_rounds: int = 3
    seed: int = 0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8

    @classmethod
    def paper_scale(cls, **kw) -> TrainingConfig:
        base = dict(alpha=1000, batch_size=8192, epochs_per_round=1000, lr_decay_every=200)
        base.update(kw)
        return cls(**base)


def _f32(a: np.ndarray) -> np.ndarray:
    # params live in float64 but always hold float32-representable values
    return a.astype(np.float32).astype(np.float64)


class ResidualMlp:
    """Input FC + ReLU, `blocks` residual blocks, output FC producing raw logits.

    Each block computes relu(relu(h @ w1 + b1) @ w2 + b2 + h).
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        S, N, C = config.input_dim, config.neurons, config.num_classes

        def dense(fan_in, fan_out):
            lim = np.sqrt(6.0 / fan_in)
            return _f32(rng.uniform(-lim, lim, size=(fan_in, fan_out))), np.zeros(fan_out)

        self.params: list[np.ndarray] = [*dense(S, N)]
        for _ in range(config.blocks):
            w1, b1 = dense(N, N)
            w2, b2 = dense(N, N)
            self.params += [w1, b1, w2, b2]
        self.params += [*dense(N, C)]
        self.mac_count = 0

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def copy(self) -> ResidualMlp:
        m = copy.copy(self)
        m.params = [p.copy() for p in self.params]
        m.mac_count = 0
        return m

    def macs_per_example(self) -> int:
        c = self.config
        return c.input_dim * c.neurons + 2 * c.blocks * c.neurons * c.neurons + c.neurons * c.num_classes

    def _as_batch(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.config.input_dim:
            raise ValueError(f"expected {self.config.input_dim} features, got {x.shape[1]}")
        return x

    def forward(self, x, cache: list | None = None) -> np.ndarray:
        """Logits for a feature vector (shape (C,)) or a batch (shape (n, C))."""
        single = np.ndim(x) == 1
        x = self._as_batch(x)
        p = self.params
        z0 = x @ p[0] + p[1]
        h = np.maximum(z0, 0.0)
        if cache is not None:
            cache.append((x, z0))
        for b in range(self.config.blocks):
            w1, b1, w2, b2 = p[2 + 4 * b: 6 + 4 * b]
            u = h @ w1 + b1
            a = np.maximum(u, 0.0)
            v = a @ w2 + b2 + h
            if cache is not None:
                cache.append((h, u, a, v))
            h = np.maximum(v, 0.0)
        if cache is not None:
            cache.append(h)
        logits = h @ p[-2] + p[-1]
        self.mac_count += len(x) * self.macs_per_example()
        return logits[0] if single else logits

    def predict(self, x) -> np.ndarray | int:
        logits = self.forward(x)
        # np.argmax returns the lowest index on ties
        return int(np.argmax(logits)) if logits.ndim == 1 else np.argmax(logits, axis=1)

    def loss_and_grads(self, x, y) -> tuple[float, list[np.ndarray]]:
        """Mean softmax cross-entropy and its gradient for every parameter."""
        y = np.asarray(y, dtype=np.int64)
        cache: list = []
        logits = self.forward(x, cache)
        n = len(y)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(logz - shifted[np.arange(n), y]))
        probs = np.exp(shifted - logz[:, None])
        probs[np.arange(n), y] -= 1.0
        d = probs / n

        p = self.params
        grads: list[np.ndarray] = [None] * len(p)  # type: ignore[list-item]
        h_last = cache[-1]
        grads[-2] = h_last.T @ d
        grads[-1] = d.sum(axis=0)
        dh = d @ p[-2].T
        for b in reversed(range(self.config.blocks)):
            h_in, u, a, v = cache[1 + b]
            w1, w2 = p[2 + 4 * b], p[4 + 4 * b]
            dv = dh * (v > 0)
            grads[4 + 4 * b] = a.T @ dv
            grads[5 + 4 * b] = dv.sum(axis=0)
            du = (dv @ w2.T) * (u > 0)
            grads[2 + 4 * b] = h_in.T @ du
            grads[3 + 4 * b] = du.sum(axis=0)
            dh = du @ w1.T + dv
        x, z0 = cache[0]
        dz0 = dh * (z0 > 0)
        grads[0] = x.T @ dz0
        grads[1] = dz0.sum(axis=0)
        return loss, grads


def predict_logits(logits: Sequence[float]) -> int:
    return int(np.argmax(np.asarray(logits)))


# Data #########################################################################

@dataclass
class TrainingSet:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> dict[int, int]:
        vals, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}


def label_packets(tss: TssIndex, packets: Sequence[Sequence[int]]) -> TrainingSet:
    """Features and host-tuple label for every packet with a match; misses are dropped."""
    S = len(segment_batch(np.zeros((1, len(tss.schema)), dtype=np.int64), tss.schema)[0])
    if len(packets) == 0:
        return TrainingSet(np.zeros((0, S), np.float32), np.zeros(0, np.int64))
    arr = np.asarray(packets, dtype=np.int64)
    won = RuleMatrix(tss.schema, tss.rules()).scan(arr)
    keep = won >= 0
    labels = np.array([tss.home_of(int(r)) for r in won[keep]], dtype=np.int64)
    return TrainingSet(segment_batch(arr[keep], tss.schema), labels)


def oversample(raw: TrainingSet, alpha: int) -> TrainingSet:
    """Duplicate examples of every present class round-robin until it has at least alpha."""
    feats, labels = [raw.features], [raw.labels]
    for cls, count in raw.class_counts().items():
        if count < alpha:
            idx = np.flatnonzero(raw.labels == cls)
            extra = idx[np.arange(alpha - count) % count]
            feats.append(raw.features[extra])
            labels.append(raw.labels[extra])
    return TrainingSet(np.concatenate(feats), np.concatenate(labels))


def generate_training_data(tss: TssIndex, packets: Sequence[Sequence[int]], alpha: int) -> TrainingSet:
    return oversample(label_packets(tss, packets), alpha)


# Training #####################################################################

class Adam:
    def __init__(self, params: list[np.ndarray], b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            np.copyto(p, _f32(p))


LOG_FIELDS = ["round", "epoch", "lr", "loss", "eval_accuracy", "alpha"]


@dataclass
class TrainResult:
    model: ResidualMlp
    accuracy: float
    converged: bool
    rounds: int
    log: list[dict] = field(default_factory=list)

    @property
    def below_threshold(self) -> bool:
        return not self.converged


def accuracy(model: ResidualMlp, data: TrainingSet) -> float:
    if len(data) == 0:
        return 1.0
    return float(np.mean(model.predict(data.features) == data.labels))


def _run_epochs(model: ResidualMlp, data: TrainingSet, epochs: int, cfg: TrainingConfig,
                rng: np.random.Generator, log: list[dict] | None, round_no: int, alpha: int,
                deadline: float | None = None) -> None:
    opt = Adam(model.params, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
    n = len(data)
    for epoch in range(epochs):
        if deadline is not None and time.monotonic() >= deadline:
            break
        lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = model.loss_and_grads(data.features[idx], data.labels[idx])
            opt.step(grads, lr)
            total += loss * len(idx)
        if log is not None:
            log.append({"round": round_no, "epoch": epoch, "lr": lr, "loss": total / n,
                        "eval_accuracy": "", "alpha": alpha})


def train(model: ResidualMlp, raw: TrainingSet, config: TrainingConfig,
          eval_set: TrainingSet | None = None) -> TrainResult:
    """Train in rounds; after each round below beta, alpha grows tenfold and the set is rebuilt.

    `raw` is the un-oversampled labelled pool; each round oversamples it with
    the current alpha. Accuracy is measured on `eval_set` (defaults to `raw`).
    Returns the best model seen; `converged` is False if beta was never met.
    """
    if len(raw) == 0:
        raise ValueError("empty training set")
    if raw.labels.max() >= model.num_classes:
        raise ValueError("label outside model class range")
    eval_set = raw if eval_set is None else eval_set
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    alpha = config.alpha
    log: list[dict] = []
    best_acc, best_params = -1.0, None
    acc = 0.0
    rounds = 0
    for rnd in range(config.max_rounds):
        rounds = rnd + 1
        data = oversample(raw, alpha)
        _run_epochs(model, data, config.epochs_per_round, config, rng, log, rnd, alpha)
        acc = accuracy(model, eval_set)
        if log:
            log[-1]["eval_accuracy"] = acc
        if acc > best_acc:
            best_acc, best_params = acc, [p.copy() for p in model.params]
        if acc >= config.beta:
            break
        alpha *= 10
    model.params = best_params
    model.mac_count = 0
    return TrainResult(model, best_acc, best_acc >= config.beta, rounds, log)


def incremental_train(model: ResidualMlp, data: TrainingSet, epochs: int,
                      config: TrainingConfig | None = None, seconds: float | None = None) -> ResidualMlp:
    """Fine-tune a copy of `model` on `data` for at most `epochs` (and `seconds`, if given)."""
    config = config or TrainingConfig()
    if len(data) and data.labels.max() >= model.num_classes:
        raise ValueError("training labels exceed the model's class count")
    if data.features.shape[1:] != (model.config.input_dim,) and len(data):
        raise ValueError("feature width does not match the model")
    out = model.copy()
    if epochs <= 0 or len(data) == 0:
        return out
    rng = np.random.default_rng(config.seed)
    deadline = None if seconds is None else time.monotonic() + seconds
    _run_epochs(out, data, epochs, config, rng, None, 0, config.alpha, deadline)
    return out


def write_log(log: list[dict], dst) -> None:
    w = csv.DictWriter(dst, fieldnames=LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in log:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


# Model files ##################################################################

def save_model(model: ResidualMlp, sink: BinaryIO) -> None:
    c = model.config
    sink.write(_HEADER.pack(MAGIC, FORMAT_VERSION, c.input_dim, c.neurons, c.blocks, c.num_classes))
    for p in model.params:
        sink.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_model(source: BinaryIO) -> ResidualMlp:
    head = source.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError("truncated model header")
    magic, version, S, N, B, C = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError("bad magic")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model version {version}")
    try:
        model = ResidualMlp(ModelConfig(S, C, N, B))
    except ValueError as e:
        raise FormatError(str(e)) from None
    for i, p in enumerate(model.params):
        nbytes = p.size * 4
        buf = source.read(nbytes)
        if len(buf) != nbytes:
            raise FormatError("truncated model weights")
        model.params[i] = np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(p.shape)
    if source.read(1):
        raise FormatError("trailing bytes after model weights")
    if not all(np.isfinite(p).all() for p in model.params):
        raise FormatError("non-finite weights")
    return model
