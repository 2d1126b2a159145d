"""Finetuning loop: size-one micro-batches, gradient accumulation, grouped Adam
with warmup + half-cosine schedule, frozen encoder for the first epochs and
best-on-validation checkpointing."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .model import Encoder, ModelConfig, is_encoder_param, tokenize
from .tensor_core import Rng

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_encoder: float = 5e-4
    lr_head: float = 5e-4
    warmup_steps: int = 50
    total_steps: int = 2000
    accumulation: int = 8
    freeze_encoder_epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.lr_encoder <= 0 or self.lr_head <= 0:
            raise ValueError("learning rates must be positive")
        if self.accumulation < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("accumulation, max_epochs and patience must be >= 1")

    @classmethod
    def reference_scale(cls, **overrides) -> "TrainConfig":
        """Reference-scale constants (encoder 5e-6, head 3e-5, 500/20000 steps, 64 accumulations)."""
        base = dict(lr_encoder=5e-6, lr_head=3e-5, warmup_steps=500,
                    total_steps=20000, accumulation=64)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def lr_schedule(step: int, group: str, config: TrainConfig) -> float:
    if group == "encoder":
        base = config.lr_encoder
    elif group == "head":
        base = config.lr_head
    else:
        raise ValueError(f"unknown parameter group {group!r}")
    if step < config.warmup_steps:
        return base * step / config.warmup_steps
    if step >= config.total_steps:
        return 0.0
    progress = (step - config.warmup_steps) / (config.total_steps - config.warmup_steps)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, rate: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place to ``params``.

    Works on numpy arrays and torch tensors alike. Only names present in
    ``grads`` are touched, each with its own step counter.
    """
    for name, g in grads.items():
        finite = torch.isfinite(g).all() if torch.is_tensor(g) else np.isfinite(g).all()
        if not finite:
            raise NumericError(f"non-finite gradient for {name}")
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = g * 0.0
            state.v[name] = g * 0.0
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / (1.0 - beta1 ** t)
        v_hat = state.v[name] / (1.0 - beta2 ** t)
        p -= rate * m_hat / (v_hat ** 0.5 + eps)


def bce_with_logits(logits, targets):
    """Mean binary cross entropy over labels, log-sum-exp stable."""
    z = torch.as_tensor(logits, dtype=torch.float64)
    y = torch.as_tensor(targets, dtype=torch.float64)
    # log-sigmoid form: stable for large |z| and smooth at z = 0
    return -(y * F.logsigmoid(z) + (1.0 - y) * F.logsigmoid(-z)).mean()


def softmax_ce(logits, class_index: int):
    z = torch.as_tensor(logits, dtype=torch.float64)
    return torch.logsumexp(z, dim=-1) - z[..., class_index]


@dataclass
class Example:
    protein_id: str
    tokens: list[int]
    target: object      # class index (multiclass) or 0/1 vector (multilabel)


def make_examples(records, classes: list[str], task_kind: str) -> list[Example]:
    index = {c: i for i, c in enumerate(classes)}
    out = []
    for rec in records:
        labels = sorted(rec.labels)
        if task_kind == "multiclass":
            if len(labels) != 1:
                raise ValueError(f"{rec.id}: multiclass task needs exactly one label, got {labels}")
            target = index[labels[0]]
        else:
            target = np.zeros(len(classes))
            for lab in labels:
                target[index[lab]] = 1.0
        out.append(Example(rec.id, tokenize(rec.sequence), target))
    return out


def example_loss(model: Encoder, ex: Example):
    logits = model.logits(ex.tokens)
    if model.config.task_kind == "multiclass":
        return softmax_ce(logits, ex.target)
    return bce_with_logits(logits, ex.target)


def f_max(scores: np.ndarray, truth: np.ndarray) -> float:
    """Protein-centric F_max over thresholds 0.01, 0.02, ..., 1.00.

    Precision averages over proteins with at least one prediction at the
    threshold, recall over all proteins with at least one true label.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    has_truth = truth.any(axis=1)
    best = 0.0
    for k in range(1, 101):
        t = k / 100
        pred = scores >= t
        n_pred = pred.sum(axis=1)
        covered = n_pred > 0
        if not covered.any() or not has_truth.any():
            continue
        tp = (pred & truth).sum(axis=1)
        precision = np.mean(tp[covered] / n_pred[covered])
        recall = np.mean(tp[has_truth] / truth[has_truth].sum(axis=1))
        if precision + recall > 0:
            best = max(best, 2 * precision * recall / (precision + recall))
    return float(best)


def evaluate(model: Encoder, examples: list[Example]):
    """Accuracy for multiclass; (mean loss, F_max) for multilabel."""
    if not examples:
        raise ValueError("cannot evaluate on an empty split")
    dropout, model.dropout = model.dropout, None
    try:
        with torch.no_grad():
            logits = np.stack([model.logits(ex.tokens).numpy() for ex in examples])
            if model.config.task_kind == "multiclass":
                pred = logits.argmax(axis=1)
                return float(np.mean(pred == np.array([ex.target for ex in examples])))
            targets = np.stack([ex.target for ex in examples])
            loss = float(np.mean([bce_with_logits(z, y).item() for z, y in zip(logits, targets)]))
            scores = 1.0 / (1.0 + np.exp(-logits))
            return loss, f_max(scores, targets)
    finally:
        model.dropout = dropout


def encoder_digest(weights: dict) -> str:
    """SHA-256 over the encoder tensors (classifier excluded), name-sorted, little-endian f64."""
    h = hashlib.sha256()
    for name in sorted(weights):
        if is_encoder_param(name):
            h.update(name.encode())
            h.update(np.ascontiguousarray(weights[name], dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    weights: dict
    epoch: int
    metric: float
    metric_kind: str
    history: list = field(default_factory=list)
    initial_encoder_sha256: str = ""

    def sidecar(self) -> dict:
        return {"epoch": self.epoch, "metric": self.metric, "metric_kind": self.metric_kind}


class Trainer:
    """Stateful loop; ``train`` is the one-call wrapper."""

    def __init__(self, model: Encoder, config: TrainConfig):
        self.model = model
        self.config = config
        self.state = AdamState()
        self.step = 0
        self.pending = 0
        self.grads: dict[str, torch.Tensor] = {}
        self.model.dropout = torch.Generator().manual_seed(Rng(config.seed).child("dropout").seed % 2**63)

    def frozen(self, epoch: int) -> bool:
        return epoch < self.config.freeze_encoder_epochs

    def accumulate(self, ex: Example, epoch: int) -> float:
        names = [n for n in self.model.params if not (self.frozen(epoch) and is_encoder_param(n))]
        for name, p in self.model.params.items():
            p.requires_grad_(name in names)
        loss = example_loss(self.model, ex)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss on {ex.protein_id}")
        grads = torch.autograd.grad(loss / self.config.accumulation,
                                    [self.model.params[n] for n in names])
        for name, g in zip(names, grads):
            if name in self.grads:
                self.grads[name] = self.grads[name] + g
            else:
                self.grads[name] = g
        self.pending += 1
        return loss.item()

    def apply(self, epoch: int) -> None:
        if not self.pending:
            return
        cfg = self.config
        with torch.no_grad():
            params = {n: p for n, p in self.model.params.items()}
            for p in params.values():
                p.requires_grad_(False)
            enc = {n: g for n, g in self.grads.items() if is_encoder_param(n)}
            head = {n: g for n, g in self.grads.items() if not is_encoder_param(n)}
            if enc and not self.frozen(epoch):
                adam_step(params, enc, self.state, lr_schedule(self.step, "encoder", cfg),
                          cfg.beta1, cfg.beta2, cfg.eps)
            adam_step(params, head, self.state, lr_schedule(self.step, "head", cfg),
                      cfg.beta1, cfg.beta2, cfg.eps)
        self.grads = {}
        self.pending = 0
        self.step += 1

    def run_epoch(self, examples: list[Example], epoch: int) -> list[float]:
        order = Rng(self.config.seed).child(f"epoch{epoch}").permutation(len(examples))
        losses = []
        for i in order:
            losses.append(self.accumulate(examples[i], epoch))
            if self.pending == self.config.accumulation:
                self.apply(epoch)
        self.apply(epoch)
        for p in self.model.params.values():
            p.requires_grad_(False)
        return losses


def train(train_records, valid_records, classes: list[str], model_config: ModelConfig,
          config: TrainConfig, progress=None) -> Checkpoint:
    """Train from a seeded initialization and return the best validation checkpoint."""
    if not train_records or not valid_records:
        raise ValueError("training and validation splits must be non-empty")
    if {r.id for r in train_records} & {r.id for r in valid_records}:
        raise ValueError("training and validation splits overlap")
    kind = model_config.task_kind
    train_ex = make_examples(train_records, classes, kind)
    valid_ex = make_examples(valid_records, classes, kind)
    model = Encoder.initialized(model_config, Rng(config.seed).child("init").seed)
    trainer = Trainer(model, config)
    initial_digest = encoder_digest(model.weights())
    metric_kind = "accuracy" if kind == "multiclass" else "loss"
    best: Checkpoint | None = None
    stale = 0
    history = []
    for epoch in range(config.max_epochs):
        losses = trainer.run_epoch(train_ex, epoch)
        result = evaluate(model, valid_ex)
        metric = result if kind == "multiclass" else result[0]
        if not math.isfinite(metric):
            raise NumericError(f"non-finite validation metric at epoch {epoch + 1}")
        record = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)),
                  metric_kind: metric, "step": trainer.step,
                  "encoder_sha256": encoder_digest(model.weights())}
        if kind == "multilabel":
            record["f_max"] = result[1]
        history.append(record)
        log.info("epoch=%d train_loss=%.6f %s=%.6f", epoch + 1, record["train_loss"], metric_kind, metric)
        if progress is not None:
            progress(record)
        improved = best is None or (metric > best.metric if kind == "multiclass" else metric < best.metric)
        if improved:
            best = Checkpoint(model.weights(), epoch + 1, float(metric), metric_kind)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    best.history = history
    best.initial_encoder_sha256 = initial_digest
    return best
