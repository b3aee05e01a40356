"""Transductive training, Adam, and the evaluation metrics (F1, ROC AUC)."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import Matrix, Tape, backward, cross_entropy
from .errors import ConfigError, TrainingError, ValidationError
from .graph import Graph, SplitMasks
from .layers import ModelConfig, ModelParams, init_params, model_forward
from .seeding import stream

WEIGHTINGS = ("none", "inverse-frequency")
AVERAGES = ("auto", "binary-positive", "macro")


# --- loss -----------------------------------------------------------------

def class_weights(labels, n_classes: int, scheme: str = "inverse-frequency") -> np.ndarray:
    """Per-class loss weights; inverse frequency is ``M / (C * count_c)``."""
    if scheme == "none":
        return np.ones(n_classes)
    if scheme != "inverse-frequency":
        raise ConfigError(f"unknown class weighting {scheme!r}; expected one of {WEIGHTINGS}")
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)
    w = np.ones(n_classes)
    present = counts > 0
    w[present] = len(labels) / (n_classes * counts[present])
    return w


def weighted_cross_entropy(logits: Matrix, labels, weights=None, index=None) -> Matrix:
    """Mean over (selected) nodes of ``w[y] * -log softmax(logits)[y]``."""
    labels = np.asarray(labels, dtype=np.int64)
    sel = labels if index is None else labels[np.asarray(index, dtype=np.int64)]
    if len(sel) and (sel.min() < 0 or sel.max() >= logits.cols):
        raise ValidationError(f"labels must lie in [0, {logits.cols})")
    return cross_entropy(logits, labels, weights, index)


# --- optimizer ------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    b1, b2 = betas
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            if name in state.m:
                m_new[name], v_new[name] = state.m[name], state.v[name]
            continue
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * (g * g)
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


# --- metrics --------------------------------------------------------------

def f1_score(predictions, labels, average: str = "macro", n_classes: Optional[int] = None) -> float:
    """F1 of class 1 (``binary-positive``) or the unweighted mean over classes (``macro``).

    Under ``macro`` a class absent from both predictions and labels scores 0.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValidationError(f"predictions ({pred.size}) and labels ({true.size}) differ in length")
    if pred.size == 0:
        raise ValidationError("f1_score of empty input")
    if average == "binary-positive":
        classes = [1]
    elif average == "macro":
        c = n_classes if n_classes is not None else int(max(pred.max(), true.max())) + 1
        classes = range(c)
    else:
        raise ConfigError(f"unknown average {average!r}")
    scores = []
    for c in classes:
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values))
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], len(values)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + 1 + e) / 2.0
    return ranks


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank-sum statistic."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("roc_auc needs both positive and negative labels")
    r = average_ranks(scores)
    return float((r[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# --- training loop --------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 0.01
    seed: int = 0
    class_weighting: str = "inverse-frequency"
    metric_average: str = "auto"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.class_weighting not in WEIGHTINGS:
            raise ConfigError(f"unknown class_weighting {self.class_weighting!r}; expected one of {WEIGHTINGS}")
        if self.metric_average not in AVERAGES:
            raise ConfigError(f"unknown metric_average {self.metric_average!r}; expected one of {AVERAGES}")

    def average_for(self, n_classes: int) -> str:
        if self.metric_average != "auto":
            return self.metric_average
        return "binary-positive" if n_classes == 2 else "macro"


@dataclass
class TrainReport:
    train_loss: list
    val_f1: list
    val_auc: list
    test_f1: float
    test_auc: Optional[float]
    best_epoch: int

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else v
        d = asdict(self)
        d["val_auc"] = [clean(v) for v in d["val_auc"]]
        d["test_auc"] = clean(d["test_auc"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def positive_scores(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of class 1 from raw two-class logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def evaluate(logits: np.ndarray, labels: np.ndarray, index: np.ndarray, average: str, n_classes: int):
    """(F1, AUC) on ``index``; AUC is NaN unless the task is binary."""
    pred = logits[index].argmax(axis=1)
    f1 = f1_score(pred, labels[index], average, n_classes)
    auc = float("nan")
    if n_classes == 2:
        auc = roc_auc(positive_scores(logits[index]), labels[index])
    return f1, auc


def train(graph: Graph, masks: SplitMasks, model_config: ModelConfig,
          train_config: TrainConfig, params: Optional[ModelParams] = None) -> tuple[ModelParams, TrainReport]:
    """Full-graph training with the loss restricted to training nodes.

    Validation metrics are taken from each epoch's forward pass (before that
    epoch's update); the parameters of the best validation-F1 epoch are kept
    and evaluated once on the test nodes.
    """
    if model_config.n_classes != graph.n_classes:
        raise ConfigError(f"model has {model_config.n_classes} classes, graph has {graph.n_classes}")
    for name, idx in masks.as_dict().items():
        if len(idx) == 0:
            raise ValidationError(f"{name} split is empty")
        if idx.min() < 0 or idx.max() >= graph.n_nodes:
            raise ValidationError(f"{name} split references nodes outside the graph")

    labels = graph.labels
    average = train_config.average_for(graph.n_classes)
    weights = class_weights(labels[masks.train], graph.n_classes, train_config.class_weighting)
    if params is None:
        params = init_params(model_config, stream(train_config.seed, "init"))
    a_hat = model_config.operator(graph)
    state = AdamState()

    losses, val_f1s, val_aucs = [], [], []
    best_f1, best_epoch, best_params = -1.0, 0, params
    for epoch in range(train_config.epochs):
        tape = Tape()
        logits = model_forward(graph, params, model_config, tape=tape, a_hat=a_hat)
        loss = weighted_cross_entropy(logits, labels, weights, masks.train)
        value = float(loss.data[0, 0])
        if not math.isfinite(value) or not np.all(np.isfinite(logits.data)):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        f1, auc = evaluate(logits.data, labels, masks.val, average, graph.n_classes)
        losses.append(value)
        val_f1s.append(f1)
        val_aucs.append(auc)
        if f1 > best_f1:
            best_f1, best_epoch, best_params = f1, epoch, params
        grads = backward(tape, loss)
        params, state = adam_step(params, grads, state, train_config.learning_rate)

    final = model_forward(graph, best_params, model_config, a_hat=a_hat).data
    test_f1, test_auc = evaluate(final, labels, masks.test, average, graph.n_classes)
    report = TrainReport(
        train_loss=losses, val_f1=val_f1s, val_auc=val_aucs,
        test_f1=test_f1, test_auc=None if math.isnan(test_auc) else test_auc,
        best_epoch=best_epoch,
    )
    return best_params, report
