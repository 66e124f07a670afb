"""Loss, optimiser, class-balanced sampling, training loop and metrics."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, TrainSettings
from .encoder import is_trainable
from .errors import ConsistencyError, NumericError, UsageError
from .heads import predicted_label
from .pipelines import ParaphraseModel, PreparedPairs, QuestionPair, param_shapes, predict_batch
from .registry import ParamRegistry

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of ``-log p[label]`` over the batch (probabilities clamped at 1e-12)."""
    labels = np.atleast_1d(np.asarray(labels))
    if labels.dtype.kind not in "iub" or np.any((labels != 0) & (labels != 1)):
        raise UsageError(f"labels must be 0 or 1, got {labels.tolist()}")
    labels = labels.astype(np.int64)
    if probs.ndim == 1:
        probs = ad.reshape(probs, (1, probs.shape[0]))
    if probs.shape[0] != labels.shape[0]:
        raise UsageError(f"{probs.shape[0]} predictions for {labels.shape[0]} labels")
    picked = ad.getitem(probs, (np.arange(labels.shape[0]), labels))
    return -ad.mean(ad.log(picked, clamp_min=PROB_FLOOR))


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(registry: ParamRegistry, state: AdamState) -> None:
    """One bias-corrected Adam update of the trainable tensors, then zero their gradients."""
    trainable = registry.trainable()
    missing = [n for n, t in trainable if t.grad is None]
    if missing:
        raise ConsistencyError(f"no gradient for trainable parameters: {missing[:5]}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, t in trainable:
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(t.dtype)
        t.grad = np.zeros_like(t.data)


def weighted_sample_indices(labels: Sequence[int], n: int, seed) -> np.ndarray:
    """Draw ``n`` indices with replacement, each weighted by 1 / (size of its class)."""
    labels = np.asarray(labels)
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if len(classes) < 2:
        raise UsageError("weighted sampling needs examples of both classes")
    weights = 1.0 / counts[inverse]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.choice(len(labels), size=n, replace=True, p=weights / weights.sum())


@dataclass
class EvalResult:
    accuracy: float
    f1: float
    precision: float
    recall: float
    confusion: dict[str, int]
    predictions: np.ndarray
    probabilities: np.ndarray | None = None


def metrics_from_predictions(predictions, labels) -> EvalResult:
    """Accuracy and positive-class (duplicate) F1; undefined ratios count as 0."""
    preds = np.asarray(predictions, dtype=np.int64)
    gold = np.asarray(labels, dtype=np.int64)
    if preds.shape != gold.shape:
        raise UsageError(f"{preds.size} predictions for {gold.size} labels")
    if gold.size == 0:
        raise UsageError("cannot evaluate an empty dataset")
    tp = int(np.sum((preds == 1) & (gold == 1)))
    fp = int(np.sum((preds == 1) & (gold == 0)))
    fn = int(np.sum((preds == 0) & (gold == 1)))
    tn = int(np.sum((preds == 0) & (gold == 0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return EvalResult(
        accuracy=(tp + tn) / gold.size, f1=f1, precision=precision, recall=recall,
        confusion={"tp": tp, "fp": fp, "fn": fn, "tn": tn}, predictions=preds,
    )


def evaluate(model: ParaphraseModel, dataset, batch_size: int = 64) -> EvalResult:
    """Metrics of ``model`` on a labelled dataset (list of pairs or prepared pairs)."""
    if not isinstance(dataset, PreparedPairs):
        dataset = list(dataset)
        if not dataset:
            raise UsageError("cannot evaluate an empty dataset")
        dataset = model.prepare(dataset)
    prepared = dataset
    if len(prepared) == 0:
        raise UsageError("cannot evaluate an empty dataset")
    if np.any(prepared.labels < 0):
        raise UsageError("evaluation needs labelled pairs")
    probs = predict_batch(model, prepared, batch_size)
    result = metrics_from_predictions(predicted_label(probs), prepared.labels)
    result.probabilities = probs
    return result


def error_overlap(preds_a, preds_b, labels) -> float | None:
    """Share of system A's mistakes that system B gets right; ``None`` if A made none."""
    a, b, y = (np.asarray(x) for x in (preds_a, preds_b, labels))
    if not (a.shape == b.shape == y.shape):
        raise UsageError(f"prediction lists differ in length: {a.size}, {b.size}, {y.size}")
    wrong_a = a != y
    if not wrong_a.any():
        return None
    return float(np.sum(wrong_a & (b == y)) / np.sum(wrong_a))


def count_trainable_params(model: ParaphraseModel) -> int:
    return model.params.num_elements(trainable_only=True)


def count_trainable_for_config(cfg: ModelConfig, k: int | None = None) -> int:
    """Trainable element count without allocating any weights."""
    n = cfg.encoder.num_layers
    k = cfg.pipeline.trainable_encoders if k is None else k
    if not 0 <= k <= n:
        raise UsageError(f"trainable encoder count must be within 0..{n}, got {k}")
    return sum(math.prod(shape) for name, (shape, _) in param_shapes(cfg).items() if is_trainable(name, k, n))


def trainable_param_table(cfg: ModelConfig) -> list[tuple[int, int]]:
    return [(k, count_trainable_for_config(cfg, k)) for k in range(cfg.encoder.num_layers + 1)]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_f1: float
    train_accuracy: float | None = None
    wall_time: float = field(default=0.0, compare=False)

    def as_dict(self, with_time: bool = True) -> dict:
        d = {"epoch": self.epoch, "train_loss": self.train_loss, "train_accuracy": self.train_accuracy,
             "val_accuracy": self.val_accuracy, "val_f1": self.val_f1}
        if with_time:
            d["wall_time"] = self.wall_time
        return d


@dataclass
class TrainHistory:
    seed: int
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self) -> int:
        return len(self.records)


def train_step(model: ParaphraseModel, batch: PreparedPairs, state: AdamState) -> float:
    model.params.zero_grad()
    loss = cross_entropy(model.forward(batch), batch.labels)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite training loss {value} at step {state.t + 1}")
    ad.backward(loss)
    adam_step(model.params, state)
    return value


def train(
    config: ModelConfig,
    settings: TrainSettings,
    train_set: Sequence[QuestionPair],
    val_set: Sequence[QuestionPair],
    vocab,
    model: ParaphraseModel | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[ParaphraseModel, TrainHistory]:
    """Fit a model with class-balanced sampling, keeping the best-validation-accuracy weights."""
    if not train_set or not val_set:
        raise UsageError("training and validation sets must be non-empty")
    if model is None:
        model = ParaphraseModel(config, vocab, seed=settings.seed)
    history = TrainHistory(seed=settings.seed)
    if settings.epochs == 0:
        return model, history

    train_prep = model.prepare(list(train_set))
    val_prep = model.prepare(list(val_set))
    if len(set(train_prep.labels.tolist())) < 2:
        raise UsageError("training set must contain both classes")
    sampler_rng = np.random.default_rng([settings.seed, 2])
    state = AdamState(lr=settings.lr, beta1=settings.beta1, beta2=settings.beta2, eps=settings.eps)
    best_acc, best_state = -1.0, None

    for epoch in range(1, settings.epochs + 1):
        start = time.perf_counter()
        order = weighted_sample_indices(train_prep.labels, len(train_prep), sampler_rng)
        model.train()
        losses = []
        for i in range(0, len(order), settings.batch_size):
            batch = train_prep.subset(order[i : i + settings.batch_size])
            losses.append(train_step(model, batch, state))
        model.eval()
        val = evaluate(model, val_prep)
        train_acc = evaluate(model, train_prep).accuracy if settings.eval_train else None
        record = EpochRecord(epoch, float(np.mean(losses)), val.accuracy, val.f1, train_acc,
                             time.perf_counter() - start)
        history.records.append(record)
        log.info("epoch %d loss %.4f val_acc %.4f val_f1 %.4f", epoch, record.train_loss,
                 val.accuracy, val.f1)
        if on_epoch is not None:
            on_epoch(record)
        if val.accuracy > best_acc:
            best_acc, best_state, history.best_epoch = val.accuracy, model.params.state(), epoch
        if (settings.stop_at_train_accuracy is not None and train_acc is not None
                and train_acc >= settings.stop_at_train_accuracy):
            break

    if best_state is not None:
        model.params.load_state(best_state)
    model.eval()
    return model, history
