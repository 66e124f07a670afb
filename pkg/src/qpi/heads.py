"""Condenser heads and the softmax classifier.

The CNN head slides filters of several widths over the encoder output,
applies ReLU, max-pools each feature map over time and concatenates the
pooled values (width-ascending, then filter index). Windows that reach
into padding are excluded, so the result does not depend on ``max_len``.
The mean-pool head averages hidden states over unmasked positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import DimensionError, InputError, UsageError
from .registry import ParamRegistry


def head_param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    d = cfg.encoder.embed_dim
    shapes: dict[str, tuple[tuple[int, ...], str]] = {}
    if cfg.pipeline.head == "cnn":
        for g in cfg.widths:
            for j in range(cfg.filters_per_width):
                shapes[f"head.cnn.width{g}.filter{j}.weight"] = ((g, d), "normal")
                shapes[f"head.cnn.width{g}.filter{j}.bias"] = ((), "zeros")
    shapes["classifier.weight"] = ((cfg.classifier_in, 2), "normal")
    shapes["classifier.bias"] = ((2,), "zeros")
    return shapes


@dataclass
class ConvFilterBank:
    widths: tuple[int, ...]
    filters_per_width: int
    weights: dict[int, list[Tensor]]
    biases: dict[int, list[Tensor]]

    @property
    def total_filters(self) -> int:
        return len(self.widths) * self.filters_per_width

    @classmethod
    def from_registry(cls, reg: ParamRegistry, widths, filters_per_width: int) -> "ConvFilterBank":
        weights = {g: [reg[f"head.cnn.width{g}.filter{j}.weight"] for j in range(filters_per_width)] for g in widths}
        biases = {g: [reg[f"head.cnn.width{g}.filter{j}.bias"] for j in range(filters_per_width)] for g in widths}
        return cls(tuple(widths), filters_per_width, weights, biases)


@dataclass
class ClassifierParams:
    weight: Tensor
    bias: Tensor

    @classmethod
    def from_registry(cls, reg: ParamRegistry) -> "ClassifierParams":
        return cls(reg["classifier.weight"], reg["classifier.bias"])


def conv_feature_map(X: Tensor, w: Tensor, b) -> Tensor:
    """``e_i = relu(<w, X[i:i+g]> + b)`` for every window; length ``n - g + 1``."""
    n, d = X.shape[-2], X.shape[-1]
    g = w.shape[0]
    if w.shape != (g, d):
        raise DimensionError(f"filter shape {w.shape} does not fit input width {d}")
    if n < g:
        raise UsageError(f"sequence length n={n} is shorter than filter width g={g}")
    windows = ad.unfold(X, g)
    e = windows @ ad.reshape(w, (g * d, 1)) + b
    return ad.relu(ad.reshape(e, e.shape[:-1]))


def max_over_time(e: Tensor) -> Tensor:
    if e.shape[-1] == 0:
        raise UsageError("max_over_time of an empty feature map")
    return ad.masked_max(e, None, axis=-1)


def _window_validity(lengths: np.ndarray, n: int, g: int) -> np.ndarray:
    starts = np.arange(n - g + 1)
    return starts + g <= np.asarray(lengths)[..., None]


def cnn_condense(X: Tensor, bank: ConvFilterBank, mask: np.ndarray, dropout_rate: float = 0.0,
                 rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Pooled CNN features ``[..., len(widths) * filters_per_width]``."""
    n, d = X.shape[-2], X.shape[-1]
    mask = np.asarray(mask, dtype=bool)
    lengths = mask.sum(axis=-1)
    widest = max(bank.widths)
    if np.any(lengths < widest):
        raise InputError(f"unpadded length {int(lengths.min())} is shorter than the widest filter ({widest})")
    pooled = []
    for g in bank.widths:
        W = ad.stack([ad.reshape(w, (g * d,)) for w in bank.weights[g]], axis=1)
        b = ad.stack(bank.biases[g], axis=0)
        feats = ad.relu(ad.unfold(X, g) @ W + b)
        pooled.append(ad.masked_max(feats, _window_validity(lengths, n, g), axis=-2))
    out = pooled[0] if len(pooled) == 1 else ad.concat(pooled, axis=-1)
    return ad.dropout(out, dropout_rate, rng, training)


def mean_pool(X: Tensor, mask: np.ndarray, dropout_rate: float = 0.0,
              rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    out = ad.masked_mean(X, mask)
    return ad.dropout(out, dropout_rate, rng, training)


def classify(h: Tensor, params: ClassifierParams) -> Tensor:
    """Class probabilities ``softmax(h W + b)`` over {0, 1}."""
    width = params.weight.shape[0]
    if h.shape[-1] != width:
        raise UsageError(f"classifier expects width {width}, got {h.shape[-1]}")
    single = h.ndim == 1
    x = ad.reshape(h, (1, width)) if single else h
    probs = ad.softmax_rows(x @ params.weight + params.bias)
    return ad.reshape(probs, (2,)) if single else probs


def predicted_label(probs: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties resolve to label 0."""
    return np.argmax(np.asarray(probs), axis=-1)
