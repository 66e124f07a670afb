"""End-to-end paraphrase classifiers.

* Siamese: each question is encoded and condensed separately with the same
  weights; the classifier sees ``h_a ⊕ h_b``.
* Matched aggregation: the pair is packed as ``[CLS] A [SEP] B [SEP]`` and
  encoded once, so attention can match words across the two questions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import MATCHED, SIAMESE, ModelConfig
from .encoder import Encoder, encoder_param_shapes, set_trainable_encoders
from .errors import ConfigError, UsageError
from .heads import (ClassifierParams, ConvFilterBank, classify, cnn_condense, head_param_shapes,
                    mean_pool, predicted_label)
from .registry import ParamRegistry
from .tokenizer import EncodedBatch, Vocab, encode_pair, encode_single, tokenize


@dataclass(frozen=True)
class QuestionPair:
    question_a: str
    question_b: str
    label: int | None = None

    def __post_init__(self):
        if self.label is not None and self.label not in (0, 1):
            raise UsageError(f"label must be 0 or 1, got {self.label!r}")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    shapes = encoder_param_shapes(cfg.encoder)
    shapes.update(head_param_shapes(cfg))
    return shapes


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two standard deviations."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


class ParaphraseModel:
    """Encoder, condenser head and classifier over one parameter registry."""

    def __init__(self, config: ModelConfig, vocab: Vocab | None = None, seed: int = 0):
        if vocab is not None and len(vocab) > config.encoder.vocab_size:
            raise ConfigError(f"vocabulary has {len(vocab)} tokens but vocab_size is {config.encoder.vocab_size}")
        self.config = config
        self.vocab = vocab
        self.seed = seed
        self.params = ParamRegistry()
        init_rng = np.random.default_rng([seed, 0])
        self.rng = np.random.default_rng([seed, 1])
        dtype = config.dtype
        for name, (shape, kind) in param_shapes(config).items():
            if kind == "normal":
                data = truncated_normal(init_rng, shape, config.init_std, dtype)
            elif kind == "ones":
                data = np.ones(shape, dtype=dtype)
            else:
                data = np.zeros(shape, dtype=dtype)
            self.params.add(name, Tensor(data, dtype=dtype))
        self.encoder = Encoder(config.encoder, self.params)
        self.training = False
        self.trainable_encoders = config.pipeline.trainable_encoders
        set_trainable_encoders(self, self.trainable_encoders)

    @property
    def setup(self) -> str:
        return self.config.pipeline.setup

    def train(self) -> "ParaphraseModel":
        self.training = True
        return self

    def eval(self) -> "ParaphraseModel":
        self.training = False
        return self

    # -- tokenisation -------------------------------------------------------

    def _require_vocab(self) -> Vocab:
        if self.vocab is None:
            raise UsageError("model has no vocabulary; text input cannot be encoded")
        return self.vocab

    def encode_text(self, text: str):
        vocab = self._require_vocab()
        return encode_single(tokenize(text, vocab), vocab, self.config.pipeline.max_len)

    def prepare(self, pairs: Sequence[QuestionPair]) -> "PreparedPairs":
        vocab = self._require_vocab()
        max_len = self.config.pipeline.max_len
        labels = np.array([-1 if p.label is None else p.label for p in pairs], dtype=np.int64)
        if self.setup == SIAMESE:
            a = EncodedBatch.stack([self.encode_text(p.question_a) for p in pairs])
            b = EncodedBatch.stack([self.encode_text(p.question_b) for p in pairs])
            return PreparedPairs(a, b, labels)
        packed = [encode_pair(tokenize(p.question_a, vocab), tokenize(p.question_b, vocab), vocab, max_len)
                  for p in pairs]
        return PreparedPairs(EncodedBatch.stack(packed), None, labels)

    # -- forward ------------------------------------------------------------

    def condense(self, inp) -> Tensor:
        """Encoder output reduced to the condensed vector by the configured head."""
        cfg = self.config
        hidden = self.encoder(inp, training=self.training, rng=self.rng)
        if cfg.pipeline.head == "cnn":
            bank = ConvFilterBank.from_registry(self.params, cfg.widths, cfg.filters_per_width)
            return cnn_condense(hidden, bank, inp.attention_mask, cfg.head_dropout, self.rng, self.training)
        return mean_pool(hidden, inp.attention_mask, cfg.head_dropout, self.rng, self.training)

    def classifier_input(self, prepared: "PreparedPairs") -> Tensor:
        if self.setup == SIAMESE:
            if prepared.second is None:
                raise UsageError("siamese model needs separately encoded questions")
            return ad.concat([self.condense(prepared.first), self.condense(prepared.second)], axis=-1)
        if prepared.second is not None:
            raise UsageError("matched-aggregation model needs packed pairs")
        return self.condense(prepared.first)

    def forward(self, prepared: "PreparedPairs") -> Tensor:
        """Probabilities ``[batch, 2]``."""
        return classify(self.classifier_input(prepared), ClassifierParams.from_registry(self.params))

    def __call__(self, pairs: Sequence[QuestionPair]) -> Tensor:
        return self.forward(self.prepare(pairs))


@dataclass(frozen=True)
class PreparedPairs:
    """Encoded pairs: ``first``/``second`` per question (siamese) or ``first`` packed."""

    first: EncodedBatch
    second: EncodedBatch | None
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "PreparedPairs":
        idx = np.asarray(idx)

        def take(b: EncodedBatch | None):
            if b is None:
                return None
            return EncodedBatch(b.ids[idx], b.attention_mask[idx], b.segment_ids[idx])

        return PreparedPairs(take(self.first), take(self.second), self.labels[idx])


def _check_setup(model: ParaphraseModel, setup: str) -> None:
    if model.setup != setup:
        raise UsageError(f"model is configured for {model.setup}, not {setup}")


def siamese_forward(pair: QuestionPair, model: ParaphraseModel) -> Tensor:
    _check_setup(model, SIAMESE)
    return ad.reshape(model([pair]), (2,))


def matched_aggregation_forward(pair: QuestionPair, model: ParaphraseModel) -> Tensor:
    _check_setup(model, MATCHED)
    return ad.reshape(model([pair]), (2,))


def predict(pair: QuestionPair, model: ParaphraseModel) -> tuple[int, float]:
    """Label and its probability, with dropout off."""
    if not isinstance(model, ParaphraseModel):
        raise UsageError("predict needs a configured ParaphraseModel")
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            probs = model([pair]).data[0]
    finally:
        model.training = was_training
    label = int(predicted_label(probs))
    return label, float(probs[label])


def predict_batch(model: ParaphraseModel, prepared: PreparedPairs, batch_size: int = 64) -> np.ndarray:
    """Probabilities ``[n, 2]`` for already-encoded pairs, dropout off."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with ad.no_grad():
            for start in range(0, len(prepared), batch_size):
                idx = np.arange(start, min(start + batch_size, len(prepared)))
                out.append(model.forward(prepared.subset(idx)).data)
    finally:
        model.training = was_training
    return np.concatenate(out, axis=0) if out else np.zeros((0, 2))
