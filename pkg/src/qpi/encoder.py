"""Bidirectional transformer encoder.

Token, position and segment embeddings are summed and normalised, then
passed through ``num_layers`` identical post-norm layers: multi-head
scaled dot-product self-attention and a GELU feed-forward block, each
wrapped in a residual connection followed by layer normalisation.

All functions accept arbitrary leading batch axes; a single sequence is
just the unbatched case. Weights multiply from the right (``X @ W``).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import EncoderConfig
from .errors import DataError, DimensionError, UsageError
from .registry import ParamRegistry

if TYPE_CHECKING:
    from .pipelines import ParaphraseModel

_LAYER_RE = re.compile(r"^encoder\.layer\.(\d+)\.")


def encoder_param_shapes(cfg: EncoderConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Ordered ``name -> (shape, init)``; init is one of normal/zeros/ones."""
    d, f = cfg.embed_dim, cfg.ffn_dim
    shapes: dict[str, tuple[tuple[int, ...], str]] = {
        "embeddings.token_table": ((cfg.vocab_size, d), "normal"),
        "embeddings.position_table": ((cfg.max_position, d), "normal"),
        "embeddings.segment_table": ((2, d), "normal"),
        "embeddings.norm.gamma": ((d,), "ones"),
        "embeddings.norm.beta": ((d,), "zeros"),
    }
    for i in range(cfg.num_layers):
        p = f"encoder.layer.{i}"
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}.attention.W_{proj}"] = ((d, d), "normal")
            shapes[f"{p}.attention.b_{proj}"] = ((d,), "zeros")
        shapes[f"{p}.attention_norm.gamma"] = ((d,), "ones")
        shapes[f"{p}.attention_norm.beta"] = ((d,), "zeros")
        shapes[f"{p}.ffn.W_in"] = ((d, f), "normal")
        shapes[f"{p}.ffn.b_in"] = ((f,), "zeros")
        shapes[f"{p}.ffn.W_out"] = ((f, d), "normal")
        shapes[f"{p}.ffn.b_out"] = ((d,), "zeros")
        shapes[f"{p}.ffn_norm.gamma"] = ((d,), "ones")
        shapes[f"{p}.ffn_norm.beta"] = ((d,), "zeros")
    if cfg.pooler:
        shapes["encoder.pooler.weight"] = ((d, d), "normal")
        shapes["encoder.pooler.bias"] = ((d,), "zeros")
    return shapes


def is_trainable(name: str, k: int, num_layers: int) -> bool:
    """Trainability of a parameter when the top ``k`` encoder layers are tuned.

    Embedding tables train only under full fine-tuning (``k == num_layers``);
    everything above the stack (pooler, head, classifier) always trains.
    """
    if name.startswith("embeddings."):
        return k == num_layers
    m = _LAYER_RE.match(name)
    if m:
        return int(m.group(1)) >= num_layers - k
    return True


@dataclass
class EmbeddingTables:
    token_table: Tensor
    position_table: Tensor
    segment_table: Tensor
    norm_gamma: Tensor
    norm_beta: Tensor

    @classmethod
    def from_registry(cls, reg: ParamRegistry) -> "EmbeddingTables":
        return cls(reg["embeddings.token_table"], reg["embeddings.position_table"],
                   reg["embeddings.segment_table"], reg["embeddings.norm.gamma"],
                   reg["embeddings.norm.beta"])


@dataclass
class AttentionParams:
    W_q: Tensor
    b_q: Tensor
    W_k: Tensor
    b_k: Tensor
    W_v: Tensor
    b_v: Tensor
    W_o: Tensor
    b_o: Tensor

    @classmethod
    def from_registry(cls, reg: ParamRegistry, prefix: str) -> "AttentionParams":
        return cls(*(reg[f"{prefix}.{n}"] for n in ("W_q", "b_q", "W_k", "b_k", "W_v", "b_v", "W_o", "b_o")))


@dataclass
class LayerParams:
    attention: AttentionParams
    attention_gamma: Tensor
    attention_beta: Tensor
    W_in: Tensor
    b_in: Tensor
    W_out: Tensor
    b_out: Tensor
    ffn_gamma: Tensor
    ffn_beta: Tensor

    @classmethod
    def from_registry(cls, reg: ParamRegistry, index: int) -> "LayerParams":
        p = f"encoder.layer.{index}"
        return cls(
            AttentionParams.from_registry(reg, f"{p}.attention"),
            reg[f"{p}.attention_norm.gamma"], reg[f"{p}.attention_norm.beta"],
            reg[f"{p}.ffn.W_in"], reg[f"{p}.ffn.b_in"], reg[f"{p}.ffn.W_out"], reg[f"{p}.ffn.b_out"],
            reg[f"{p}.ffn_norm.gamma"], reg[f"{p}.ffn_norm.beta"],
        )


def embed(inp, tables: EmbeddingTables, eps: float = 1e-12, dropout_rate: float = 0.0,
          rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Sum of token, position and segment rows, layer-normalised."""
    ids = np.asarray(inp.ids)
    seg = np.asarray(inp.segment_ids)
    vocab_size, max_pos = tables.token_table.shape[0], tables.position_table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise DataError(f"token id out of range for vocabulary of size {vocab_size}")
    n = ids.shape[-1]
    if n > max_pos:
        raise DataError(f"sequence length {n} exceeds max_position {max_pos}")
    if seg.size and (seg.min() < 0 or seg.max() > 1):
        raise DataError("segment ids must be 0 or 1")
    positions = np.broadcast_to(np.arange(n), ids.shape)
    x = (ad.embedding(tables.token_table, ids)
         + ad.embedding(tables.position_table, positions)
         + ad.embedding(tables.segment_table, seg))
    x = ad.layer_norm(x, tables.norm_gamma, tables.norm_beta, eps)
    return ad.dropout(x, dropout_rate, rng, training)


def attention_weights(Q: Tensor, K: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-softmax of ``Q Kᵀ / sqrt(d_k)`` with masked key columns suppressed."""
    if Q.shape[-1] != K.shape[-1] or Q.shape[:-2] != K.shape[:-2]:
        raise DimensionError(f"attention: query {Q.shape} and key {K.shape} do not agree")
    d_k = Q.shape[-1]
    scores = ad.matmul(Q, ad.swapaxes(K, -1, -2)) * (1.0 / math.sqrt(d_k))
    key_mask = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-1] != K.shape[-2]:
            raise DimensionError(f"attention mask length {mask.shape[-1]} vs {K.shape[-2]} keys")
        if not np.all(mask.any(axis=-1)):
            raise UsageError("attention mask has no attendable position")
        key_mask = mask[..., None, :]
    return ad.softmax_rows(scores, key_mask)


def scaled_dot_product_attention(Q: Tensor, K: Tensor, V: Tensor, mask: np.ndarray | None = None) -> Tensor:
    if V.shape[:-1] != K.shape[:-1]:
        raise DimensionError(f"attention: key {K.shape} and value {V.shape} do not agree")
    return ad.matmul(attention_weights(Q, K, mask), V)


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = ad.reshape(x, (*lead, n, num_heads, d // num_heads))
    return ad.swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    return ad.reshape(ad.swapaxes(x, -2, -3), (*lead, n, h * dk))


def multi_head_attention(X: Tensor, params: AttentionParams, mask: np.ndarray | None, num_heads: int) -> Tensor:
    d = X.shape[-1]
    if params.W_q.shape != (d, d) or d % num_heads:
        raise DimensionError(f"attention weights {params.W_q.shape} do not fit input width {d} / {num_heads} heads")
    q = _split_heads(X @ params.W_q + params.b_q, num_heads)
    k = _split_heads(X @ params.W_k + params.b_k, num_heads)
    v = _split_heads(X @ params.W_v + params.b_v, num_heads)
    head_mask = None if mask is None else np.asarray(mask, dtype=bool)[..., None, :]
    z = scaled_dot_product_attention(q, k, v, head_mask)
    return _merge_heads(z) @ params.W_o + params.b_o


def encoder_layer(X: Tensor, lp: LayerParams, mask: np.ndarray | None, cfg: EncoderConfig,
                  rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    rate = cfg.dropout_rate
    attn = multi_head_attention(X, lp.attention, mask, cfg.num_heads)
    y1 = ad.layer_norm(X + ad.dropout(attn, rate, rng, training), lp.attention_gamma, lp.attention_beta,
                       cfg.layer_norm_eps)
    hidden = ad.gelu(y1 @ lp.W_in + lp.b_in)
    ffn = hidden @ lp.W_out + lp.b_out
    return ad.layer_norm(y1 + ad.dropout(ffn, rate, rng, training), lp.ffn_gamma, lp.ffn_beta,
                         cfg.layer_norm_eps)


class Encoder:
    """Encoder stack reading its weights from a shared :class:`ParamRegistry`."""

    def __init__(self, cfg: EncoderConfig, params: ParamRegistry):
        self.cfg = cfg
        self.params = params
        self.calls = 0

    def __call__(self, inp, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Hidden states for every position (padding included) of ``inp``."""
        self.calls += 1
        cfg = self.cfg
        x = embed(inp, EmbeddingTables.from_registry(self.params), cfg.layer_norm_eps,
                  cfg.dropout_rate, rng, training)
        mask = np.asarray(inp.attention_mask, dtype=bool)
        for i in range(cfg.num_layers):
            x = encoder_layer(x, LayerParams.from_registry(self.params, i), mask, cfg, rng, training)
        return x


def encode(inp, model: "ParaphraseModel") -> Tensor:
    return model.encoder(inp, training=model.training, rng=model.rng)


def set_trainable_encoders(model: "ParaphraseModel", k: int) -> None:
    """Tune the top ``k`` layers; freeze the rest (embeddings unless ``k`` is all)."""
    n = model.config.encoder.num_layers
    if not 0 <= k <= n:
        raise UsageError(f"trainable encoder count must be within 0..{n}, got {k}")
    for name in model.params:
        model.params.set_trainable(name, is_trainable(name, k, n))
    model.trainable_encoders = k
