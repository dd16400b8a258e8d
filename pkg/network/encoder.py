import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from autograd import ops
from autograd.tensor import Tensor
from errors import NumericError, ShapeError
from network.layers import LayerNorm, Linear, Module


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn_dim: int = 0
    dropout: float = 0.1
    post_norm: bool = False

    def __post_init__(self) -> None:
        if self.hidden % self.heads != 0:
            raise ShapeError(f"hidden {self.hidden} is not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def inner_dim(self) -> int:
        return self.ffn_dim or 4 * self.hidden


class EncoderLayer(Module):
    """Multi-head self-attention and a GELU feed-forward, each with a residual and a layer-norm."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        h = config.hidden
        # Per-head W_Q/W_K/W_V are the column blocks of these H x H projections.
        self.query = self.add_child("query", Linear(h, h, rng))
        self.key = self.add_child("key", Linear(h, h, rng))
        self.value = self.add_child("value", Linear(h, h, rng))
        self.output = self.add_child("output", Linear(h, h, rng))
        self.norm1 = self.add_child("norm1", LayerNorm(h))
        self.norm2 = self.add_child("norm2", LayerNorm(h))
        self.ffn_in = self.add_child("ffn_in", Linear(h, config.inner_dim, rng))
        self.ffn_out = self.add_child("ffn_out", Linear(config.inner_dim, h, rng))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, h = x.shape
    return ops.transpose(ops.reshape(x, (b, t, heads, h // heads)), (0, 2, 1, 3))


def attention_scores(layer: EncoderLayer, x: Tensor) -> Tuple[Tensor, Tensor]:
    """Q K^T / sqrt(d_k) per head ([B x A x T x T]) and the split values."""
    heads = layer.config.heads
    q = _split_heads(layer.query(x), heads)
    k = _split_heads(layer.key(x), heads)
    v = _split_heads(layer.value(x), heads)
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(layer.config.head_dim))
    return scores, v


def attention_weights(layer: EncoderLayer, x: Tensor, attn_mask: np.ndarray) -> Tensor:
    scores, _ = attention_scores(layer, x)
    key_mask = np.asarray(attn_mask, dtype=bool)[:, None, None, :]
    return ops.masked_softmax(scores, key_mask)


def attention(
    layer: EncoderLayer,
    x: Tensor,
    attn_mask: np.ndarray,
    *,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    Masked multi-head self-attention.

    x is [B x T x H] (or [T x H]); attn_mask is [B x T] (or [T]) with 1 for real
    positions. PAD keys get weight 0; a query whose keys are all masked outputs 0,
    output-projection bias included.
    """
    unbatched = x.ndim == 2
    if unbatched:
        x = ops.reshape(x, (1,) + x.shape)
        attn_mask = np.asarray(attn_mask)[None, :]
    if np.asarray(attn_mask).shape != x.shape[:2]:
        raise ShapeError(f"attn_mask {np.asarray(attn_mask).shape} does not match sequence {x.shape[:2]}")
    b, t, h = x.shape
    scores, v = attention_scores(layer, x)
    weights = ops.masked_softmax(scores, np.asarray(attn_mask, dtype=bool)[:, None, None, :])
    weights = ops.dropout(weights, layer.config.dropout, rng, training)
    context = ops.reshape(ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3)), (b, t, h))
    out = layer.output(context)
    live = np.asarray(attn_mask, dtype=bool).any(axis=-1)
    if not live.all():
        # Sequences with no real key produce exactly zero, bias included.
        rows = Tensor(np.repeat(live, t).astype(np.float64))
        out = ops.reshape(ops.scale_rows(ops.reshape(out, (b * t, h)), rows), (b, t, h))
    return ops.reshape(out, (t, h)) if unbatched else out


def _feed_forward(layer: EncoderLayer, x: Tensor, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    inner = ops.dropout(ops.gelu(layer.ffn_in(x)), layer.config.dropout, rng, training)
    return layer.ffn_out(inner)


def encoder_block(
    layer: EncoderLayer,
    x: Tensor,
    attn_mask: np.ndarray,
    training: bool,
    rng: Optional[np.random.Generator],
) -> Tensor:
    p = layer.config.dropout
    if layer.config.post_norm:
        h = layer.norm1(ops.add(x, ops.dropout(attention(layer, x, attn_mask, training=training, rng=rng), p, rng, training)))
        return layer.norm2(ops.add(h, ops.dropout(_feed_forward(layer, h, training, rng), p, rng, training)))
    attended = attention(layer, layer.norm1(x), attn_mask, training=training, rng=rng)
    h = ops.add(x, ops.dropout(attended, p, rng, training))
    return ops.add(h, ops.dropout(_feed_forward(layer, layer.norm2(h), training, rng), p, rng, training))


class Encoder(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.layers: List[EncoderLayer] = [
            self.add_child(f"layer{i}", EncoderLayer(config, rng)) for i in range(config.layers)
        ]
        # Pre-norm stacks end with a norm so the head sees normalised states.
        self.final_norm = None if config.post_norm else self.add_child("final_norm", LayerNorm(config.hidden))


def encode(
    encoder: Encoder,
    embedded: Tensor,
    attn_mask: np.ndarray,
    *,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Run every block; dropout only in train mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode}")
    if embedded.shape[-1] != encoder.config.hidden:
        raise ShapeError(f"embedded width {embedded.shape[-1]} != hidden {encoder.config.hidden}")
    training = mode == "train"
    x = embedded
    for i, layer in enumerate(encoder.layers):
        try:
            x = encoder_block(layer, x, attn_mask, training, rng)
        except NumericError as exc:
            raise NumericError(f"encoder block {i}: {exc}") from exc
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"encoder block {i}: non-finite activations")
    if encoder.final_norm is not None:
        x = encoder.final_norm(x)
    return x


def prepend_cls(embedded: Tensor, attn_mask: np.ndarray, cls_rows: Tensor) -> Tuple[Tensor, np.ndarray]:
    """Put the CLS row at index 0: [B x T x H] -> [B x T+1 x H], mask gains a leading 1."""
    attn_mask = np.asarray(attn_mask)
    ones = np.ones(attn_mask.shape[:-1] + (1,), dtype=attn_mask.dtype)
    return ops.concat([cls_rows, embedded], axis=-2), np.concatenate([ones, attn_mask], axis=-1)
