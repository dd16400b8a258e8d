import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from autograd.tensor import Tensor
from errors import ConfigError, EmptyLossError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715

IndexKey = Union[np.ndarray, Tuple[np.ndarray, ...]]


def _check_broadcast(a: Tuple[int, ...], b: Tuple[int, ...], op: str) -> None:
    # Only leading batch dims may broadcast: the shorter shape must be a suffix of the longer one.
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} do not match")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.reshape((-1,) + shape).sum(axis=0) if lead > 0 else grad


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "add")

    def _backward(g: np.ndarray) -> None:
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(g, b.shape))

    return Tensor._from_op(a.data + b.data, (a, b), _backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "sub")

    def _backward(g: np.ndarray) -> None:
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(-_unbroadcast(g, b.shape))

    return Tensor._from_op(a.data - b.data, (a, b), _backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape, "mul")

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(a.data * b.data, (a, b), _backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    def _backward(g: np.ndarray) -> None:
        x.accumulate_grad(g * factor)

    return Tensor._from_op(x.data * factor, (x,), _backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two dims.

    b is either a plain matrix shared across a's leading dims, or carries the
    same leading dims as a.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                b.accumulate_grad(a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b.accumulate_grad(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Tensor._from_op(np.matmul(a.data, b.data), (a, b), _backward, "matmul")


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def _backward(g: np.ndarray) -> None:
        x.accumulate_grad(g.reshape(x.shape))

    return Tensor._from_op(x.data.reshape(shape), (x,), _backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _backward(g: np.ndarray) -> None:
        x.accumulate_grad(np.transpose(g, inverse))

    return Tensor._from_op(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), _backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def _backward(g: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(g, cuts, axis=axis)):
            t.accumulate_grad(piece)

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    return Tensor._from_op(data, tensors, _backward, "concat")


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    def _backward(g: np.ndarray) -> None:
        expanded = g if axis is None else np.expand_dims(g, axis)
        x.accumulate_grad(np.broadcast_to(expanded, x.shape))

    return Tensor._from_op(np.asarray(x.data.sum(axis=axis)), (x,), _backward, "sum")


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / max(1, x.size))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    t = np.tanh(_GELU_C * (v + _GELU_K * v ** 3))
    out = 0.5 * v * (1.0 + t)

    def _backward(g: np.ndarray) -> None:
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * v ** 2)
        x.accumulate_grad(g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * du))

    return Tensor._from_op(out, (x,), _backward, "gelu")


def softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def _backward(g: np.ndarray) -> None:
        x.accumulate_grad(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return Tensor._from_op(y, (x,), _backward, "softmax")


def masked_softmax(x: Tensor, key_mask: np.ndarray) -> Tensor:
    """
    Softmax over the last axis restricted to key_mask == True.

    Masked entries get weight exactly 0; a row with every key masked is all zeros.
    """
    mask = np.broadcast_to(np.asarray(key_mask, dtype=bool), x.shape)
    z = np.where(mask, x.data, -np.inf)
    row_max = z.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(mask, np.exp(z - row_max), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    y = e / np.where(total > 0.0, total, 1.0)

    def _backward(g: np.ndarray) -> None:
        x.accumulate_grad(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return Tensor._from_op(y, (x,), _backward, "masked_softmax")


def cross_entropy(logits: Tensor, targets: Sequence[int], ignore_mask: Optional[Sequence[bool]] = None) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows not ignored."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B x V] logits, got {logits.shape}")
    n_rows, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    ignore = np.zeros(n_rows, dtype=bool) if ignore_mask is None else np.asarray(ignore_mask, dtype=bool)
    if targets.shape != (n_rows,) or ignore.shape != (n_rows,):
        raise ShapeError("cross_entropy: targets and ignore_mask must have one entry per row")
    keep = ~ignore
    count = int(keep.sum())
    if count == 0:
        raise EmptyLossError()
    kept_targets = targets[keep]
    if kept_targets.min() < 0 or kept_targets.max() >= vocab:
        raise ShapeError(f"cross_entropy: target outside [0, {vocab})")

    rows = logits.data[keep]
    row_max = rows.max(axis=1, keepdims=True)
    e = np.exp(rows - row_max)
    total = e.sum(axis=1, keepdims=True)
    lse = (row_max + np.log(total))[:, 0]
    picked = rows[np.arange(count), kept_targets]
    loss = float((lse - picked).sum() / count)

    def _backward(g: np.ndarray) -> None:
        probs = e / total
        probs[np.arange(count), kept_targets] -= 1.0
        grad = np.zeros_like(logits.data)
        grad[keep] = probs * (float(g) / count)
        logits.accumulate_grad(grad)

    return Tensor._from_op(np.asarray(loss), (logits,), _backward, "cross_entropy")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    width = x.shape[-1]
    if width < 1 or gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm: width {width} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def _backward(g: np.ndarray) -> None:
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            x.accumulate_grad(dx)
        gain.accumulate_grad((g * xhat).reshape(-1, width).sum(axis=0))
        bias.accumulate_grad(g.reshape(-1, width).sum(axis=0))

    return Tensor._from_op(out, (x, gain, bias), _backward, "layer_norm")


def index(table: Tensor, key: IndexKey) -> Tensor:
    """Row lookup (or any fancy index); the gradient scatters back into the table."""

    def _backward(g: np.ndarray) -> None:
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, key, g)

    try:
        data = table.data[key]
    except IndexError as exc:
        raise ShapeError(f"index: {exc}") from exc
    return Tensor._from_op(np.ascontiguousarray(data), (table,), _backward, "index")


def embedding(table: Tensor, ids: np.ndarray, field: str = "embedding") -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise ShapeError(f"{field} index out of range [0, {rows})")
    return index(table, ids)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an explicit generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """out[i, :] = x[i, :] * s[i]."""
    if x.ndim != 2 or s.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: {x.shape} rows vs {s.shape}")
    col = s.data[:, None]

    def _backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * col)
        if s.requires_grad:
            s.accumulate_grad((g * x.data).sum(axis=1))

    return Tensor._from_op(x.data * col, (x, s), _backward, "scale_rows")


def scatter_rows(src: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Place src rows at positions `rows` of an [n_rows x H] zero matrix."""
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((n_rows,) + src.shape[1:], dtype=np.float64)
    np.add.at(out, rows, src.data)

    def _backward(g: np.ndarray) -> None:
        src.accumulate_grad(g[rows])

    return Tensor._from_op(out, (src,), _backward, "scatter_rows")


def topk_renormalize(probs: Tensor, keep: np.ndarray) -> Tensor:
    """Zero the entries outside keep and rescale each row of the rest to sum 1."""
    keep = np.asarray(keep, dtype=np.float64)
    if keep.shape != probs.shape:
        raise ShapeError(f"topk_renormalize: keep {keep.shape} vs probs {probs.shape}")
    kept = probs.data * keep
    total = kept.sum(axis=-1, keepdims=True)
    w = kept / total

    def _backward(g: np.ndarray) -> None:
        probs.accumulate_grad(keep / total * (g - (g * w).sum(axis=-1, keepdims=True)))

    return Tensor._from_op(w, (probs,), _backward, "topk_renormalize")
