"""The three task losses: attribute MSE, face-score softmax, box smooth-L1."""

from __future__ import annotations

import numpy as np

from .errors import InvalidLabel, ShapeMismatch
from .tensor import Tensor, apply, as_tensor, register_primitive


@register_primitive("mse_loss")
def mse_loss(pred, target, row_mask=None) -> Tensor:
    """Mean of ``(pred - target)**2`` over all N*M entries.

    Targets follow the label-matrix encoding: rows in {+1, -1} for faces and
    all-zero rows for background. ``row_mask`` restricts the mean to the
    selected rows (the background-masked ablation).
    """
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.data.dtype)
    if pred.shape != t.shape:
        raise ShapeMismatch("mse_loss: prediction and target shapes differ", pred.shape, t.shape)
    if not np.all(np.isin(t, (-1.0, 0.0, 1.0))):
        raise InvalidLabel("mse_loss targets must lie in {+1, -1, 0}")
    diff = pred.data - t
    if row_mask is None:
        weight = np.ones_like(diff)
    else:
        rows = np.asarray(row_mask, dtype=bool)
        weight = np.repeat(rows[:, None], diff.shape[1], axis=1).astype(diff.dtype)
    count = weight.sum()
    if count == 0:
        return apply("mse_loss", np.zeros((), dtype=diff.dtype), (pred,),
                     lambda g: (np.zeros_like(diff),))
    loss = (diff * diff * weight).sum() / count
    return apply("mse_loss", np.asarray(loss), (pred,),
                 lambda g: (g * 2.0 * diff * weight / count,))


@register_primitive("softmax_ce_loss")
def softmax_ce_loss(logits, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]`` (max-subtracted)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch("softmax_ce_loss: need N x K logits and N labels", logits.shape, labels.shape)
    k = logits.shape[1]
    if labels.size and (not np.issubdtype(labels.dtype, np.integer) and not np.all(labels == np.round(labels))):
        raise InvalidLabel("softmax_ce_loss labels must be integer class indices")
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidLabel(f"softmax_ce_loss labels must lie in [0, {k - 1}], got {sorted(set(labels.tolist()))}")
    n = logits.shape[0]
    x = logits.data
    if n == 0:
        return apply("softmax_ce_loss", np.zeros((), dtype=x.dtype), (logits,),
                     lambda g: (np.zeros_like(x),))
    shifted = x - x.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return apply("softmax_ce_loss", np.asarray(loss), (logits,), bw)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def smooth_l1(d: np.ndarray) -> np.ndarray:
    """Elementwise ``0.5 d**2`` for ``|d| < 1`` else ``|d| - 0.5``."""
    ad = np.abs(d)
    return np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)


def smooth_l1_grad(d: np.ndarray) -> np.ndarray:
    return np.where(np.abs(d) < 1.0, d, np.sign(d))


@register_primitive("smooth_l1_loss")
def smooth_l1_loss(pred, target, mask=None) -> Tensor:
    """Smooth-L1 summed over masked rows, divided by ``max(1, masked rows)``."""
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.data.dtype)
    if pred.shape != t.shape:
        raise ShapeMismatch("smooth_l1_loss: prediction and target shapes differ", pred.shape, t.shape)
    n = pred.shape[0]
    rows = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if rows.shape != (n,):
        raise ShapeMismatch("smooth_l1_loss: mask must have one entry per row", rows.shape, (n,))
    w = rows.reshape((n,) + (1,) * (pred.data.ndim - 1)).astype(pred.data.dtype)
    d = pred.data - t
    norm = max(1, int(rows.sum()))
    loss = (smooth_l1(d) * w).sum() / norm
    return apply("smooth_l1_loss", np.asarray(loss, dtype=pred.data.dtype), (pred,),
                 lambda g: (g * smooth_l1_grad(d) * w / norm,))
