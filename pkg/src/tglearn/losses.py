"""Fused loss functions with closed-form gradients."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .tensor import Tensor, _make


def cross_entropy_smoothed(logits: Tensor, labels, epsilon: float = 0.0) -> Tensor:
    """Mean label-smoothed cross-entropy.

    The target distribution for a row with label ``y`` is
    ``(1 - epsilon) * onehot(y) + epsilon / K``.
    """
    if not 0 <= epsilon < 1:
        raise ParameterError(f"label smoothing must be in [0, 1), got {epsilon}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ParameterError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels must lie in [0, {k})")

    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    target = np.full_like(x, epsilon / k)
    target[np.arange(n), labels] += 1 - epsilon
    loss = -(target * logp).sum() / n

    def grad_fn(g):
        return (g * (np.exp(logp) - target) / n,)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), grad_fn)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw scores, stable for large |logit|."""
    targets = np.asarray(targets)
    if not np.all((targets == 0) | (targets == 1)):
        raise ValueError("bce targets must be 0 or 1")
    s = logits.data.reshape(-1)
    t = targets.reshape(-1).astype(s.dtype)
    if s.shape != t.shape:
        raise ParameterError(f"{s.shape[0]} logits vs {t.shape[0]} targets")
    n = s.shape[0]
    # log(1 + e^{-s}) for t=1, log(1 + e^{s}) for t=0
    per = np.maximum(s, 0) - s * t + np.log1p(np.exp(-np.abs(s)))
    loss = per.sum() / n
    shape = logits.shape

    def grad_fn(g):
        sig = np.where(s >= 0, 1 / (1 + np.exp(-np.abs(s))),
                       np.exp(-np.abs(s)) / (1 + np.exp(-np.abs(s))))
        return ((g * (sig - t) / n).reshape(shape).astype(s.dtype, copy=False),)

    return _make(np.asarray(loss, dtype=s.dtype), (logits,), grad_fn)
