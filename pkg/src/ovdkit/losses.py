"""Distillation and contrastive objectives with analytic gradients.

All batch losses are mean-reduced over pairs; gradients are returned with
respect to the RoI features only (cached / class embeddings are constants).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ValidationError

KINDS = ("l2", "l1", "smooth_l1", "cosine")


def _pair(roi, cached):
    r = np.atleast_2d(np.asarray(roi, dtype=np.float64))
    c = np.atleast_2d(np.asarray(cached, dtype=np.float64))
    if r.shape != c.shape:
        raise ValidationError(f"feature batches differ in shape: {r.shape} vs {c.shape}")
    if r.shape[0] == 0:
        raise ValidationError("empty feature batch")
    return r, c


def kd_loss(roi, cached):
    """Mean squared L2 distance; grad = 2 (r - c) / N."""
    r, c = _pair(roi, cached)
    d = r - c
    n = r.shape[0]
    return float((d * d).sum() / n), 2.0 * d / n


def alt_kd_losses(roi, cached, kind: str, beta: float = 1.0):
    if kind == "l2":
        return kd_loss(roi, cached)
    r, c = _pair(roi, cached)
    n = r.shape[0]
    d = r - c
    if kind == "l1":
        return float(np.abs(d).sum() / n), np.sign(d) / n
    if kind == "smooth_l1":
        quad = np.abs(d) < beta
        val = np.where(quad, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta)
        grad = np.where(quad, d / beta, np.sign(d))
        return float(val.sum() / n), grad / n
    if kind == "cosine":
        nr = np.linalg.norm(r, axis=1, keepdims=True)
        nc = np.linalg.norm(c, axis=1, keepdims=True)
        if (nr == 0).any() or (nc == 0).any():
            raise ValidationError("cosine distillation of a zero-norm feature")
        cos = (r * c).sum(axis=1, keepdims=True) / (nr * nc)
        grad = -(c / (nr * nc) - cos * r / nr**2) / n
        return float((1.0 - cos).sum() / n), grad
    raise ValidationError(f"unknown distillation loss {kind!r}; expected one of {KINDS}")


def cons_loss(roi, class_embeddings, labels, temperature: float = 0.05):
    """Mean cross-entropy of a tempered softmax over cosine similarities.

    The gradient is taken with respect to the un-normalised RoI features.
    """
    r = np.atleast_2d(np.asarray(roi, dtype=np.float64))
    e = np.atleast_2d(np.asarray(class_embeddings, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if not temperature > 0:
        raise ValidationError("temperature must be positive")
    if r.shape[0] == 0 or labels.shape != (r.shape[0],):
        raise ValidationError(f"need one label per feature, got {labels.size} for {r.shape[0]}")
    if r.shape[1] != e.shape[1]:
        raise ValidationError(f"feature dim {r.shape[1]} != class embedding dim {e.shape[1]}")
    if (labels < 0).any() or (labels >= e.shape[0]).any():
        raise ValidationError(f"labels must index {e.shape[0]} class embeddings")
    nr = np.linalg.norm(r, axis=1, keepdims=True)
    ne = np.linalg.norm(e, axis=1, keepdims=True)
    if (nr == 0).any() or (ne == 0).any():
        raise ValidationError("cons_loss needs nonzero features and embeddings")
    u = r / nr
    eh = e / ne
    z = (u @ eh.T) / temperature
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = r.shape[0]
    rows = np.arange(n)
    value = float(-logp[rows, labels].sum() / n)

    g_s = np.exp(logp)
    g_s[rows, labels] -= 1.0
    g_s /= temperature * n
    g_u = g_s @ eh
    g_r = (g_u - (g_u * u).sum(axis=1, keepdims=True) * u) / nr
    return value, g_r


@dataclass(frozen=True)
class LossComponents:
    l_reg_rpn: float = 0.0
    l_cls_rpn: float = 0.0
    l_reg_roi: float = 0.0
    l_cons: float = 0.0
    l_kd: float = 0.0
    weight_kd: float = 1.0

    def __post_init__(self):
        for name in ("l_reg_rpn", "l_cls_rpn", "l_reg_roi", "l_cons", "l_kd", "weight_kd"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValidationError(f"{name} is not finite")
            if name != "weight_kd" and v < 0:
                raise ValidationError(f"{name} must be nonnegative, got {v}")


def total_loss(c: LossComponents) -> float:
    return c.l_reg_rpn + c.l_cls_rpn + c.l_reg_roi + c.l_cons + c.weight_kd * c.l_kd


def numeric_grad(fn: Callable[[np.ndarray], float], x, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def max_rel_err(analytic, numeric) -> float:
    """Infinity-norm error relative to the numeric gradient's magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(b).max(), np.abs(a).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)
