"""Entropy-gated fusion of per-pixel class probabilities.

A model contributes to a pixel only when the Shannon entropy (nats) of its
prediction there is strictly below that model's threshold. Contributing rows
are averaged and the pixel takes the argmax class, lowest index on ties.
When no model passes, the pixel falls back to the plain mean of all models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch
from .tensor_io import LabelMask, ProbabilityStack


def normalize_rows(probs, axis=-1):
    """Rescale rows along ``axis`` to sum to exactly one, in float64."""
    p = np.asarray(probs, dtype=np.float64)
    return p / p.sum(axis=axis, keepdims=True)


def entropy(probs, axis=-1):
    """Shannon entropy in nats, with ``0 * ln 0 = 0``.

    Rows are renormalized first, so float32 rounding in the input never
    pushes the result outside ``[0, ln M]``.

    Parameters
    ----------
    probs : array_like
        Probabilities; ``axis`` runs over classes.
    axis : int, default -1

    Returns
    -------
    float or ndarray
        One entropy per row.
    """
    p = normalize_rows(probs, axis=axis)
    positive = p > 0.0
    logs = np.log(np.where(positive, p, 1.0))
    terms = np.where(positive, p * logs, 0.0)
    h = -terms.sum(axis=axis)
    # -0.0 and tiny negative rounding for one-hot rows
    h = np.maximum(h, 0.0)
    return float(h) if np.ndim(h) == 0 else h


def select(entropies, thresholds):
    """Flag each model whose entropy is strictly below its threshold."""
    e = np.asarray(entropies, dtype=np.float64)
    t = np.asarray(thresholds, dtype=np.float64)
    if e.shape[-1] != t.shape[-1]:
        raise LengthMismatch(f"{e.shape[-1]} entropies but {t.shape[-1]} thresholds")
    return e < t


def fuse_rows(probs, entropies, thresholds):
    """Vectorized fusion over a batch of pixels.

    Parameters
    ----------
    probs : ndarray, shape (P, K, M)
        Simplex rows, already renormalized.
    entropies : ndarray, shape (P, K)
    thresholds : array_like, shape (K,)

    Returns
    -------
    labels : ndarray of int64, shape (P,)
    combined : ndarray, shape (P, M)
    selected : ndarray of int64, shape (P,)
        Number of gated-in models per pixel; 0 marks a fallback pixel.
    """
    k = probs.shape[1]
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.shape != (k,):
        raise LengthMismatch(f"{k} models but {thresholds.size} thresholds")
    gate = select(entropies, thresholds)
    selected = gate.sum(axis=1)
    fallback = selected == 0
    weights = np.where(fallback[:, None], True, gate).astype(np.float64)
    counts = np.where(fallback, k, selected).astype(np.float64)
    combined = np.einsum("pk,pkm->pm", weights, probs) / counts[:, None]
    labels = np.argmax(combined, axis=1)
    return labels, combined, selected.astype(np.int64)


@dataclass
class FusedPixel:
    combined: np.ndarray
    label: int
    selected_count: int


def fuse_pixel(pixel_probs, thresholds) -> FusedPixel:
    """Fuse the K x M predictions of a single pixel."""
    rows = normalize_rows(np.atleast_2d(pixel_probs))
    labels, combined, selected = fuse_rows(rows[None], entropy(rows)[None], thresholds)
    return FusedPixel(combined[0], int(labels[0]), int(selected[0]))


@dataclass
class FusionResult:
    mask: LabelMask
    combined: np.ndarray  # (M, H, W)
    selected: np.ndarray  # (H, W), 0 where the fallback applied

    @property
    def fallback_pixels(self) -> int:
        return int((self.selected == 0).sum())


def stack_rows(stack: ProbabilityStack):
    """Flatten a stack to renormalized (H*W, K, M) rows and their entropies."""
    k, m, h, w = stack.data.shape
    rows = normalize_rows(stack.data.reshape(k, m, h * w).transpose(2, 0, 1))
    return rows, entropy(rows)


def fuse_stack(stack: ProbabilityStack, thresholds) -> FusionResult:
    rows, ent = stack_rows(stack)
    labels, combined, selected = fuse_rows(rows, ent, thresholds)
    h, w = stack.height, stack.width
    return FusionResult(
        mask=LabelMask(labels.reshape(h, w)),
        combined=combined.T.reshape(stack.m_classes, h, w),
        selected=selected.reshape(h, w),
    )


def max_entropy(class_count: int) -> float:
    return math.log(class_count)
