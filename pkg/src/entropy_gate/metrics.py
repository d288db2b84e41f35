"""Dice coefficient over crisp label maps, accumulated as integer counts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, LengthMismatch


def dice_per_class(pred_m, ground_m) -> float:
    """Dice of two binary indicator vectors; 1.0 when both are empty."""
    p = np.asarray(pred_m).reshape(-1).astype(np.int64)
    g = np.asarray(ground_m).reshape(-1).astype(np.int64)
    if p.shape != g.shape:
        raise LengthMismatch(f"pred has {p.size} entries, ground has {g.size}")
    denom = int(p @ p) + int(g @ g)
    if denom == 0:
        return 1.0
    return 2 * int(p @ g) / denom


def class_counts(pred_labels, ground_labels, class_count: int):
    """Per-class (intersection, predicted, ground) pixel counts as int64."""
    p = np.asarray(pred_labels).reshape(-1)
    g = np.asarray(ground_labels).reshape(-1)
    if p.shape != g.shape:
        raise DimensionMismatch(f"pred has {p.size} pixels, ground has {g.size}")
    hit = p == g
    inter = np.bincount(g[hit], minlength=class_count)[:class_count]
    pc = np.bincount(p, minlength=class_count)[:class_count]
    gc = np.bincount(g, minlength=class_count)[:class_count]
    return inter.astype(np.int64), pc.astype(np.int64), gc.astype(np.int64)


@dataclass
class DiceReport:
    per_class: np.ndarray
    average: float
    fallback_pixel_count: int = 0
    both_empty_classes: int = 0

    def as_dict(self):
        return {
            "per_class": [float(v) for v in self.per_class],
            "average": float(self.average),
            "fallback_pixel_count": int(self.fallback_pixel_count),
            "both_empty_classes": int(self.both_empty_classes),
        }


def dice_from_counts(inter, pred_count, ground_count, fallback_pixels: int = 0) -> DiceReport:
    inter = np.asarray(inter, dtype=np.int64)
    denom = np.asarray(pred_count, dtype=np.int64) + np.asarray(ground_count, dtype=np.int64)
    empty = denom == 0
    per_class = np.where(empty, 1.0, 2.0 * inter / np.where(empty, 1, denom))
    return DiceReport(
        per_class=per_class,
        average=float(np.mean(per_class)),
        fallback_pixel_count=int(fallback_pixels),
        both_empty_classes=int(empty.sum()),
    )


def dice_average(masks_pred: Sequence, masks_ground: Sequence, class_count: int) -> DiceReport:
    """Average Dice over all pixels of all images, flattened into one corpus.

    Accepts ``LabelMask`` objects or plain 2-D arrays.
    """
    if len(masks_pred) != len(masks_ground):
        raise DimensionMismatch(f"{len(masks_pred)} predicted masks, {len(masks_ground)} ground truths")
    inter = np.zeros(class_count, np.int64)
    pc = np.zeros(class_count, np.int64)
    gc = np.zeros(class_count, np.int64)
    for n, (p, g) in enumerate(zip(masks_pred, masks_ground)):
        p = np.asarray(getattr(p, "labels", p))
        g = np.asarray(getattr(g, "labels", g))
        if p.shape != g.shape:
            raise DimensionMismatch(f"image {n}: prediction {p.shape} vs ground truth {g.shape}")
        i, a, b = class_counts(p, g, class_count)
        inter += i
        pc += a
        gc += b
    return dice_from_counts(inter, pc, gc)
