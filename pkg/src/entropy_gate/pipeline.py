"""Training and segmentation pipeline around the gated fusion rule.

Threshold fitting runs on a stacking prediction matrix: every training image
carries probabilities produced by models that never saw that image's fold.
Model outputs enter either from PTEN files listed in a manifest (real models
exported elsewhere) or from the synthetic predictors defined here.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import clpso
from .errors import (
    FoldLeakage,
    GridTooLarge,
    LengthMismatch,
    ManifestError,
    MissingFoldPrediction,
    ShapeMismatch,
    ValidationError,
)
from .fusion import entropy, fuse_rows, fuse_stack, normalize_rows
from .metrics import DiceReport, class_counts, dice_average, dice_from_counts
from .tensor_io import (
    DatasetManifest,
    LabelMask,
    ManifestEntry,
    ProbabilityStack,
    StackRef,
    ThresholdDocument,
    ensure_dir,
    read_mask,
    read_stack,
    write_manifest,
    write_mask,
    write_stack,
)

DEFAULT_FOLDS = 5


# ---------------------------------------------------------------------------
# Prediction matrix
# ---------------------------------------------------------------------------


@dataclass
class PredictionMatrix:
    """All pixels of a set of images, flattened to rows of K x M probabilities.

    ``rows`` are renormalized float64 copies of the stacks and ``entropies``
    are cached once, since only the thresholds change between fitness calls.
    """

    image_ids: list
    shapes: list
    rows: np.ndarray  # (P, K, M)
    entropies: np.ndarray  # (P, K)
    ground: np.ndarray  # (P,)
    class_count: int
    model_names: tuple
    folds: Optional[list] = None

    @classmethod
    def from_stacks(cls, image_ids, stacks, masks, class_count, model_names=None, folds=None):
        if not (len(image_ids) == len(stacks) == len(masks)):
            raise LengthMismatch("image ids, stacks and masks must align")
        if not stacks:
            raise ValidationError("prediction matrix needs at least one image")
        k = stacks[0].k_models
        if model_names is None:
            model_names = stacks[0].model_names or tuple(f"model{i}" for i in range(k))
        rows, ground, shapes = [], [], []
        for image_id, stack, mask in zip(image_ids, stacks, masks):
            labels = np.asarray(getattr(mask, "labels", mask))
            if stack.k_models != k or stack.m_classes != class_count:
                raise ShapeMismatch(
                    f"image {image_id}: stack has K={stack.k_models}, M={stack.m_classes}; "
                    f"expected K={k}, M={class_count}"
                )
            if labels.shape != (stack.height, stack.width):
                raise ShapeMismatch(
                    f"image {image_id}: mask {labels.shape} vs stack {(stack.height, stack.width)}"
                )
            LabelMask(labels).check_classes(class_count, source=f"image {image_id}")
            h, w = labels.shape
            rows.append(stack.data.reshape(k, class_count, h * w).transpose(2, 0, 1))
            ground.append(labels.reshape(-1))
            shapes.append((h, w))
        rows = normalize_rows(np.concatenate(rows))
        return cls(
            image_ids=list(image_ids),
            shapes=shapes,
            rows=rows,
            entropies=entropy(rows),
            ground=np.concatenate(ground).astype(np.int64),
            class_count=class_count,
            model_names=tuple(model_names),
            folds=list(folds) if folds is not None else None,
        )

    @property
    def k_models(self) -> int:
        return self.rows.shape[1]

    @property
    def n_pixels(self) -> int:
        return self.rows.shape[0]

    def image_slices(self):
        start = 0
        for h, w in self.shapes:
            yield slice(start, start + h * w)
            start += h * w

    def masks_from_labels(self, labels) -> list:
        return [LabelMask(labels[s].reshape(shape)) for s, shape in zip(self.image_slices(), self.shapes)]

    def ground_masks(self) -> list:
        return self.masks_from_labels(self.ground)


# ---------------------------------------------------------------------------
# Manifest ingestion
# ---------------------------------------------------------------------------


def _entry_stack(manifest: DatasetManifest, entry: ManifestEntry, out_of_fold: bool) -> ProbabilityStack:
    """Gather all K models for one image in manifest order."""
    parts = {}
    for ref in entry.stacks:
        models = ref.models if ref.models is not None else manifest.model_names
        if out_of_fold:
            if ref.trained_folds is None:
                raise ManifestError(
                    f"image {entry.image_id}: stack {ref.path} does not declare trained_folds, "
                    "so fold leakage cannot be ruled out"
                )
            if entry.fold in ref.trained_folds:
                raise FoldLeakage(
                    f"image {entry.image_id} (fold {entry.fold}): stack {ref.path} comes from "
                    f"models trained on folds {list(ref.trained_folds)}"
                )
        stack = read_stack(manifest.resolve(ref.path))
        if stack.k_models != len(models):
            raise ShapeMismatch(f"{ref.path}: holds {stack.k_models} models, manifest lists {len(models)}")
        if stack.model_names is not None and tuple(stack.model_names) != tuple(models):
            raise ShapeMismatch(f"{ref.path}: model names {stack.model_names} differ from manifest {tuple(models)}")
        if stack.m_classes != manifest.class_count:
            raise ShapeMismatch(f"{ref.path}: M={stack.m_classes}, manifest class_count={manifest.class_count}")
        for i, name in enumerate(models):
            parts[name] = stack.data[i:i + 1]
    missing = [name for name in manifest.model_names if name not in parts]
    if missing:
        what = f"fold-{entry.fold} " if out_of_fold else ""
        raise MissingFoldPrediction(f"image {entry.image_id} lacks {what}predictions for models {missing}")
    shapes = {p.shape[2:] for p in parts.values()}
    if len(shapes) != 1:
        raise ShapeMismatch(f"image {entry.image_id}: model outputs have differing sizes {sorted(shapes)}")
    data = np.concatenate([parts[name] for name in manifest.model_names], axis=0)
    return ProbabilityStack(data, manifest.model_names)


def load_split(manifest: DatasetManifest, split: str = "test", require_masks: bool = True) -> list:
    """Return ``(entry, stack, mask_or_None)`` triples for one split."""
    out = []
    oof = split == "train"
    for entry in manifest.split(split):
        stack = _entry_stack(manifest, entry, out_of_fold=oof)
        mask = None
        if entry.mask is not None:
            mask = read_mask(manifest.resolve(entry.mask))
            mask.check_classes(manifest.class_count, source=f"image {entry.image_id}")
        elif require_masks:
            raise ManifestError(f"image {entry.image_id} has no ground-truth mask")
        out.append((entry, stack, mask))
    return out


def build_prediction_matrix(manifest: DatasetManifest, split: str = "train") -> PredictionMatrix:
    """Assemble the stacking matrix; every image must have clean out-of-fold outputs."""
    manifest.assign_folds()
    loaded = load_split(manifest, split)
    if not loaded:
        raise ManifestError(f"manifest has no {split} images")
    if split == "train":
        used = {e.fold for e, _, _ in loaded}
        if used != set(range(manifest.folds)) and len(loaded) >= manifest.folds:
            raise ManifestError(f"training folds {sorted(used)} do not cover 0..{manifest.folds - 1}")
    return PredictionMatrix.from_stacks(
        [e.image_id for e, _, _ in loaded],
        [s for _, s, _ in loaded],
        [m for _, _, m in loaded],
        manifest.class_count,
        manifest.model_names,
        folds=[e.fold for e, _, _ in loaded] if split == "train" else None,
    )


# ---------------------------------------------------------------------------
# Fitness
# ---------------------------------------------------------------------------


def check_thresholds(thresholds, k: int, m: int) -> np.ndarray:
    t = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    if t.size != k:
        raise LengthMismatch(f"{t.size} thresholds for {k} models")
    if np.any(t < 0.0) or np.any(t > math.log(m)):
        raise ValidationError(f"thresholds {t.tolist()} outside [0, ln {m}]")
    return t


def fitness_report(thresholds, matrix: PredictionMatrix) -> DiceReport:
    t = check_thresholds(thresholds, matrix.k_models, matrix.class_count)
    labels, _, selected = fuse_rows(matrix.rows, matrix.entropies, t)
    counts = class_counts(labels, matrix.ground, matrix.class_count)
    return dice_from_counts(*counts, fallback_pixels=int((selected == 0).sum()))


def fitness_of(thresholds, matrix: PredictionMatrix) -> float:
    """Average Dice of the gated ensemble over the whole matrix."""
    return fitness_report(thresholds, matrix).average


def mean_ensemble_report(matrix: PredictionMatrix) -> DiceReport:
    # all-zero thresholds gate everyone out, so every pixel takes the fallback mean
    return fitness_report(np.zeros(matrix.k_models), matrix)


def model_reports(matrix: PredictionMatrix) -> list:
    out = []
    for k in range(matrix.k_models):
        labels = np.argmax(matrix.rows[:, k, :], axis=1)
        out.append(dice_from_counts(*class_counts(labels, matrix.ground, matrix.class_count)))
    return out


# ---------------------------------------------------------------------------
# Training and segmentation
# ---------------------------------------------------------------------------


def train(source, config: Optional[clpso.SwarmConfig] = None, workers: int = 1, callback=None):
    """Fit thresholds on a manifest or an already built prediction matrix.

    Returns the threshold document and the swarm trace.
    """
    config = config or clpso.SwarmConfig()
    matrix = source if isinstance(source, PredictionMatrix) else build_prediction_matrix(source)
    doc, trace = clpso.optimize(
        config,
        lambda t: fitness_of(t, matrix),
        matrix.k_models,
        matrix.class_count,
        workers=workers,
        callback=callback,
        model_names=matrix.model_names,
    )
    report = fitness_report(doc.thresholds, matrix)
    doc.per_class_dice = report.per_class.tolist()
    doc.fallback_pixels = report.fallback_pixel_count
    return doc, trace


def segment(stack: ProbabilityStack, doc: ThresholdDocument) -> LabelMask:
    if stack.k_models != len(doc.thresholds) or stack.m_classes != doc.class_count:
        raise ShapeMismatch(
            f"stack has K={stack.k_models}, M={stack.m_classes}; thresholds are for "
            f"K={len(doc.thresholds)}, M={doc.class_count}"
        )
    if stack.model_names is not None and doc.model_names is not None and stack.model_names != doc.model_names:
        raise ShapeMismatch(f"stack models {stack.model_names} differ from {doc.model_names}")
    return fuse_stack(stack, doc.thresholds).mask


# ---------------------------------------------------------------------------
# Grid oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridOracleSpec:
    resolution: float
    k: int
    m: int
    max_points: int = 10**6

    def axis(self) -> np.ndarray:
        upper = math.log(self.m)
        ratio = upper / self.resolution
        cells = round(ratio)
        if cells < 1 or abs(ratio - cells) > 1e-2:
            raise ValidationError(
                f"grid step {self.resolution} does not split [0, {upper:.6f}] into whole cells"
            )
        return np.linspace(0.0, upper, cells + 1)

    def size(self) -> int:
        return len(self.axis()) ** self.k


def grid_oracle(matrix: PredictionMatrix, spec: GridOracleSpec, workers: int = 1):
    """Exhaustive search over the threshold grid; ties go to the lexicographically smallest point."""
    axis = spec.axis()
    total = len(axis) ** spec.k
    if total > spec.max_points:
        raise GridTooLarge(f"{len(axis)}^{spec.k} = {total} grid points exceeds {spec.max_points}")
    points = list(itertools.product(axis, repeat=spec.k))
    if workers == 1:
        scores = [fitness_of(p, matrix) for p in points]
    else:
        with ThreadPoolExecutor(max_workers=workers or None) as pool:
            scores = list(pool.map(lambda p: fitness_of(p, matrix), points))
    best = int(np.argmax(scores))  # first maximum in product (lexicographic) order
    return np.asarray(points[best]), float(scores[best])


# ---------------------------------------------------------------------------
# Synthetic predictors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticPredictorSpec:
    """Stand-in for a trained segmentation model.

    base_accuracy
        Chance that a pixel's (biased) true class receives the dominant mass.
    sharpness
        Beta(sharpness, 1) shape for how far the dominant mass sits above
        uniform; larger means more confident outputs.
    bias
        Pixels of foreground dilation (positive) or erosion (negative)
        applied to the truth before emission.
    """

    base_accuracy: float
    sharpness: float = 4.0
    bias: int = 0
    seed: int = 0
    name: Optional[str] = None

    def __post_init__(self):
        if not 0.0 < self.base_accuracy < 1.0:
            raise ValidationError("base_accuracy must be in (0, 1)")
        if self.sharpness <= 0:
            raise ValidationError("sharpness must be positive")


def _shift_boundary(labels: np.ndarray, bias: int) -> np.ndarray:
    if bias == 0:
        return labels
    size = 2 * abs(bias) + 1
    if bias > 0:
        return ndimage.grey_dilation(labels, size=(size, size), mode="nearest")
    return ndimage.grey_erosion(labels, size=(size, size), mode="nearest")


def emit_probabilities(labels, spec: SyntheticPredictorSpec, class_count: int, rng) -> np.ndarray:
    """Draw an (M, H, W) probability map for one image from a synthetic predictor."""
    labels = np.asarray(labels, dtype=np.int64)
    m = class_count
    shape = labels.shape
    target = _shift_boundary(labels, spec.bias)
    # fixed draw order regardless of which branch a pixel takes
    correct = rng.random(shape) < spec.base_accuracy
    wrong = (target + rng.integers(1, m, size=shape)) % m
    u = rng.beta(spec.sharpness, 1.0, size=shape)
    rest = rng.dirichlet(np.ones(m - 1), size=shape) if m > 2 else np.ones(shape + (1,))

    dominant = np.where(correct, target, wrong)
    dom_mass = 1.0 / m + (1.0 - 1.0 / m) * u
    probs = np.empty(shape + (m,))
    # spread the remaining mass over the non-dominant classes in index order
    order = (dominant[..., None] + np.arange(1, m)) % m
    np.put_along_axis(probs, order, (1.0 - dom_mass)[..., None] * rest, axis=-1)
    np.put_along_axis(probs, dominant[..., None], dom_mass[..., None], axis=-1)
    return np.moveaxis(probs, -1, 0)


def _emission_rng(spec: SyntheticPredictorSpec, fold: int, image_index: int):
    return np.random.default_rng([spec.seed, fold, image_index])


def synthetic_stack(labels, specs: Sequence[SyntheticPredictorSpec], class_count: int, fold: int, image_index: int):
    """K-model stack for one image; ``fold`` identifies which model instances produced it."""
    data = np.stack(
        [emit_probabilities(labels, s, class_count, _emission_rng(s, fold, image_index)) for s in specs]
    ).astype(np.float32)
    names = tuple(s.name or f"model{k}" for k, s in enumerate(specs))
    return ProbabilityStack(data, names)


def round_robin_folds(image_ids: Sequence[str], folds: int) -> list:
    order = sorted(range(len(image_ids)), key=lambda i: image_ids[i])
    out = [0] * len(image_ids)
    for rank, i in enumerate(order):
        out[i] = rank % folds
    return out


def make_masks(n: int, height: int, width: int, class_count: int = 2, seed: int = 0) -> list:
    """Random ground truths: background with one to three elliptical blobs."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    masks = []
    for _ in range(n):
        labels = np.zeros((height, width), dtype=np.uint8)
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            ry = rng.uniform(0.1, 0.3) * height
            rx = rng.uniform(0.1, 0.3) * width
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            labels[inside] = rng.integers(1, class_count)
        masks.append(LabelMask(labels))
    return masks


def synthetic_matrix(masks, specs, class_count: int = 2, folds: int = DEFAULT_FOLDS, image_ids=None):
    """In-memory twin of ``synthesize_predictions`` for the training split."""
    image_ids = list(image_ids or [f"img{n:04d}" for n in range(len(masks))])
    fold_of = round_robin_folds(image_ids, folds)
    stacks = [
        synthetic_stack(getattr(mk, "labels", mk), specs, class_count, fold_of[n], n)
        for n, mk in enumerate(masks)
    ]
    return PredictionMatrix.from_stacks(
        image_ids, stacks, masks, class_count, stacks[0].model_names, folds=fold_of
    )


def synthesize_predictions(
    masks,
    specs: Sequence[SyntheticPredictorSpec],
    folds: int,
    out_dir,
    class_count: int = 2,
    test_masks=(),
    image_ids=None,
) -> DatasetManifest:
    """Write masks, out-of-fold stacks, test stacks and a manifest under ``out_dir``.

    Training image ``n`` in fold ``t`` is emitted by the model instances
    keyed ``t`` (standing in for models trained on every other fold); test
    images use instances keyed ``folds`` (the full-data models).
    """
    out = ensure_dir(out_dir)
    ensure_dir(out / "masks")
    ensure_dir(out / "stacks")
    image_ids = list(image_ids or [f"img{n:04d}" for n in range(len(masks))])
    fold_of = round_robin_folds(image_ids, folds)
    names = tuple(s.name or f"model{k}" for k, s in enumerate(specs))
    if len(set(names)) != len(names):
        raise ValidationError(f"synthetic model names must be unique, got {names}")
    entries = []

    def emit(image_id, labels, fold, index, split, trained):
        mask_rel = f"masks/{image_id}.pgm"
        stack_rel = f"stacks/{image_id}.pten"
        write_mask(LabelMask(labels), out / mask_rel)
        write_stack(synthetic_stack(labels, specs, class_count, fold, index), out / stack_rel)
        entries.append(
            ManifestEntry(
                image_id=image_id,
                mask=mask_rel,
                stacks=[StackRef(stack_rel, trained_folds=tuple(trained))],
                fold=fold if split == "train" else None,
                split=split,
            )
        )

    for n, mk in enumerate(masks):
        labels = np.asarray(getattr(mk, "labels", mk))
        emit(image_ids[n], labels, fold_of[n], n, "train",
             [t for t in range(folds) if t != fold_of[n]])
    for n, mk in enumerate(test_masks):
        labels = np.asarray(getattr(mk, "labels", mk))
        emit(f"test{n:04d}", labels, folds, len(masks) + n, "test", range(folds))

    manifest = DatasetManifest(
        model_names=names,
        class_count=class_count,
        entries=entries,
        folds=folds,
        root=out.resolve(),
        extra={"synthetic_models": [
            {"name": nm, "base_accuracy": s.base_accuracy, "sharpness": s.sharpness,
             "bias": s.bias, "seed": s.seed}
            for nm, s in zip(names, specs)
        ]},
    )
    write_manifest(manifest, out / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# Evaluation report
# ---------------------------------------------------------------------------


@dataclass
class EvaluationReport:
    model_names: tuple
    class_count: int
    n_images: int
    per_model: list
    mean_ensemble: DiceReport
    gated: Optional[DiceReport] = None
    thresholds: Optional[np.ndarray] = None
    masks: Optional[DiceReport] = None
    extra: dict = field(default_factory=dict)

    def rows(self):
        thr = self.thresholds
        for k, name in enumerate(self.model_names):
            yield name, (float(thr[k]) if thr is not None else None), self.per_model[k]
        yield "mean-ensemble", None, self.mean_ensemble
        if self.gated is not None:
            yield "gated-ensemble", None, self.gated
        if self.masks is not None:
            yield "masks", None, self.masks

    def format_table(self) -> str:
        head = ["method", "threshold", "dice"] + [f"dice_c{m}" for m in range(self.class_count)] + ["fallback_px"]
        body = []
        for name, thr, rep in self.rows():
            body.append(
                [name, "-" if thr is None else f"{thr:.4f}", f"{rep.average:.4f}"]
                + [f"{v:.4f}" for v in rep.per_class]
                + [str(rep.fallback_pixel_count)]
            )
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
        return "\n".join([fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]) + "\n"

    def as_dict(self):
        return {
            "n_images": self.n_images,
            "class_count": self.class_count,
            "rows": [
                {"method": name, "threshold": thr, **rep.as_dict()} for name, thr, rep in self.rows()
            ],
            **self.extra,
        }


def evaluate(matrix: PredictionMatrix, doc: Optional[ThresholdDocument] = None, pred_masks=None) -> EvaluationReport:
    """Per-model, plain-ensemble and gated-ensemble Dice on one set of images."""
    gated = None
    thresholds = None
    if doc is not None:
        if len(doc.thresholds) != matrix.k_models or doc.class_count != matrix.class_count:
            raise ShapeMismatch("threshold document does not match the evaluated models")
        gated = fitness_report(doc.thresholds, matrix)
        thresholds = doc.thresholds
    masks = None
    if pred_masks is not None:
        masks = dice_average(pred_masks, matrix.ground_masks(), matrix.class_count)
    return EvaluationReport(
        model_names=matrix.model_names,
        class_count=matrix.class_count,
        n_images=len(matrix.image_ids),
        per_model=model_reports(matrix),
        mean_ensemble=mean_ensemble_report(matrix),
        gated=gated,
        thresholds=thresholds,
        masks=masks,
    )
