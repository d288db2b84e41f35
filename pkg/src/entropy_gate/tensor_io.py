"""Readers and writers for probability tensors, label masks and JSON documents.

PTEN layout::

    0..4    b"PTEN" + version byte 0x01
    5..8    uint32 little-endian header length L
    9..9+L  UTF-8 JSON header {"dtype": "f32", "shape": [K, M, H, W],
            "order": "row-major", "model_names": [...]}
    rest    K*M*H*W little-endian float32 values

Masks are binary PGM (P5), one byte per pixel holding the class index.
Manifests and threshold documents are UTF-8 JSON; relative paths inside a
manifest are resolved against the manifest's own directory.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    HeaderMalformed,
    IoFailure,
    LabelExceedsClassCount,
    MagicMismatch,
    ManifestError,
    NotP5,
    PayloadTruncated,
    ProbabilityOutOfRange,
    RowNotNormalized,
    ValidationError,
)

MAGIC = b"PTEN"
VERSION = 1
SUM_TOLERANCE = 1e-4
_PREFIX = struct.Struct("<4sBI")
_F32 = np.dtype("<f4")

MANIFEST_FORMAT = "entropy-gate-manifest"
THRESHOLD_FORMAT = "entropy-gate-thresholds"


# ---------------------------------------------------------------------------
# Probability stacks
# ---------------------------------------------------------------------------


@dataclass
class ProbabilityStack:
    """Per-image class probabilities of K models, shaped (K, M, H, W)."""

    data: np.ndarray
    model_names: Optional[tuple] = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise DimensionMismatch(f"stack must be 4-D (K, M, H, W), got shape {self.data.shape}")
        if self.model_names is not None:
            self.model_names = tuple(self.model_names)
            if len(self.model_names) != self.data.shape[0]:
                raise DimensionMismatch(
                    f"{len(self.model_names)} model names for {self.data.shape[0]} models"
                )

    @property
    def k_models(self) -> int:
        return self.data.shape[0]

    @property
    def m_classes(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    def validate(self, tol: float = SUM_TOLERANCE, source="stack"):
        """Raise unless every pixel row lies on the probability simplex."""
        k, m, h, w = self.data.shape
        if k < 1 or m < 2 or h < 1 or w < 1:
            raise DimensionMismatch(f"{source}: need K>=1, M>=2, H>=1, W>=1, got {self.data.shape}")
        d = self.data.astype(np.float64, copy=False)
        bad = ~((d >= 0.0) & (d <= 1.0))  # catches NaN too
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ProbabilityOutOfRange(
                f"{source}: value {d[idx]!r} at (k, m, i, j)={idx} outside [0, 1]"
            )
        dev = np.abs(d.sum(axis=1) - 1.0)
        worst = np.unravel_index(int(np.argmax(dev)), dev.shape)
        if dev[worst] > tol:
            k_, i_, j_ = (int(v) for v in worst)
            raise RowNotNormalized(
                f"{source}: probabilities of model {k_} at pixel ({i_}, {j_}) sum to "
                f"{d[k_, :, i_, j_].sum():.6g} (deviation {dev[worst]:.3g} > {tol:g})"
            )
        return self


def _stack_header(stack: ProbabilityStack) -> bytes:
    header = {"dtype": "f32", "order": "row-major", "shape": list(stack.data.shape)}
    if stack.model_names is not None:
        header["model_names"] = list(stack.model_names)
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_stack(stack: ProbabilityStack, path) -> None:
    header = _stack_header(stack)
    payload = np.ascontiguousarray(stack.data, dtype=_F32).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write stack {path}: {exc}") from exc


def _read_bytes(path, what):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {what} {path}: {exc}") from exc


def read_stack(path, validate: bool = True) -> ProbabilityStack:
    """Load a PTEN file, checking header, payload size and simplex rows."""
    raw = _read_bytes(path, "stack")
    if len(raw) < _PREFIX.size or raw[:4] != MAGIC:
        raise MagicMismatch(f"{path}: not a PTEN file")
    _, version, hlen = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise HeaderMalformed(f"{path}: unsupported PTEN version {version}")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise PayloadTruncated(f"{path}: header declares {hlen} bytes, file ends early")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderMalformed(f"{path}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise HeaderMalformed(f"{path}: header must be an object")
    if header.get("dtype") != "f32" or header.get("order", "row-major") != "row-major":
        raise HeaderMalformed(f"{path}: only row-major f32 payloads are supported")
    shape = header.get("shape")
    if (
        not isinstance(shape, list)
        or len(shape) != 4
        or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape)
    ):
        raise HeaderMalformed(f"{path}: shape must be four non-negative integers, got {shape!r}")
    names = header.get("model_names")
    if names is not None and (not isinstance(names, list) or len(names) != shape[0]):
        raise HeaderMalformed(f"{path}: model_names does not match K={shape[0]}")

    payload = raw[start + hlen:]
    expected = math.prod(shape) * 4
    if len(payload) < expected:
        raise PayloadTruncated(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise HeaderMalformed(
            f"{path}: {len(payload) - expected} trailing bytes after declared payload"
        )
    data = np.frombuffer(payload, dtype=_F32).reshape(shape).astype(np.float32)
    stack = ProbabilityStack(data, tuple(names) if names is not None else None)
    if validate:
        stack.validate(source=str(path))
    return stack


# ---------------------------------------------------------------------------
# Label masks
# ---------------------------------------------------------------------------


@dataclass
class LabelMask:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise DimensionMismatch(f"mask must be 2-D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > 255):
            raise LabelExceedsClassCount("mask labels must fit in one byte")
        self.labels = labels.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def check_classes(self, class_count: int, source="mask"):
        if self.labels.size and int(self.labels.max()) >= class_count:
            bad = np.argwhere(self.labels >= class_count)[0]
            raise LabelExceedsClassCount(
                f"{source}: label {int(self.labels[tuple(bad)])} at {tuple(int(b) for b in bad)} "
                f"but only {class_count} classes"
            )
        return self


def write_mask(mask: LabelMask, path) -> None:
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(mask.labels, dtype=np.uint8).tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write mask {path}: {exc}") from exc


def _pgm_tokens(raw: bytes, count: int, path):
    """Return ``count`` header tokens and the offset of the raster."""
    tokens, pos, n = [], 2, len(raw)
    while len(tokens) < count:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise HeaderMalformed(f"{path}: PGM header ends early")
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= n or not raw[pos:pos + 1].isspace():
        raise HeaderMalformed(f"{path}: missing whitespace after PGM header")
    return tokens, pos + 1


def read_mask(path) -> LabelMask:
    raw = _read_bytes(path, "mask")
    if raw[:2] != b"P5":
        raise NotP5(f"{path}: not a binary PGM (P5) file")
    tokens, offset = _pgm_tokens(raw, 3, path)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise HeaderMalformed(f"{path}: non-numeric PGM header {tokens!r}") from exc
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise HeaderMalformed(f"{path}: unsupported PGM geometry {width}x{height} maxval {maxval}")
    raster = raw[offset:offset + width * height]
    if len(raster) < width * height:
        raise PayloadTruncated(f"{path}: raster has {len(raster)} bytes, expected {width * height}")
    labels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()
    return LabelMask(labels)


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------


@dataclass
class StackRef:
    """One PTEN file holding out-of-fold (or test-time) outputs for an image.

    ``models`` lists which manifest models the file covers (None means all,
    in manifest order). ``trained_folds`` records which folds the producing
    models were trained on; it is what makes leakage checkable.
    """

    path: str
    models: Optional[tuple] = None
    trained_folds: Optional[tuple] = None

    def to_json(self):
        out = {"path": self.path}
        if self.models is not None:
            out["models"] = list(self.models)
        if self.trained_folds is not None:
            out["trained_folds"] = list(self.trained_folds)
        return out


@dataclass
class ManifestEntry:
    image_id: str
    mask: Optional[str]
    stacks: list
    fold: Optional[int] = None
    split: str = "train"

    def to_json(self):
        out = {"id": self.image_id, "split": self.split}
        if self.fold is not None:
            out["fold"] = self.fold
        if self.mask is not None:
            out["mask"] = self.mask
        out["stacks"] = [s.to_json() for s in self.stacks]
        return out


@dataclass
class DatasetManifest:
    model_names: tuple
    class_count: int
    entries: list
    folds: int = 5
    root: Path = field(default_factory=Path, compare=False)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.model_names = tuple(self.model_names)
        if not self.model_names:
            raise ManifestError("manifest declares no models")
        if len(set(self.model_names)) != len(self.model_names):
            raise ManifestError(f"duplicate model names in {self.model_names}")
        if not 2 <= self.class_count <= 256:
            raise ManifestError(f"class_count must be in [2, 256], got {self.class_count}")
        if self.folds < 1:
            raise ManifestError("folds must be positive")
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate image ids in manifest")

    def resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def assign_folds(self):
        """Deal unassigned training images round-robin over folds, sorted by id."""
        pending = sorted((e for e in self.split("train") if e.fold is None), key=lambda e: e.image_id)
        for i, entry in enumerate(pending):
            entry.fold = i % self.folds
        return self

    def to_json(self):
        doc = {
            "format": MANIFEST_FORMAT,
            "version": 1,
            "model_names": list(self.model_names),
            "class_count": self.class_count,
            "folds": self.folds,
            "entries": [e.to_json() for e in self.entries],
        }
        doc.update(self.extra)
        return doc


def _dump_json(doc, path, what):
    text = json.dumps(doc, indent=2, sort_keys=False) + "\n"
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {what} {path}: {exc}") from exc


def _load_json(path, what):
    raw = _read_bytes(path, what)
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: {what} is not valid UTF-8 JSON ({exc})") from exc


def write_manifest(manifest: DatasetManifest, path) -> None:
    _dump_json(manifest.to_json(), path, "manifest")


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    doc = _load_json(path, "manifest")
    if not isinstance(doc, dict) or doc.get("format", MANIFEST_FORMAT) != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: not a dataset manifest")
    try:
        entries = []
        for e in doc["entries"]:
            stacks = [
                StackRef(
                    path=s["path"],
                    models=tuple(s["models"]) if s.get("models") is not None else None,
                    trained_folds=(
                        tuple(int(f) for f in s["trained_folds"])
                        if s.get("trained_folds") is not None
                        else None
                    ),
                )
                for s in e["stacks"]
            ]
            fold = e.get("fold")
            entries.append(
                ManifestEntry(
                    image_id=str(e["id"]),
                    mask=e.get("mask"),
                    stacks=stacks,
                    fold=int(fold) if fold is not None else None,
                    split=e.get("split", "train"),
                )
            )
        known = {"format", "version", "model_names", "class_count", "folds", "entries"}
        manifest = DatasetManifest(
            model_names=tuple(doc["model_names"]),
            class_count=int(doc["class_count"]),
            entries=entries,
            folds=int(doc.get("folds", 5)),
            root=Path(path).resolve().parent,
            extra={k: v for k, v in doc.items() if k not in known},
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: malformed manifest ({exc!r})") from exc

    for e in manifest.entries:
        if e.split not in ("train", "test"):
            raise ManifestError(f"{path}: image {e.image_id} has unknown split {e.split!r}")
        if e.fold is not None and not 0 <= e.fold < manifest.folds:
            raise ManifestError(f"{path}: image {e.image_id} fold {e.fold} outside [0, {manifest.folds})")
        for s in e.stacks:
            unknown = set(s.models or ()) - set(manifest.model_names)
            if unknown:
                raise ManifestError(f"{path}: image {e.image_id} references unknown models {sorted(unknown)}")
    if check_files:
        for e in manifest.entries:
            refs = [s.path for s in e.stacks] + ([e.mask] if e.mask else [])
            for rel in refs:
                if not manifest.resolve(rel).is_file():
                    raise IoFailure(f"{path}: image {e.image_id} references missing file {rel}")
    return manifest


# ---------------------------------------------------------------------------
# Threshold documents
# ---------------------------------------------------------------------------


@dataclass
class ThresholdDocument:
    thresholds: np.ndarray
    class_count: int
    achieved_dice: float
    seed: Optional[int] = None
    model_names: Optional[tuple] = None
    per_class_dice: Optional[list] = None
    fallback_pixels: Optional[int] = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64).reshape(-1)
        upper = math.log(self.class_count)
        bad = (self.thresholds < 0.0) | (self.thresholds > upper) | ~np.isfinite(self.thresholds)
        if bad.any():
            raise ValidationError(
                f"thresholds {self.thresholds.tolist()} must lie in [0, ln {self.class_count}={upper:.6f}]"
            )
        if self.model_names is not None:
            self.model_names = tuple(self.model_names)
            if len(self.model_names) != len(self.thresholds):
                raise DimensionMismatch("one threshold per model is required")

    def to_json(self):
        doc = {
            "format": THRESHOLD_FORMAT,
            "version": 1,
            "thresholds": [float(t) for t in self.thresholds],
            "class_count": self.class_count,
            "achieved_dice": float(self.achieved_dice),
            "seed": self.seed,
        }
        if self.model_names is not None:
            doc["model_names"] = list(self.model_names)
        if self.per_class_dice is not None:
            doc["per_class_dice"] = [float(v) for v in self.per_class_dice]
        if self.fallback_pixels is not None:
            doc["fallback_pixels"] = int(self.fallback_pixels)
        doc["config"] = self.config
        return doc


def write_thresholds(doc: ThresholdDocument, path) -> None:
    _dump_json(doc.to_json(), path, "threshold document")


def read_thresholds(path) -> ThresholdDocument:
    doc = _load_json(path, "threshold document")
    if not isinstance(doc, dict) or doc.get("format") != THRESHOLD_FORMAT:
        raise ValidationError(f"{path}: not a threshold document")
    try:
        return ThresholdDocument(
            thresholds=doc["thresholds"],
            class_count=int(doc["class_count"]),
            achieved_dice=float(doc["achieved_dice"]),
            seed=doc.get("seed"),
            model_names=doc.get("model_names"),
            per_class_dice=doc.get("per_class_dice"),
            fallback_pixels=doc.get("fallback_pixels"),
            config=doc.get("config", {}),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed threshold document ({exc!r})") from exc


def ensure_dir(path) -> Path:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create directory {path}: {exc}") from exc
    return Path(path)


def stack_from_models(stacks: Sequence[ProbabilityStack]) -> ProbabilityStack:
    """Concatenate per-model stacks along K."""
    names = None
    if all(s.model_names is not None for s in stacks):
        names = sum((s.model_names for s in stacks), ())
    return ProbabilityStack(np.concatenate([s.data for s in stacks], axis=0), names)
