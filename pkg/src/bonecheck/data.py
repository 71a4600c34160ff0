"""Dataset ingestion, preprocessing, augmentation, and synthetic data.

Directory grammar (the public musculoskeletal dataset convention):

    root/{train,valid}/XR_{TYPE}/patient{ID}/study{N}_{positive|negative}/image{K}.png

Folder suffix "positive" means abnormal. Internally the training label y
is 1 for normal and 0 for abnormal; evaluation treats abnormal as the
positive class.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

STUDY_TYPES = ("elbow", "finger", "forearm", "hand", "humerus", "shoulder", "wrist")

LABEL_NORMAL = "normal"
LABEL_ABNORMAL = "abnormal"

#: training label code: y=1 normal, y=0 abnormal
LABEL_CODE = {LABEL_NORMAL: 1, LABEL_ABNORMAL: 0}

MANIFEST_CSV_HEADER = ["path", "study_type", "patient_id", "study_id", "label"]

_IMAGE_EXTS = {".png"}

_TYPE_RE = re.compile(r"^XR_([A-Z]+)$")
_PATIENT_RE = re.compile(r"^patient(\w+)$")
_STUDY_RE = re.compile(r"^study(\d+)_(positive|negative)$")


class DatasetError(ValueError):
    pass


class MalformedStudyError(DatasetError):
    pass


@dataclass(frozen=True)
class StudyRecord:
    study_type: str
    patient_id: str
    study_index: int
    label: str  # "normal" | "abnormal"
    view_paths: tuple[str, ...]

    def __post_init__(self):
        if not self.view_paths:
            raise MalformedStudyError(
                f"study {self.study_type}/{self.patient_id}/{self.study_index} has no views")

    @property
    def study_id(self) -> str:
        return f"{self.study_type}/patient{self.patient_id}/study{self.study_index}"


@dataclass
class DatasetManifest:
    split: str
    studies: list[StudyRecord] = field(default_factory=list)

    @property
    def counts(self) -> dict[tuple[str, str], int]:
        out: dict[tuple[str, str], int] = {}
        for s in self.studies:
            key = (s.study_type, s.label)
            out[key] = out.get(key, 0) + 1
        return out

    def views(self) -> list[tuple[str, StudyRecord]]:
        """All (view path, study) pairs in manifest order."""
        return [(p, s) for s in self.studies for p in s.view_paths]


@dataclass
class AugmentationConfig:
    rescale: float = 1.0 / 255.0
    horizontal_flip_prob: float = 0.5
    rotation_range_deg: float = 45.0
    target_size: tuple[int, int] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        if self.rotation_range_deg < 0:
            raise ValueError("rotation_range_deg must be >= 0")
        if min(self.target_size) < 1:
            raise ValueError("target_size dims must be >= 1")
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise ValueError("horizontal_flip_prob must be in [0,1]")


def scan_dataset(root, split: str = "train", on_malformed: str = "error") -> DatasetManifest:
    """Walk one split of a dataset tree into a manifest, lexicographic order.

    on_malformed: "error" raises on the first malformed directory, "skip"
    ignores it.
    """
    root = Path(root)
    split_dir = root / split
    if not split_dir.is_dir():
        raise DatasetError(f"split directory not found: {split_dir}")

    def bad(msg: str):
        if on_malformed == "error":
            raise MalformedStudyError(msg)

    studies: list[StudyRecord] = []
    for type_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        m = _TYPE_RE.match(type_dir.name)
        if not m or m.group(1).lower() not in STUDY_TYPES:
            bad(f"unrecognized study-type directory: {type_dir}")
            continue
        study_type = m.group(1).lower()
        for patient_dir in sorted(p for p in type_dir.iterdir() if p.is_dir()):
            pm = _PATIENT_RE.match(patient_dir.name)
            if not pm:
                bad(f"unrecognized patient directory: {patient_dir}")
                continue
            for study_dir in sorted(p for p in patient_dir.iterdir() if p.is_dir()):
                sm = _STUDY_RE.match(study_dir.name)
                if not sm:
                    bad(f"unrecognized study directory: {study_dir}")
                    continue
                views = tuple(sorted(str(p) for p in study_dir.iterdir()
                                     if p.suffix.lower() in _IMAGE_EXTS))
                if not views:
                    bad(f"study directory has no images: {study_dir}")
                    continue
                label = LABEL_ABNORMAL if sm.group(2) == "positive" else LABEL_NORMAL
                studies.append(StudyRecord(study_type, pm.group(1),
                                           int(sm.group(1)), label, views))
    if not studies:
        raise DatasetError(f"no studies found under {split_dir}")
    return DatasetManifest(split=split, studies=studies)


def load_manifest_csv(path, split: str = "train") -> DatasetManifest:
    """Alternative ingestion: CSV with header path,study_type,patient_id,study_id,label."""
    groups: dict[tuple, list[str]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_CSV_HEADER:
            raise DatasetError(
                f"{path}: header must be {','.join(MANIFEST_CSV_HEADER)}")
        for row in reader:
            if row["label"] not in (LABEL_NORMAL, LABEL_ABNORMAL):
                raise DatasetError(f"{path}: bad label {row['label']!r}")
            key = (row["study_type"], row["patient_id"], int(row["study_id"]), row["label"])
            groups.setdefault(key, []).append(row["path"])
    studies = [StudyRecord(t, pid, sid, label, tuple(sorted(paths)))
               for (t, pid, sid, label), paths in sorted(groups.items())]
    if not studies:
        raise DatasetError(f"{path}: empty manifest")
    return DatasetManifest(split=split, studies=studies)


def load_image(path, target_size: tuple[int, int]) -> np.ndarray:
    """Read a PNG as grayscale, bilinear-resize to (H,W), rescale to [0,1].

    Returns a (1,H,W) float32 array.
    """
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            h, w = target_size
            if im.size != (w, h):
                im = im.resize((w, h), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, SyntaxError) as e:
        raise DatasetError(f"unreadable image {path}: {e}") from e
    return (arr / 255.0)[None, :, :]


def load_image_bytes(blob: bytes, target_size: tuple[int, int]) -> np.ndarray:
    """As load_image, but from an in-memory encoded image."""
    import io
    try:
        with Image.open(io.BytesIO(blob)) as im:
            im = im.convert("L")
            h, w = target_size
            if im.size != (w, h):
                im = im.resize((w, h), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, SyntaxError) as e:
        raise DatasetError(f"undecodable image upload: {e}") from e
    return (arr / 255.0)[None, :, :]


def _rotate_bilinear(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate (H,W) about the center, bilinear sampling, nearest-edge fill."""
    if angle_deg == 0.0:
        return img.copy()
    h, w = img.shape
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # inverse map: output pixel samples the input at the back-rotated point
    dy, dx = ys - cy, xs - cx
    sy = c * dy + s * dx + cy
    sx = -s * dy + c * dx + cx
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0).astype(img.dtype)
    wx = (sx - x0).astype(img.dtype)
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def augment(image: np.ndarray, config: AugmentationConfig,
            rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip then random rotation in +/- rotation_range_deg.

    Training-split only; expects a (1,H,W) image already scaled to [0,1].
    """
    out = image
    if rng.random() < config.horizontal_flip_prob:
        out = out[:, :, ::-1]
    angle = rng.uniform(-config.rotation_range_deg, config.rotation_range_deg) \
        if config.rotation_range_deg > 0 else 0.0
    return _rotate_bilinear(out[0], angle)[None, :, :]


def compute_class_weights(manifest: DatasetManifest) -> tuple[float, float]:
    """Balanced heuristic: w_c = total / (2 * n_c). Returns (w_normal, w_abnormal)."""
    counts = manifest.counts
    n_normal = sum(v for (t, lab), v in counts.items() if lab == LABEL_NORMAL)
    n_abnormal = sum(v for (t, lab), v in counts.items() if lab == LABEL_ABNORMAL)
    return class_weights_from_counts(n_normal, n_abnormal)


def class_weights_from_counts(n_normal: int, n_abnormal: int) -> tuple[float, float]:
    if n_normal <= 0 or n_abnormal <= 0:
        raise DatasetError(
            f"both classes must be present (normal={n_normal}, abnormal={n_abnormal})")
    total = n_normal + n_abnormal
    return total / (2.0 * n_normal), total / (2.0 * n_abnormal)


@dataclass
class Batch:
    images: np.ndarray          # (B,1,H,W) float32 in [0,1]
    labels: np.ndarray          # (B,) int, 1=normal 0=abnormal
    weights: np.ndarray         # (B,) float32 per-sample class weight
    study_ids: list[str]
    paths: list[str]


def batch_iterator(manifest: DatasetManifest, *, batch_size: int = 32,
                   shuffle: bool = False, seed: int = 0, epoch: int = 0,
                   target_size: tuple[int, int] = (64, 64),
                   augment_config: AugmentationConfig | None = None,
                   class_weights: tuple[float, float] | None = None,
                   ) -> Iterator[Batch]:
    """One epoch over every view; last batch may be short.

    Shuffle order is a permutation seeded by (seed, epoch). Views carry
    their study's label and class weight. augment_config enables the
    training-split transforms; omit it for validation/inference.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    views = manifest.views()
    if not views:
        raise DatasetError(f"split {manifest.split!r} is empty")
    order = np.arange(len(views))
    if shuffle:
        order = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, epoch]).permutation(order)
    if class_weights is None:
        w_normal = w_abnormal = 1.0
    else:
        w_normal, w_abnormal = class_weights
    aug_rng = None
    if augment_config is not None:
        aug_rng = np.random.default_rng(
            [augment_config.seed & 0xFFFFFFFFFFFFFFFF, 1 + epoch])

    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        images, labels, weights, study_ids, paths = [], [], [], [], []
        for i in idx:
            path, study = views[i]
            img = load_image(path, target_size)
            if aug_rng is not None:
                img = augment(img, augment_config, aug_rng)
            images.append(img)
            labels.append(LABEL_CODE[study.label])
            weights.append(w_normal if study.label == LABEL_NORMAL else w_abnormal)
            study_ids.append(study.study_id)
            paths.append(path)
        yield Batch(np.stack(images).astype(np.float32),
                    np.asarray(labels, dtype=np.int64),
                    np.asarray(weights, dtype=np.float32),
                    study_ids, paths)


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class SyntheticSpec:
    studies_per_type_per_label: int = 2
    views_min: int = 1
    views_max: int = 3
    image_size: tuple[int, int] = (64, 64)
    study_types: tuple[str, ...] = STUDY_TYPES
    valid_fraction: float = 0.0   # 0 -> train split only
    noise: float = 0.06
    bone_width: float = 3.0
    gap_width: float = 4.0


def _render_bone(h: int, w: int, rng: np.random.Generator, abnormal: bool,
                 spec: SyntheticSpec) -> np.ndarray:
    """A bright elongated bar; abnormal adds a transverse gap or angular break."""
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    cy = h / 2 + rng.uniform(-h / 8, h / 8)
    cx = w / 2 + rng.uniform(-w / 8, w / 8)
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    # along-axis and cross-axis coordinates of each pixel
    u = (xs - cx) * c + (ys - cy) * s
    v = -(xs - cx) * s + (ys - cy) * c
    half_len = rng.uniform(0.55, 0.8) * min(h, w) / 2
    width = spec.bone_width * rng.uniform(0.8, 1.3)
    body = np.exp(-(v / width) ** 2) * (np.abs(u) < half_len)
    if abnormal:
        if rng.random() < 0.5:
            # transverse fracture gap
            gap_at = rng.uniform(-0.5, 0.5) * half_len
            gap_w = spec.gap_width * rng.uniform(0.8, 1.4)
            body = body * (np.abs(u - gap_at) > gap_w / 2)
        else:
            # angular break: displace the distal half across the axis
            shift = width * rng.uniform(2.0, 3.5)
            body_far = np.exp(-((v - shift) / width) ** 2) * (np.abs(u) < half_len)
            body = np.where(u < 0, body, body_far)
    img = 0.15 + 0.75 * body + rng.normal(0, spec.noise, size=(h, w))
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_dataset(spec: SyntheticSpec, seed: int, out_root) -> Path:
    """Emit a dataset tree plus manifest.csv; fully determined by seed."""
    out_root = Path(out_root)
    h, w = spec.image_size
    rows = []
    n_valid = int(round(spec.studies_per_type_per_label * spec.valid_fraction))
    patient = 0
    for t_i, study_type in enumerate(spec.study_types):
        for lab_i, label in enumerate((LABEL_NORMAL, LABEL_ABNORMAL)):
            for s_i in range(spec.studies_per_type_per_label):
                split = "valid" if s_i < n_valid else "train"
                patient += 1
                suffix = "negative" if label == LABEL_NORMAL else "positive"
                study_dir = (out_root / split / f"XR_{study_type.upper()}"
                             / f"patient{patient:05d}" / f"study1_{suffix}")
                study_dir.mkdir(parents=True, exist_ok=True)
                srng = np.random.default_rng(
                    [seed & 0xFFFFFFFFFFFFFFFF, t_i, lab_i, s_i])
                n_views = int(srng.integers(spec.views_min, spec.views_max + 1))
                for v_i in range(1, n_views + 1):
                    img = _render_bone(h, w, srng, label == LABEL_ABNORMAL, spec)
                    path = study_dir / f"image{v_i}.png"
                    Image.fromarray(np.round(img * 255).astype(np.uint8), mode="L").save(path)
                    rows.append([str(path), study_type, f"{patient:05d}", "1", label])
    csv_path = out_root / "manifest.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_CSV_HEADER)
        writer.writerows(rows)
    return out_root
