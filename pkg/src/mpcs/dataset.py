"""Multi-magnification specimen collections: ingestion, synthesis, patching, splits.

On-disk layout (one PNG per magnification per specimen)::

    root/<class_name>/<patient_id>/<specimen_id>/<MF>X/<image>.png

Class ids are assigned in lexicographic order of the class directory names.
The synthetic generator additionally writes ``root/masks/<specimen_id>_<MF>.png``
and ``root/index.json``; a top-level ``masks`` directory is therefore never
treated as a class.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from collections import Counter, defaultdict
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image, ImageFilter

from .errors import (
    EmptyDataset,
    FractionOutOfRange,
    InvalidBalance,
    MissingMagnification,
    PatchTooLarge,
    TooFewPatients,
)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
RESERVED_DIRS = ("masks",)
LABEL_FRACTIONS = (0.05, 0.10, 0.20, 0.40, 0.60, 0.80, 1.00)
SYNTH_CLASSES = ("benign", "malignant")


class MagnificationFactor(IntEnum):
    X40 = 40
    X100 = 100
    X200 = 200
    X400 = 400

    @property
    def dirname(self) -> str:
        return f"{int(self)}X"

    @classmethod
    def parse(cls, value) -> "MagnificationFactor":
        if isinstance(value, str):
            value = value.strip().upper().rstrip("X")
        return cls(int(value))


MAGNIFICATIONS = tuple(MagnificationFactor)


class IngestWarning(UserWarning):
    """A specimen was skipped during ingestion."""


class _LazyImages(Mapping):
    """Read-through image map; nothing is cached so large collections stay on disk."""

    def __init__(self, paths: Mapping[MagnificationFactor, Path]):
        self._paths = dict(paths)

    def __getitem__(self, mf):
        return read_image(self._paths[MagnificationFactor(mf)])

    def __iter__(self):
        return iter(self._paths)

    def __len__(self):
        return len(self._paths)


@dataclass(eq=False)
class MagnifiedSample:
    """One specimen imaged at all four magnification factors."""

    specimen_id: str
    patient_id: str
    label: int
    images: Mapping[MagnificationFactor, np.ndarray]
    source_path: dict[MagnificationFactor, Path | None] = field(default_factory=dict)
    class_name: str | None = None

    def __post_init__(self):
        keys = {MagnificationFactor(k) for k in self.images}
        missing = set(MAGNIFICATIONS) - keys
        if missing or len(self.images) != len(MAGNIFICATIONS):
            raise MissingMagnification(
                f"{self.specimen_id}: need exactly {[int(m) for m in MAGNIFICATIONS]}, "
                f"missing {sorted(int(m) for m in missing)}"
            )
        if int(self.label) < 0:
            raise ValueError(f"{self.specimen_id}: label must be >= 0")

    def image(self, mf) -> np.ndarray:
        return self.images[MagnificationFactor(mf)]


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")


# ----------------------------------------------------------------------------
# ingestion
# ----------------------------------------------------------------------------


def _subdirs(path: Path) -> list[Path]:
    return sorted(p for p in path.iterdir() if p.is_dir() and not p.name.startswith("."))


def ingest_layout(root, *, lazy: bool = False, allow_empty: bool = False) -> list[MagnifiedSample]:
    """Load every complete specimen below ``root``.

    Specimens lacking a magnification, or with an unreadable image, are
    skipped with an :class:`IngestWarning`. Zero surviving specimens raises
    :class:`EmptyDataset` unless ``allow_empty`` is set.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(root)
    class_dirs = [d for d in _subdirs(root) if d.name not in RESERVED_DIRS]
    class_ids = {d.name: i for i, d in enumerate(class_dirs)}
    samples = []
    for class_dir in class_dirs:
        for patient_dir in _subdirs(class_dir):
            for specimen_dir in _subdirs(patient_dir):
                sample = _ingest_specimen(
                    specimen_dir, patient_dir.name, class_ids[class_dir.name], class_dir.name, lazy
                )
                if sample is not None:
                    samples.append(sample)
    if not samples and not allow_empty:
        raise EmptyDataset(f"no complete specimens under {root}")
    samples.sort(key=lambda s: s.specimen_id)
    return samples


def _ingest_specimen(specimen_dir: Path, patient_id, label, class_name, lazy):
    paths = {}
    for mf in MAGNIFICATIONS:
        mf_dir = specimen_dir / mf.dirname
        files = (
            sorted(p for p in mf_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
            if mf_dir.is_dir()
            else []
        )
        if not files:
            warnings.warn(
                f"specimen {specimen_dir.name} lacks {mf.dirname}; skipped", IngestWarning, stacklevel=3
            )
            return None
        if len(files) > 1:
            log.info("%s/%s has %d images, using %s", specimen_dir.name, mf.dirname, len(files), files[0].name)
        paths[mf] = files[0]
    if lazy:
        images = _LazyImages(paths)
    else:
        images = {}
        for mf, path in paths.items():
            try:
                images[mf] = read_image(path)
            except OSError as exc:
                warnings.warn(f"unreadable image {path}: {exc}; specimen skipped", IngestWarning, stacklevel=3)
                return None
    return MagnifiedSample(
        specimen_id=specimen_dir.name,
        patient_id=patient_id,
        label=label,
        images=images,
        source_path=paths,
        class_name=class_name,
    )


# ----------------------------------------------------------------------------
# synthetic generator
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthStyle:
    """Knobs of the class-conditional texture model (canvas pixels)."""

    nucleus_radius: tuple[float, float] = (3.0, 7.0)
    region_radius: tuple[float, float] = (0.14, 0.22)  # fraction of base_size
    malignant_coverage: float = 0.45
    benign_coverage: float = 0.12
    malignant_alpha: float = 0.9
    benign_alpha: float = 0.35
    background_coverage: float = 0.03
    background_alpha: float = 0.3
    stain_jitter: float = 0.5  # per-view, per-channel gain spread
    brightness_jitter: float = 0.5
    contrast_jitter: float = 0.5
    max_blur: float = 0.0  # per-view Gaussian blur radius upper bound (output pixels)
    noise_std: float = 12.0


STROMA = np.array([236.0, 196.0, 214.0])
NUCLEUS = np.array([72.0, 36.0, 118.0])


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _smooth_field(rng: np.random.Generator, size: int, grid: int = 8) -> np.ndarray:
    coarse = rng.standard_normal((grid, grid)).astype(np.float32)
    return np.asarray(Image.fromarray(coarse).resize((size, size), Image.BILINEAR), dtype=np.float64)


def _stamp_nuclei(canvas, mask, rng, centers_xy, radii, alpha, color=NUCLEUS):
    h, w = canvas.shape[:2]
    for (cx, cy), r in zip(centers_xy, radii):
        rx, ry = r * rng.uniform(0.8, 1.25), r * rng.uniform(0.8, 1.25)
        x0, x1 = max(int(cx - rx) - 1, 0), min(int(cx + rx) + 2, w)
        y0, y1 = max(int(cy - ry) - 1, 0), min(int(cy + ry) + 2, h)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        a = alpha * rng.uniform(0.85, 1.0)
        patch = canvas[y0:y1, x0:x1]
        patch[inside] = (1 - a) * patch[inside] + a * color
        if mask is not None:
            mask[y0:y1, x0:x1] |= inside


def _n_nuclei(area: float, coverage: float, radius) -> int:
    mean_area = math.pi * ((radius[0] + radius[1]) / 2) ** 2
    return max(1, int(round(coverage * area / mean_area)))


def crop_geometry(base_size: int, center_xy, mf) -> tuple[int, int, int]:
    """Top-left corner and side of the view for ``mf`` on a ``base_size`` canvas."""
    side = int(round(base_size * 40 / int(mf)))
    x = int(np.clip(round(center_xy[0] - side / 2), 0, base_size - side))
    y = int(np.clip(round(center_xy[1] - side / 2), 0, base_size - side))
    return x, y, side


def render_specimen(label: int, base_size: int, output_size: int, rng: np.random.Generator,
                    style: SynthStyle = SynthStyle()):
    """Render one specimen; returns (views, masks), each keyed by magnification."""
    canvas = np.empty((base_size, base_size, 3), dtype=np.float64)
    canvas[:] = STROMA
    canvas += 10.0 * _smooth_field(rng, base_size)[..., None]
    fibre = _smooth_field(rng, base_size, grid=32)
    canvas[..., 1] -= 8.0 * np.abs(fibre)

    area = float(base_size * base_size)
    n_bg = _n_nuclei(area, style.background_coverage, style.nucleus_radius)
    bg_xy = rng.uniform(0, base_size, size=(n_bg, 2))
    _stamp_nuclei(canvas, None, rng, bg_xy, rng.uniform(*style.nucleus_radius, size=n_bg),
                  style.background_alpha)

    cx, cy = rng.uniform(0.35, 0.65, size=2) * base_size
    radius = rng.uniform(*style.region_radius) * base_size
    coverage, alpha = (
        (style.malignant_coverage, style.malignant_alpha) if label == 1
        else (style.benign_coverage, style.benign_alpha)
    )
    n = _n_nuclei(math.pi * radius**2, coverage, style.nucleus_radius)
    rho = radius * np.sqrt(rng.uniform(0, 1, size=n))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    xy = np.stack([cx + rho * np.cos(theta), cy + rho * np.sin(theta)], axis=1)
    xy[0] = (cx, cy)  # one nucleus at the region center keeps every crop non-empty
    mask = np.zeros((base_size, base_size), dtype=bool)
    _stamp_nuclei(canvas, mask, rng, xy, rng.uniform(*style.nucleus_radius, size=n), alpha)

    canvas_u8 = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    mask_u8 = mask.astype(np.uint8) * 255
    views, masks = {}, {}
    for mf in MAGNIFICATIONS:
        x, y, side = crop_geometry(base_size, (cx, cy), mf)
        crop = Image.fromarray(canvas_u8[y:y + side, x:x + side])
        view_img = crop.resize((output_size, output_size), Image.BILINEAR)
        blur = rng.uniform(0.0, style.max_blur) if style.max_blur > 0 else 0.0
        if blur > 0:
            view_img = view_img.filter(ImageFilter.GaussianBlur(blur))
        view = np.asarray(view_img, dtype=np.float64)
        # acquisition nuisance is drawn per view: stain and exposure differ between captures
        gain = 1.0 + rng.uniform(-style.stain_jitter, style.stain_jitter, size=3)
        gain *= 1.0 + rng.uniform(-style.brightness_jitter, style.brightness_jitter)
        view = view * gain
        c = 1.0 + rng.uniform(-style.contrast_jitter, style.contrast_jitter)
        view = view.mean() + c * (view - view.mean()) + rng.normal(0.0, style.noise_std, size=view.shape)
        views[mf] = np.clip(np.rint(view), 0, 255).astype(np.uint8)
        m = Image.fromarray(mask_u8[y:y + side, x:x + side]).resize((output_size, output_size), Image.BOX)
        masks[mf] = (np.asarray(m) > 0).astype(np.uint8) * 255
    return views, masks


def _assign_patients(n_specimens: int, n_patients: int, class_balance: float):
    n_malignant = min(max(_round_half_up(n_patients * class_balance), 1), n_patients - 1)
    per_patient = [n_specimens // n_patients + (1 if p < n_specimens % n_patients else 0)
                   for p in range(n_patients)]
    # benign patients first, malignant last
    patient_label = [0] * (n_patients - n_malignant) + [1] * n_malignant
    return per_patient, patient_label


def generate_synthetic(
    n_specimens: int,
    n_patients: int,
    class_balance: float = 0.5,
    base_size: int = 640,
    seed: int = 0,
    out_dir=None,
    output_size: int = 64,
    style: SynthStyle = SynthStyle(),
) -> list[MagnifiedSample]:
    """Generate co-registered four-magnification specimens.

    ``class_balance`` is the malignant share of patients; every patient carries
    a single diagnosis. Each specimen is rendered from its own seed stream, so
    the result does not depend on generation order. When ``out_dir`` is given
    the images, masks and ``index.json`` are written in the canonical layout.
    """
    if not 0.0 < class_balance < 1.0:
        raise InvalidBalance(f"class_balance must lie in (0, 1), got {class_balance}")
    if n_patients < 2 or n_specimens < n_patients:
        raise ValueError("need n_specimens >= n_patients >= 2")
    if base_size < 640:
        raise ValueError("base_size must be >= 640")

    per_patient, patient_label = _assign_patients(n_specimens, n_patients, class_balance)
    samples = []
    idx = 0
    for p, (count, label) in enumerate(zip(per_patient, patient_label)):
        patient_id = f"P{p:03d}"
        for _ in range(count):
            specimen_id = f"S{idx:04d}"
            rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
            views, masks = render_specimen(label, base_size, output_size, rng, style)
            paths = {}
            if out_dir is not None:
                out = Path(out_dir)
                sdir = out / SYNTH_CLASSES[label] / patient_id / specimen_id
                for mf in MAGNIFICATIONS:
                    paths[mf] = sdir / mf.dirname / f"{specimen_id}_{mf.dirname}.png"
                    write_png(paths[mf], views[mf])
                    write_png(out / "masks" / f"{specimen_id}_{int(mf)}.png", masks[mf])
            sample = MagnifiedSample(specimen_id, patient_id, label, views, paths, SYNTH_CLASSES[label])
            sample.masks = masks
            samples.append(sample)
            idx += 1

    if out_dir is not None:
        index = {
            "generator": {
                "n_specimens": n_specimens, "n_patients": n_patients, "class_balance": class_balance,
                "base_size": base_size, "output_size": output_size, "seed": seed,
            },
            "classes": list(SYNTH_CLASSES),
            "specimens": [
                {
                    "specimen_id": s.specimen_id, "patient_id": s.patient_id, "label": s.label,
                    "files": {str(int(mf)): str(p.relative_to(out_dir)) for mf, p in s.source_path.items()},
                }
                for s in samples
            ],
        }
        Path(out_dir, "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return samples


# ----------------------------------------------------------------------------
# patches
# ----------------------------------------------------------------------------


@dataclass
class PatchGrid:
    parent_image_id: str
    patch_size: int
    stride: int
    patches: list[tuple[int, int, np.ndarray]]
    grid_shape: tuple[int, int] = (0, 0)

    def __len__(self):
        return len(self.patches)


def patch_grid_shape(h: int, w: int, patch_size: int, stride: int) -> tuple[int, int]:
    return (h - patch_size) // stride + 1, (w - patch_size) // stride + 1


def make_patches(image: np.ndarray, patch_size: int, stride: int, image_id: str = "") -> PatchGrid:
    """Tile ``image`` row-major; ``(row, col)`` are grid indices, origin = index * stride."""
    h, w = image.shape[:2]
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if patch_size > min(h, w) or patch_size < 1:
        raise PatchTooLarge(f"patch {patch_size} does not fit image {h}x{w}")
    rows, cols = patch_grid_shape(h, w, patch_size, stride)
    patches = [
        (r, c, image[r * stride:r * stride + patch_size, c * stride:c * stride + patch_size])
        for r in range(rows)
        for c in range(cols)
    ]
    return PatchGrid(image_id, patch_size, stride, patches, (rows, cols))


# ----------------------------------------------------------------------------
# splits
# ----------------------------------------------------------------------------


@dataclass
class SplitPlan:
    k: int
    fold_of: dict[str, int]
    seed: int
    label_fractions: dict[float, set[str]]
    labels: dict[str, int]
    patients: dict[str, str]

    def specimens_in(self, folds: Iterable[int]) -> list[str]:
        folds = set(folds)
        return sorted(s for s, f in self.fold_of.items() if f in folds)

    def validation_fold(self, test_fold: int) -> int:
        return (test_fold + 1) % self.k

    def train_folds(self, test_fold: int, with_validation: bool = False) -> set[int]:
        if not 0 <= test_fold < self.k:
            raise ValueError(f"fold {test_fold} outside [0, {self.k})")
        folds = set(range(self.k)) - {test_fold}
        if not with_validation:
            folds.discard(self.validation_fold(test_fold))
        return folds

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "folds": dict(sorted(self.fold_of.items())),
            "label_fractions": {f"{f:.2f}": sorted(ids) for f, ids in sorted(self.label_fractions.items())},
            "labels": dict(sorted(self.labels.items())),
            "patients": dict(sorted(self.patients.items())),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SplitPlan":
        return cls(
            k=int(doc["k"]),
            fold_of={s: int(f) for s, f in doc["folds"].items()},
            seed=int(doc["seed"]),
            label_fractions={float(f): set(ids) for f, ids in doc["label_fractions"].items()},
            labels={s: int(v) for s, v in doc.get("labels", {}).items()},
            patients=dict(doc.get("patients", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "SplitPlan":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_folds(samples: list[MagnifiedSample], k: int = 5, seed: int = 0) -> SplitPlan:
    """Stratified, patient-grouped k-fold assignment.

    Patients are stratified by their majority class (ties go to the lower
    class id). Within a class, patients are visited in a seeded order, larger
    patients first, and each goes to the fold holding the fewest specimens of
    that class, then the fewest specimens overall, then the lowest index.
    """
    by_patient: dict[str, list[MagnifiedSample]] = defaultdict(list)
    for s in samples:
        by_patient[s.patient_id].append(s)
    patient_class = {}
    for pid, group in by_patient.items():
        counts = Counter(s.label for s in group)
        patient_class[pid] = min(counts, key=lambda c: (-counts[c], c))
    classes = sorted(set(patient_class.values()))
    for c in classes:
        n = sum(1 for v in patient_class.values() if v == c)
        if n < k:
            raise TooFewPatients(f"class {c} has {n} patients, need >= {k}")

    rng = np.random.default_rng(seed)
    class_count = np.zeros((k, max(classes) + 1), dtype=int)
    total = np.zeros(k, dtype=int)
    fold_of = {}
    for c in classes:
        pids = sorted(p for p, v in patient_class.items() if v == c)
        pids = [pids[i] for i in rng.permutation(len(pids))]
        pids.sort(key=lambda p: -len(by_patient[p]))
        for pid in pids:
            size = len(by_patient[pid])
            f = min(range(k), key=lambda i: (class_count[i, c], total[i], i))
            class_count[f, c] += size
            total[f] += size
            for s in by_patient[pid]:
                fold_of[s.specimen_id] = f

    plan = SplitPlan(
        k=k,
        fold_of=fold_of,
        seed=seed,
        label_fractions={},
        labels={s.specimen_id: int(s.label) for s in samples},
        patients={s.specimen_id: s.patient_id for s in samples},
    )
    every_fold = set(range(k))
    plan.label_fractions = {f: subsample_labels(plan, every_fold, f, seed) for f in LABEL_FRACTIONS}
    return plan


def subsample_labels(plan: SplitPlan, train_folds, fraction: float, seed: int) -> set[str]:
    """Stratified labeled subset of the train folds.

    Each class keeps ``round_half_up(fraction * n_class)`` specimens (at least
    one) taken as a prefix of a permutation seeded by ``(seed, class)``, so
    subsets are nested across increasing fractions.
    """
    if not 0.0 < fraction <= 1.0:
        raise FractionOutOfRange(f"fraction must lie in (0, 1], got {fraction}")
    train_folds = set(train_folds)
    if not train_folds:
        raise ValueError("train_folds is empty")
    ids = plan.specimens_in(train_folds)
    chosen = set()
    for c in sorted({plan.labels[s] for s in ids}):
        members = [s for s in ids if plan.labels[s] == c]
        order = np.random.default_rng(np.random.SeedSequence([seed, c])).permutation(len(members))
        n = min(len(members), max(1, _round_half_up(fraction * len(members))))
        chosen.update(members[i] for i in order[:n])
    return chosen


def iter_images(samples: Iterable[MagnifiedSample], magnifications=MAGNIFICATIONS) -> Iterator:
    """Yield ``(sample, mf, image)`` for every requested magnification."""
    for s in samples:
        for mf in magnifications:
            yield s, MagnificationFactor(mf), s.image(mf)
