"""Shared-parameter stochastic transforms for view pairs, plus the fine-tuning policy.

Every transform is a pure function of ``(AugmentationParams, image)``: the
pair path simply runs the single-view path twice with the same parameters.
Resizing is PIL bilinear (antialiased when downsampling) everywhere.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
from PIL import Image, ImageEnhance

from .errors import DegenerateImage
from .sampler import ViewPair

ROTATIONS = (0, 90, 180, 270)
MAX_HUE = 0.1


@dataclass(frozen=True)
class AugmentationParams:
    output_size: int
    hflip: bool = False
    vflip: bool = False
    rotation_deg: int = 0
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue_shift: float = 0.0
    crop_box: tuple[int, int, int, int] | None = None  # x, y, w, h
    shear_deg: float = 0.0
    translate: tuple[float, float] = (0.0, 0.0)  # fraction of output size

    def __post_init__(self):
        if self.rotation_deg not in ROTATIONS:
            raise ValueError(f"rotation must be one of {ROTATIONS}")
        if abs(self.hue_shift) > MAX_HUE:
            raise ValueError(f"hue shift {self.hue_shift} outside [-{MAX_HUE}, {MAX_HUE}]")

    @property
    def is_identity(self) -> bool:
        return self == AugmentationParams(self.output_size)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TransformPolicy:
    """Jitter ranges for one training stage.

    Colour magnitudes follow the usual ``factor in [1 - m, 1 + m]`` and
    ``hue in [-m, m]`` convention; zero disables the jitter.
    """

    name: str = "pretrain"
    output_size: int = 64
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotate: bool = True
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    crop_scale: tuple[float, float] | None = None
    max_shear_deg: float = 0.0
    max_translate: float = 0.0
    shared: bool = True  # one parameter draw for both views of a pair

    @classmethod
    def pretrain(cls, output_size=64, **overrides) -> "TransformPolicy":
        return cls(name="pretrain", output_size=output_size, **overrides)

    @classmethod
    def finetune(cls, output_size=64, **overrides) -> "TransformPolicy":
        base = dict(crop_scale=(0.7, 1.0), max_shear_deg=5.0, max_translate=0.05)
        base.update(overrides)
        return cls(name="finetune", output_size=output_size, **base)

    @classmethod
    def eval(cls, output_size=64) -> "TransformPolicy":
        return cls(name="eval", output_size=output_size, hflip_p=0.0, vflip_p=0.0, rotate=False,
                   brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0)

    @classmethod
    def from_config(cls, name: str, cfg: dict | None, output_size: int) -> "TransformPolicy":
        factory = {"pretrain": cls.pretrain, "finetune": cls.finetune}[name]
        cfg = dict(cfg or {})
        for key in ("crop_scale",):
            if cfg.get(key) is not None:
                cfg[key] = tuple(cfg[key])
        return factory(output_size=output_size, **cfg)

    def to_dict(self) -> dict:
        return asdict(self)


def _factor(rng: np.random.Generator, magnitude: float) -> float:
    if magnitude <= 0:
        return 1.0
    return float(rng.uniform(max(0.0, 1.0 - magnitude), 1.0 + magnitude))


def sample_params(policy: TransformPolicy, rng: np.random.Generator, source_size=None) -> AugmentationParams:
    """One concrete draw from ``policy``.

    The number of random draws is fixed per policy, so downstream streams do
    not shift when a jitter range is zero. ``source_size`` (h, w) bounds the
    random crop and defaults to the output size.
    """
    hflip = bool(rng.random() < policy.hflip_p)
    vflip = bool(rng.random() < policy.vflip_p)
    rot_idx = int(rng.integers(len(ROTATIONS)))
    rotation = ROTATIONS[rot_idx] if policy.rotate else 0
    brightness = _factor(rng, policy.brightness)
    contrast = _factor(rng, policy.contrast)
    saturation = _factor(rng, policy.saturation)
    hue_mag = min(policy.hue, MAX_HUE)
    hue = float(rng.uniform(-hue_mag, hue_mag)) if hue_mag > 0 else 0.0

    crop_box = None
    if policy.crop_scale is not None:
        h, w = source_size or (policy.output_size, policy.output_size)
        scale = rng.uniform(*policy.crop_scale)
        side = max(1, int(round(np.sqrt(scale) * min(h, w))))
        x = int(rng.integers(0, w - side + 1))
        y = int(rng.integers(0, h - side + 1))
        crop_box = (x, y, side, side)
    shear = float(rng.uniform(-policy.max_shear_deg, policy.max_shear_deg)) if policy.max_shear_deg else 0.0
    if policy.max_translate:
        tx, ty = (float(v) for v in rng.uniform(-policy.max_translate, policy.max_translate, size=2))
    else:
        tx, ty = 0.0, 0.0
    return AugmentationParams(
        output_size=policy.output_size,
        hflip=hflip,
        vflip=vflip,
        rotation_deg=rotation,
        brightness=brightness,
        contrast=contrast,
        saturation=saturation,
        hue_shift=hue,
        crop_box=crop_box,
        shear_deg=shear,
        translate=(tx, ty),
    )


def resize(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[0] == size and image.shape[1] == size:
        return image
    return np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR))


def _adjust_hue(img: Image.Image, shift: float) -> Image.Image:
    h, s, v = img.convert("HSV").split()
    h_arr = np.asarray(h, dtype=np.uint8)
    h_arr = (h_arr.astype(np.int16) + int(round(shift * 255))) % 256
    h = Image.fromarray(h_arr.astype(np.uint8))
    return Image.merge("HSV", (h, s, v)).convert("RGB")


def _affine(img: Image.Image, shear_deg: float, translate) -> Image.Image:
    size = img.size[0]
    c = (size - 1) / 2.0
    tx, ty = translate[0] * size, translate[1] * size
    sh = np.tan(np.deg2rad(shear_deg))
    # inverse map output -> input for a horizontal shear about the centre, then translation
    a, b = 1.0, -sh
    coeffs = (a, b, c - a * c - b * c - tx, 0.0, 1.0, -ty)
    return img.transform(img.size, Image.AFFINE, coeffs, resample=Image.BILINEAR)


def transform_view(params: AugmentationParams, image: np.ndarray) -> np.ndarray:
    """Apply ``params`` to one HxWx3 uint8 image; returns a new array."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got {image.shape}")
    if params.crop_box is not None:
        x, y, w, h = params.crop_box
        if x < 0 or y < 0 or x + w > image.shape[1] or y + h > image.shape[0]:
            raise ValueError(f"crop box {params.crop_box} outside image {image.shape[:2]}")
        image = image[y:y + h, x:x + w]
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise DegenerateImage("zero-area image after crop")
    out = resize(np.ascontiguousarray(image), params.output_size)
    if params.shear_deg or any(params.translate):
        out = np.asarray(_affine(Image.fromarray(out), params.shear_deg, params.translate))
    if params.hflip:
        out = out[:, ::-1]
    if params.vflip:
        out = out[::-1]
    if params.rotation_deg:
        out = np.rot90(out, k=params.rotation_deg // 90)
    if (params.brightness, params.contrast, params.saturation, params.hue_shift) != (1.0, 1.0, 1.0, 0.0):
        img = Image.fromarray(np.ascontiguousarray(out))
        if params.brightness != 1.0:
            img = ImageEnhance.Brightness(img).enhance(params.brightness)
        if params.contrast != 1.0:
            img = ImageEnhance.Contrast(img).enhance(params.contrast)
        if params.saturation != 1.0:
            img = ImageEnhance.Color(img).enhance(params.saturation)
        if params.hue_shift != 0.0:
            img = _adjust_hue(img, params.hue_shift)
        out = np.asarray(img)
    return np.array(out, dtype=np.uint8, copy=True)


def apply_uniform(params: AugmentationParams, pair: ViewPair) -> ViewPair:
    """Transform both views of ``pair`` with the same parameter draw."""
    return apply_pair(params, params, pair)


def apply_pair(params1: AugmentationParams, params2: AugmentationParams, pair: ViewPair) -> ViewPair:
    return ViewPair(
        pair.specimen_id,
        pair.mf1,
        pair.mf2,
        transform_view(params1, pair.view1),
        transform_view(params2, pair.view2),
    )


def identity_params(output_size: int) -> AugmentationParams:
    return AugmentationParams(output_size)


def with_output_size(params: AugmentationParams, size: int) -> AugmentationParams:
    return replace(params, output_size=size)
