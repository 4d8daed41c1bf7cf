"""Slice preprocessing, on-the-fly augmentation, dataset container format,
and the synthetic chest-CT phantom generator.

The phantom stands in for private clinical data. Each slice holds an
elliptical soft-tissue body with lung fields, a heart region, spine /
sternum / rib bone structures (class 1), and per-vessel calcium blobs
with HU in the clinical calcium range placed in class-specific anatomical
zones, so the lesion class is spatially learnable. Per-slice lesion
probabilities default to the clinical imbalance (LM rarest at 1.3% of
slices, RCA most common at 7.4%), and LM lesions can be as small as 5
pixels.

Dataset directory layout: manifest.tsv (image path, mask path, per-class
pixel counts) plus TNS1 files; images are raw HU (integers stored as f32,
shape 1xHxW), masks are u8 (HxW) with labels {0 background, 1 bone,
2 LM, 3 LAD, 4 LCX, 5 RCA}.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataIOError, LabelError
from .tensor import load_tns, save_tns

HU_LO = -150.0
HU_HI = 230.0
HU_WINDOW = HU_HI - HU_LO  # clinical heart window: width 380, level 40
HU_AIR = -1000.0

NUM_CLASSES = 6
LESION_CLASSES = (2, 3, 4, 5)
CLASS_NAMES = ("background", "bone", "lm", "lad", "lcx", "rca")

MANIFEST_NAME = "manifest.tsv"
MANIFEST_COLUMNS = ("image_path", "mask_path",
                    "n_background", "n_bone", "n_lm", "n_lad", "n_lcx", "n_rca")


@dataclass
class SliceSample:
    """One 2D CT slice: raw HU image (1,H,W) and its 6-class label mask."""

    image: np.ndarray
    mask: np.ndarray
    slice_id: str = ""
    source: str = ""

    def validate(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise DataIOError(f"slice image must be (1,H,W), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise DataIOError(
                f"mask shape {self.mask.shape} does not match image {self.image.shape[1:]}"
            )
        if self.mask.min() < 0 or self.mask.max() >= NUM_CLASSES:
            raise LabelError(
                f"mask values must lie in 0..{NUM_CLASSES - 1}, "
                f"found {int(self.mask.min())}..{int(self.mask.max())}"
            )


def preprocess(sample: SliceSample) -> np.ndarray:
    """Window raw HU to [-150, 230] and scale into [0, 1]; shape (1,H,W)."""
    return hu_normalize(sample.image)


def hu_normalize(hu: np.ndarray) -> np.ndarray:
    clipped = np.clip(hu.astype(np.float32), HU_LO, HU_HI)
    return (clipped - HU_LO) / HU_WINDOW


# -- augmentation -------------------------------------------------------------


@dataclass
class AugmentConfig:
    enabled: bool = True
    prob: float = 0.5                       # applied independently per transform
    rot_degrees: tuple = (5.0, 10.0)        # magnitudes; sign drawn at random
    crop_sides: tuple = (300, 400)
    blur_sigma: tuple = (0.5, 1.0)
    noise_sigma: float = 0.01               # in post-normalization units
    sp_rate: float = 0.002

    def validate(self) -> None:
        if not 0.0 <= self.prob <= 1.0:
            raise ConfigError(f"augment prob must be in [0,1], got {self.prob}")
        if any(d <= 0 for d in self.rot_degrees):
            raise ConfigError("rotation magnitudes must be positive")
        if any(s < 2 for s in self.crop_sides):
            raise ConfigError("crop sides must be >= 2 pixels")
        if self.noise_sigma < 0 or self.sp_rate < 0 or self.sp_rate > 1:
            raise ConfigError("noise parameters out of range")


def _resize_image(img: np.ndarray, out_hw: tuple, order: int) -> np.ndarray:
    """Resample to an exact output size with half-pixel-centered coordinates."""
    h, w = img.shape
    oh, ow = out_hw
    rows = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    cols = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    grid = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(img, grid, order=order, mode="nearest")


def salt_pepper(img: np.ndarray, rng: np.random.Generator, rate: float) -> np.ndarray:
    """Flip pixels to the window extremes, each side at rate/2."""
    u = rng.random(img.shape)
    return np.where(u < rate / 2, HU_HI,
                    np.where(u < rate, HU_LO, img))


def augment(sample: SliceSample, rng: np.random.Generator,
            cfg: AugmentConfig) -> SliceSample:
    """Randomized geometric and noise transforms, deterministic per stream.

    The caller derives `rng` from (seed, sample index, epoch). Images are
    interpolated bilinearly and masks by nearest neighbor, so mask values
    never leave the source label set. Noise touches the image only.
    """
    img = sample.image[0].astype(np.float32)
    mask = sample.mask.astype(np.uint8)
    h, w = img.shape

    if rng.random() < cfg.prob:  # rotation
        mag = float(rng.choice(cfg.rot_degrees))
        angle = mag if rng.random() < 0.5 else -mag
        img = ndimage.rotate(img, angle, reshape=False, order=1,
                             mode="constant", cval=HU_AIR)
        mask = ndimage.rotate(mask, angle, reshape=False, order=0,
                              mode="constant", cval=0)

    if rng.random() < cfg.prob:  # center crop, resized back to native extent
        side = int(rng.choice(cfg.crop_sides))
        if side > min(h, w):
            raise ConfigError(
                f"crop side {side} exceeds image extent {min(h, w)}"
            )
        top = (h - side) // 2
        left = (w - side) // 2
        img_c = img[top:top + side, left:left + side]
        mask_c = mask[top:top + side, left:left + side]
        img = _resize_image(img_c, (h, w), order=1)
        mask = _resize_image(mask_c, (h, w), order=0).astype(np.uint8)

    if rng.random() < cfg.prob:  # Gaussian blur
        sigma = rng.uniform(*cfg.blur_sigma)
        img = ndimage.gaussian_filter(img, sigma)

    if rng.random() < cfg.prob:  # Gaussian noise (sigma given in [0,1] units)
        img = img + rng.normal(0.0, cfg.noise_sigma * HU_WINDOW, img.shape)

    if rng.random() < cfg.prob:  # salt and pepper at the window extremes
        img = salt_pepper(img, rng, cfg.sp_rate)

    return SliceSample(image=img.astype(np.float32)[None],
                       mask=mask.astype(np.uint8),
                       slice_id=sample.slice_id, source=sample.source)


# -- phantom generator ---------------------------------------------------------


@dataclass
class PhantomSpec:
    slices: int = 1000
    size: int = 512
    rng_seed: int = 0
    # per-slice lesion probabilities; LM and RCA defaults match the
    # clinical training-set imbalance, LAD/LCX sit in between
    p_lesion: dict = field(default_factory=lambda: {
        "lm": 0.013, "lad": 0.060, "lcx": 0.045, "rca": 0.074})
    # lesion pixel-count ranges, inclusive
    px_range: dict = field(default_factory=lambda: {
        "lm": (5, 60), "lad": (15, 200), "lcx": (15, 200), "rca": (20, 300)})
    hu_cac: tuple = (130.0, 800.0)
    hu_bone: tuple = (700.0, 1200.0)
    hu_background: float = 40.0

    def validate(self) -> None:
        if self.slices < 1:
            raise ConfigError(f"slices must be >= 1, got {self.slices}")
        if self.size < 16:
            raise ConfigError(f"size must be >= 16, got {self.size}")
        for name in ("lm", "lad", "lcx", "rca"):
            p = self.p_lesion[name]
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"p_{name} must be in [0,1], got {p}")
            lo, hi = self.px_range[name]
            if lo < 1 or hi < lo:
                raise ConfigError(f"px_{name} range ({lo},{hi}) invalid")
        if self.hu_cac[0] >= self.hu_cac[1] or self.hu_bone[0] >= self.hu_bone[1]:
            raise ConfigError("HU ranges must be increasing")


# fixed anatomy in unit coordinates (x right, y down, origin top-left)
_BODY = (0.50, 0.50, 0.45, 0.42)           # cx, cy, rx, ry
_LUNGS = ((0.24, 0.42, 0.12, 0.19), (0.76, 0.42, 0.13, 0.20))
_HEART = (0.44, 0.47, 0.17, 0.15)
_SPINE = (0.50, 0.82, 0.065)
_STERNUM = (0.50, 0.115, 0.095, 0.028)
_RIB_SECTORS = ((-25.0, 25.0), (155.0, 205.0), (45.0, 70.0), (110.0, 135.0))
# vessel-specific lesion zones: LM near image center-left, the others in
# distinct sectors around the heart
_ZONES = {"lm": (0.460, 0.415), "lad": (0.385, 0.315),
          "lcx": (0.345, 0.545), "rca": (0.565, 0.535)}
_ZONE_JITTER = 0.018


def _ellipse(u, v, cx, cy, rx, ry):
    return ((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2 <= 1.0


def phantom_slice(spec: PhantomSpec, index: int) -> SliceSample:
    """Build one phantom slice deterministically from (rng_seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.rng_seed,
                                                       spawn_key=(index,)))
    s = spec.size
    ax = (np.arange(s) + 0.5) / s
    u = ax[None, :]
    v = ax[:, None]

    hu = np.full((s, s), HU_AIR, dtype=np.float64)
    mask = np.zeros((s, s), dtype=np.uint8)

    body = _ellipse(u, v, *_BODY)
    tissue = np.full((s, s), spec.hu_background, dtype=np.float64)
    for _ in range(3):  # smooth low-frequency texture
        bx, by = rng.uniform(0.25, 0.75, 2)
        amp = rng.uniform(-25.0, 25.0)
        sig = rng.uniform(0.10, 0.20)
        tissue += amp * np.exp(-(((u - bx) ** 2) + ((v - by) ** 2)) / (2 * sig ** 2))
    hu[body] = tissue[body]

    for lung in _LUNGS:
        zone = _ellipse(u, v, *lung) & body
        hu[zone] = rng.uniform(-800.0, -700.0)

    heart = _ellipse(u, v, *_HEART) & body
    hu[heart] += 25.0

    bone_lo, bone_hi = spec.hu_bone
    spine = ((u - _SPINE[0]) ** 2 + (v - _SPINE[1]) ** 2) <= _SPINE[2] ** 2
    sternum = _ellipse(u, v, *_STERNUM)
    re = np.sqrt(((u - _BODY[0]) / _BODY[2]) ** 2 + ((v - _BODY[1]) / _BODY[3]) ** 2)
    theta = np.degrees(np.arctan2(v - _BODY[1], u - _BODY[0]))
    ribs = np.zeros((s, s), dtype=bool)
    band = (re >= 0.88) & (re <= 0.96)
    for lo, hi in _RIB_SECTORS:
        sector = ((theta - lo) % 360.0) <= (hi - lo)
        ribs |= band & sector
        mirrored = ((-theta - lo) % 360.0) <= (hi - lo)
        ribs |= band & mirrored
    bone = (spine | sternum | ribs) & body
    hu[bone] = rng.uniform(bone_lo, (bone_lo + bone_hi) / 2) + \
        rng.uniform(0.0, (bone_hi - bone_lo) / 2, (s, s))[bone]
    mask[bone] = 1

    hu[body] += rng.normal(0.0, 4.0, (s, s))[body]

    cac_lo, cac_hi = spec.hu_cac
    for cls, name in zip(LESION_CLASSES, ("lm", "lad", "lcx", "rca")):
        if rng.random() >= spec.p_lesion[name]:
            continue
        lo_px, hi_px = spec.px_range[name]
        target = int(rng.integers(lo_px, hi_px + 1))
        zx, zy = _ZONES[name]
        cx = zx + float(np.clip(rng.normal(0.0, _ZONE_JITTER), -0.035, 0.035))
        cy = zy + float(np.clip(rng.normal(0.0, _ZONE_JITTER), -0.035, 0.035))
        q = rng.uniform(0.45, 1.0)
        ang = rng.uniform(0.0, np.pi)
        a_px = np.sqrt(target / (np.pi * q))
        b_px = q * a_px
        dx = (u - cx) * s
        dy = (v - cy) * s
        xr = dx * np.cos(ang) + dy * np.sin(ang)
        yr = -dx * np.sin(ang) + dy * np.cos(ang)
        metric = (xr / a_px) ** 2 + (yr / b_px) ** 2
        eligible = body & (mask == 0) & (metric <= 9.0)
        flat = np.flatnonzero(eligible)
        if flat.size == 0:
            continue
        order = np.argsort(metric.ravel()[flat], kind="stable")
        chosen = flat[order[:target]]
        base = rng.uniform(cac_lo + 20.0, cac_hi - 60.0)
        values = np.clip(base * (1.0 + rng.uniform(-0.12, 0.12, chosen.size)),
                         cac_lo, cac_hi)
        hu.ravel()[chosen] = values
        mask.ravel()[chosen] = cls

    image = np.rint(hu).astype(np.float32)[None]
    return SliceSample(image=image, mask=mask,
                       slice_id=f"slice_{index:05d}", source="phantom")


def generate_phantom(spec: PhantomSpec, out_dir) -> Path:
    """Write `spec.slices` phantom slices plus the manifest; returns its path."""
    spec.validate()
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"cannot create dataset directory {root}: {e}") from e
    rows = []
    for i in range(spec.slices):
        sample = phantom_slice(spec, i)
        img_rel = os.path.join("images", f"{sample.slice_id}.tns")
        mask_rel = os.path.join("masks", f"{sample.slice_id}.tns")
        save_tns(root / img_rel, sample.image)
        save_tns(root / mask_rel, sample.mask)
        counts = np.bincount(sample.mask.ravel(), minlength=NUM_CLASSES)
        rows.append((img_rel, mask_rel, *counts.tolist()))
    manifest = root / MANIFEST_NAME
    try:
        with open(manifest, "w", encoding="utf-8") as f:
            f.write("\t".join(MANIFEST_COLUMNS) + "\n")
            for row in rows:
                f.write("\t".join(str(x) for x in row) + "\n")
    except OSError as e:
        raise DataIOError(f"cannot write manifest {manifest}: {e}") from e
    return manifest


# -- dataset access -------------------------------------------------------------


class Dataset:
    """Reader over a dataset directory written by `generate_phantom`."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / MANIFEST_NAME
        if not manifest.is_file():
            raise DataIOError(f"no {MANIFEST_NAME} in {self.root}")
        with open(manifest, "r", encoding="utf-8") as f:
            lines = [ln.rstrip("\n") for ln in f if ln.strip()]
        if not lines or lines[0].split("\t") != list(MANIFEST_COLUMNS):
            raise DataIOError(f"{manifest} has an unexpected header")
        self.rows = []
        for ln in lines[1:]:
            parts = ln.split("\t")
            if len(parts) != len(MANIFEST_COLUMNS):
                raise DataIOError(f"{manifest}: malformed row {ln!r}")
            self.rows.append((parts[0], parts[1],
                              np.array([int(x) for x in parts[2:]], dtype=np.int64)))

    def __len__(self) -> int:
        return len(self.rows)

    def sample(self, i: int) -> SliceSample:
        img_rel, mask_rel, _ = self.rows[i]
        image = load_tns(self.root / img_rel)
        mask = load_tns(self.root / mask_rel)
        s = SliceSample(image=image, mask=mask,
                        slice_id=Path(img_rel).stem, source=str(self.root))
        s.validate()
        return s

    def pixel_counts(self) -> np.ndarray:
        """Per-class pixel totals as recorded in the manifest."""
        total = np.zeros(NUM_CLASSES, dtype=np.int64)
        for _, _, counts in self.rows:
            total += counts
        return total
