"""Dataset manifests, raster loading, augmentation and batching.

A manifest is a JSON-lines file; each record holds ``image_path``,
``mask_path`` and ``split`` (plus an optional ``id``). Relative paths are
resolved against the manifest's directory.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensor_core import Tensor

logger = logging.getLogger(__name__)

MASK_THRESHOLD = 128
FOG_COLOR = (0.9, 0.9, 0.9)


class ManifestError(ValueError):
    pass


class SampleError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRef:
    id: str
    image_path: Path
    mask_path: Path
    split: str
    line: int = 0


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    mask: np.ndarray  # (1, H, W) in {0, 1}
    id: str
    augmentation_log: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise SampleError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ spatially")


def load_manifest(path, split: str | None = None) -> list[SampleRef]:
    """Parse and validate a manifest; every problem is reported with its line number."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    refs: list[SampleRef] = []
    problems: list[str] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"line {lineno}: malformed record ({exc.msg})")
            continue
        if not isinstance(rec, dict):
            problems.append(f"line {lineno}: record is not an object")
            continue
        missing = [k for k in ("image_path", "mask_path", "split") if k not in rec]
        if missing:
            problems.append(f"line {lineno}: missing {', '.join(missing)}")
            continue
        image_path = (root / rec["image_path"]).resolve()
        mask_path = (root / rec["mask_path"]).resolve()
        for p in (image_path, mask_path):
            if not p.is_file():
                problems.append(f"line {lineno}: no such file {p}")
        sid = str(rec.get("id", Path(rec["image_path"]).stem))
        if sid in seen:
            logger.warning("manifest %s: duplicate id %r on lines %d and %d", path, sid, seen[sid], lineno)
        else:
            seen[sid] = lineno
        refs.append(SampleRef(sid, image_path, mask_path, str(rec["split"]), lineno))
    if problems:
        raise ManifestError(f"{path}:\n  " + "\n  ".join(problems))
    if split is not None:
        refs = [r for r in refs if r.split == split]
    return refs


def load_sample(ref: SampleRef, size: tuple[int, int] = (256, 256)) -> Sample:
    """Read an RGB image and grayscale mask, resize both to ``size`` (H, W)."""
    try:
        with Image.open(ref.image_path) as im:
            image = im.convert("RGB")
            image.load()
        with Image.open(ref.mask_path) as im:
            mask = im.convert("L")
            mask.load()
    except (OSError, ValueError) as exc:
        raise SampleError(f"{ref.id}: cannot decode raster: {exc}") from exc
    if image.size != mask.size:
        raise SampleError(f"{ref.id}: image size {image.size} != mask size {mask.size}")
    h, w = size
    if image.size != (w, h):
        image = image.resize((w, h), Image.BILINEAR)
        mask = mask.resize((w, h), Image.NEAREST)
    img = np.asarray(image, dtype=np.float64).transpose(2, 0, 1) / 255.0
    msk = (np.asarray(mask) >= MASK_THRESHOLD).astype(np.float64)[None]
    return Sample(img, msk, ref.id)


# photometric transforms ------------------------------------------------------------
def apply_fog(image: np.ndarray, density: float, color=FOG_COLOR) -> np.ndarray:
    """Uniform fog: (1 - density) * image + density * color."""
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"fog density must lie in [0, 1], got {density}")
    fog = np.asarray(color, dtype=image.dtype).reshape(-1, 1, 1)
    return (1.0 - density) * image + density * fog


def motion_blur_kernel(length: int, angle: float) -> np.ndarray:
    """Normalized line of ``length`` pixels through the centre, ``angle`` degrees from horizontal."""
    if length < 1 or length % 2 == 0:
        raise ValueError(f"motion blur length must be a positive odd integer, got {length}")
    k = np.zeros((length, length))
    c = length // 2
    theta = math.radians(angle)
    dx, dy = math.cos(theta), -math.sin(theta)
    # unit step along the dominant axis gives exactly `length` distinct pixels
    scale = max(abs(dx), abs(dy))
    dx, dy = dx / scale, dy / scale
    for t in range(-c, c + 1):
        k[int(round(c + t * dy)), int(round(c + t * dx))] = 1.0
    return k / k.sum()


def apply_motion_blur(image: np.ndarray, length: int, angle: float) -> np.ndarray:
    kernel = motion_blur_kernel(length, angle)
    if length == 1:
        return image.copy()
    return np.stack([ndimage.convolve(ch, kernel, mode="nearest") for ch in image])


def adjust_brightness(image: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(image * factor, 0.0, 1.0)


# geometric transforms -----------------------------------------------------------------
def rotate(image: np.ndarray, mask: np.ndarray, angle: float) -> tuple[np.ndarray, np.ndarray]:
    """Rotate about the centre; bilinear image, nearest mask, edge replication.

    Multiples of 90 degrees are exact index permutations.
    """
    if angle % 90 == 0:
        k = int(angle // 90) % 4
        return np.rot90(image, k, axes=(1, 2)).copy(), np.rot90(mask, k, axes=(1, 2)).copy()
    img = np.stack([ndimage.rotate(ch, angle, reshape=False, order=1, mode="nearest") for ch in image])
    msk = np.stack([ndimage.rotate(ch, angle, reshape=False, order=0, mode="nearest") for ch in mask])
    return np.clip(img, 0.0, 1.0), msk


@dataclass(frozen=True)
class AugmentConfig:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotation_p: float = 0.3
    rotation_range: float = 15.0
    brightness_p: float = 0.3
    brightness_range: tuple[float, float] = (0.8, 1.2)
    fog_p: float = 0.3
    fog_density: tuple[float, float] = (0.1, 0.5)
    fog_color: tuple[float, float, float] = FOG_COLOR
    blur_p: float = 0.3
    blur_lengths: tuple[int, ...] = (3, 5, 7)
    blur_angle_range: tuple[float, float] = (0.0, 180.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("hflip_p", "vflip_p", "rotation_p", "brightness_p", "fog_p", "blur_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.fog_density
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"fog_density range must lie within [0, 1], got {self.fog_density}")
        if any(n < 1 or n % 2 == 0 for n in self.blur_lengths):
            raise ValueError(f"blur lengths must be positive odd integers, got {self.blur_lengths}")

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentConfig":
        return cls(hflip_p=0, vflip_p=0, rotation_p=0, brightness_p=0, fog_p=0, blur_p=0, seed=seed)


def sample_rng(seed: int, sample_id: str, epoch: int = 0) -> np.random.Generator:
    """Generator determined by (seed, epoch, sample id) alone."""
    return np.random.default_rng([seed, epoch, zlib.crc32(sample_id.encode())])


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator | None = None) -> Sample:
    """Random geometric (image and mask) then photometric (image only) transforms."""
    rng = rng if rng is not None else sample_rng(cfg.seed, sample.id)
    img, msk = sample.image, sample.mask
    log = list(sample.augmentation_log)

    if rng.random() < cfg.hflip_p:
        img, msk = img[:, :, ::-1], msk[:, :, ::-1]
        log.append({"op": "hflip"})
    if rng.random() < cfg.vflip_p:
        img, msk = img[:, ::-1, :], msk[:, ::-1, :]
        log.append({"op": "vflip"})
    if rng.random() < cfg.rotation_p:
        angle = float(rng.uniform(-cfg.rotation_range, cfg.rotation_range))
        img, msk = rotate(img, msk, angle)
        log.append({"op": "rotate", "angle": angle})
    if rng.random() < cfg.brightness_p:
        factor = float(rng.uniform(*cfg.brightness_range))
        img = adjust_brightness(img, factor)
        log.append({"op": "brightness", "factor": factor})
    if rng.random() < cfg.fog_p:
        density = float(rng.uniform(*cfg.fog_density))
        img = apply_fog(img, density, cfg.fog_color)
        log.append({"op": "fog", "density": density})
    if rng.random() < cfg.blur_p:
        length = int(rng.choice(cfg.blur_lengths))
        angle = float(rng.uniform(*cfg.blur_angle_range))
        img = apply_motion_blur(img, length, angle)
        log.append({"op": "motion_blur", "length": length, "angle": angle})

    return Sample(np.ascontiguousarray(img), np.ascontiguousarray(msk), sample.id, log)


def make_batches(
    samples: Sequence[Sample], batch_size: int, shuffle_seed=None, dtype=np.float32
) -> Iterator[tuple[Tensor, Tensor]]:
    """Yield stacked (B, 3, H, W) images and (B, 1, H, W) masks; the last batch may be short.

    ``shuffle_seed`` is anything ``np.random.default_rng`` accepts, e.g. ``[seed, epoch]``;
    ``None`` keeps manifest order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not samples:
        raise ValueError("cannot batch an empty dataset")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        yield (
            Tensor(np.stack([s.image for s in chunk]).astype(dtype)),
            Tensor(np.stack([s.mask for s in chunk]).astype(dtype)),
        )


def synthetic_samples(count: int, size: int = 64, seed: int = 0) -> list[Sample]:
    """Bright elliptical "plumes" over noisy, darker backgrounds."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    out = []
    for i in range(count):
        cy, cx = rng.uniform(0.25 * size, 0.75 * size, 2)
        ry, rx = rng.uniform(size / 8, size * 0.28, 2)
        mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1).astype(np.float64)
        background = rng.uniform(0.0, 0.5, (3, 1, 1)) + 0.1 * rng.standard_normal((3, size, size))
        smoke = 0.85 + 0.05 * rng.standard_normal((3, size, size))
        image = np.clip(np.where(mask[None] > 0, smoke, background), 0.0, 1.0)
        out.append(Sample(image, mask[None], f"synthetic-{i:04d}"))
    return out


def write_png(path, array: np.ndarray) -> None:
    """Save a (3, H, W) or (1, H, W) array in [0, 1] as an 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(array) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def write_dataset(root, samples: Sequence[Sample], split: str = "train", manifest_name: str = "manifest.jsonl") -> Path:
    """Write samples as PNG pairs plus a manifest; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    manifest = root / manifest_name
    mode = "a" if manifest.exists() else "w"
    with open(manifest, mode) as fh:
        for s in samples:
            write_png(root / "images" / f"{s.id}.png", s.image)
            write_png(root / "masks" / f"{s.id}.png", s.mask)
            fh.write(
                json.dumps({"id": s.id, "image_path": f"images/{s.id}.png", "mask_path": f"masks/{s.id}.png", "split": split})
                + "\n"
            )
    return manifest


__all__ = [
    "AugmentConfig",
    "ManifestError",
    "Sample",
    "SampleError",
    "SampleRef",
    "adjust_brightness",
    "apply_fog",
    "apply_motion_blur",
    "augment",
    "load_manifest",
    "load_sample",
    "make_batches",
    "motion_blur_kernel",
    "rotate",
    "sample_rng",
    "synthetic_samples",
    "write_dataset",
    "write_png",
]
