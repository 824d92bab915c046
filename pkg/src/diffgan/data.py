"""Image folders, augmentation, class balancing and procedural toy datasets."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from diffgan import tensor as T
from diffgan.errors import ArgumentError, ConfigError, DatasetError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
CACHE_VERSION = 1


@dataclass
class ImageDataset:
    """Images ``[n, C, R, R]`` in [-1, 1] with optional per-image class labels.

    Point clouds are stored the same way with ``R = 1`` and one channel per
    coordinate (``kind="points"``).
    """

    images: np.ndarray
    labels: list[str] | None = None
    provenance: str = ""
    kind: str = "images"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"dataset images must be [n, C, R, R], got {self.images.shape}")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise DatasetError("one label per image required")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def resolution(self) -> int:
        return self.images.shape[2]

    @property
    def classes(self) -> list[str]:
        return sorted(set(self.labels)) if self.labels else []

    def histogram(self) -> dict[str, int]:
        if not self.labels:
            return {"<all>": len(self)}
        return {c: self.labels.count(c) for c in self.classes}


# ---------------------------------------------------------------- resizing / loading

def _resize_axis(x: np.ndarray, out: int, axis: int) -> np.ndarray:
    n_in = x.shape[axis]
    if n_in == out:
        return x
    src = (np.arange(out) + 0.5) * (n_in / out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    shape = [1] * x.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    return np.take(x, lo, axis=axis) * (1 - frac) + np.take(x, hi, axis=axis) * frac


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of ``[C, H, W]`` to ``[C, size, size]`` with half-pixel centers."""
    return _resize_axis(_resize_axis(img, size, 1), size, 2)


def center_crop_square(img: np.ndarray) -> np.ndarray:
    _, h, w = img.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[:, top:top + s, left:left + s]


def load_image_folder(path, resolution: int, channels: int = 3) -> ImageDataset:
    """Load ``root/<class>/<image>.{png,jpg}`` into a dataset in [-1, 1].

    Files are visited in lexicographic order. Unreadable files are skipped
    with a warning; the skip count is kept in ``dataset.meta["skipped"]``.
    """
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    mode = "L" if channels == 1 else "RGB"
    images, labels, skipped = [], [], 0
    for cls_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(cls_dir.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert(mode), dtype=np.float64)
            except (OSError, ValueError) as exc:
                log.warning("skipping unreadable image %s: %s", f, exc)
                skipped += 1
                continue
            arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            arr = resize_bilinear(center_crop_square(arr), resolution)
            images.append(arr / 127.5 - 1.0)
            labels.append(cls_dir.name)
    if not images:
        raise DatasetError(f"no readable images under {root}")
    data = np.clip(np.stack(images), -1, 1).astype(np.float32)
    return ImageDataset(data, labels, provenance=str(root), meta={"skipped": skipped})


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentConfig:
    crop: tuple[float, float] = (0.8, 1.0)
    hflip: float = 0.5
    vflip: float = 0.5
    hue_deg: float = 30.0
    brightness: float = 0.2
    contrast: tuple[float, float] = (0.8, 1.25)

    def __post_init__(self):
        lo, hi = self.crop
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop fractions must satisfy 0 < lo <= hi <= 1, got {self.crop}")
        for name in ("hflip", "vflip"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} probability outside [0, 1]")
        if not 0 < self.contrast[0] <= self.contrast[1]:
            raise ConfigError(f"bad contrast range {self.contrast}")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(crop=(1.0, 1.0), hflip=0.0, vflip=0.0, hue_deg=0.0, brightness=0.0,
                   contrast=(1.0, 1.0))


def hue_rotation_matrix(deg: float) -> np.ndarray:
    """RGB rotation about the gray axis by ``deg`` degrees."""
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    a = (1 - c) / 3.0
    b = math.sqrt(1 / 3.0) * s
    return np.array([[c + a, a - b, a + b],
                     [a + b, c + a, a - b],
                     [a - b, a + b, c + a]])


def augment(image: np.ndarray, cfg: AugmentConfig, rng: T.Rng) -> np.ndarray:
    """Random crop-and-resize, flips and color jitter of one ``[C, R, R]`` image."""
    x = np.asarray(image, dtype=np.float64)
    c, r, _ = x.shape
    frac = rng.uniform(None, *cfg.crop)
    size = max(1, int(round(frac * r)))
    if size < r:
        top, left = rng.integers(0, r - size + 1, 2)
        x = resize_bilinear(x[:, top:top + size, left:left + size], r)
    if rng.uniform() < cfg.hflip:
        x = x[:, :, ::-1]
    if rng.uniform() < cfg.vflip:
        x = x[:, ::-1, :]
    hue = rng.uniform(None, -cfg.hue_deg, cfg.hue_deg) if cfg.hue_deg else 0.0
    if hue and c == 3:
        x = np.einsum("ij,jhw->ihw", hue_rotation_matrix(hue), x)
    bright = rng.uniform(None, -cfg.brightness, cfg.brightness) if cfg.brightness else 0.0
    if bright:
        x = x + bright
    lo, hi = cfg.contrast
    contrast = math.exp(rng.uniform(None, math.log(lo), math.log(hi))) if lo != hi else lo
    if contrast != 1.0:
        mean = x.mean()
        x = (x - mean) * contrast + mean
    return np.clip(x, -1.0, 1.0).astype(np.asarray(image).dtype)


def balance_classes(dataset: ImageDataset, per_class_target: int, cfg: AugmentConfig,
                    rng: T.Rng, truncate: bool = False) -> ImageDataset:
    """Bring every class to exactly ``per_class_target`` images.

    Originals come first, then augmented copies of originals picked round
    robin, each with its own RNG substream. Classes above the target raise
    unless ``truncate`` keeps their first ``per_class_target`` images.
    """
    if not dataset.labels:
        raise DatasetError("balance_classes needs class labels")
    classes = list(dataset.meta.get("classes", dataset.classes))
    labels = np.asarray(dataset.labels)
    out_imgs, out_labels = [], []
    for ci, cls in enumerate(classes):
        idx = np.flatnonzero(labels == cls)
        if len(idx) == 0:
            raise DatasetError(f"class {cls!r} is empty")
        if len(idx) > per_class_target:
            if not truncate:
                raise DatasetError(
                    f"class {cls!r} has {len(idx)} images, above target {per_class_target}")
            idx = idx[:per_class_target]
        originals = dataset.images[idx]
        out_imgs.append(originals)
        extra = [augment(originals[j % len(idx)], cfg, rng.child("balance", ci, j))
                 for j in range(per_class_target - len(idx))]
        if extra:
            out_imgs.append(np.stack(extra))
        out_labels += [cls] * per_class_target
    return ImageDataset(np.concatenate(out_imgs).astype(np.float32), out_labels,
                        provenance=dataset.provenance, meta={**dataset.meta, "classes": classes})


# ---------------------------------------------------------------- toy data

def grid_centers(grid_side: int, spacing: float) -> np.ndarray:
    offs = (np.arange(grid_side) - (grid_side - 1) / 2.0) * spacing
    gx, gy = np.meshgrid(offs, offs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def synth_gaussian_grid(n: int, grid_side: int = 5, spacing: float = 2.0, std: float = 0.05,
                        rng: T.Rng | None = None) -> ImageDataset:
    """Equal-weight mixture of ``grid_side^2`` isotropic Gaussians on a centered grid."""
    if n < grid_side ** 2:
        raise ArgumentError(f"n={n} below the number of modes {grid_side ** 2}")
    rng = rng or T.Rng(0)
    centers = grid_centers(grid_side, spacing)
    which = rng.integers(0, len(centers), n)
    pts = centers[which] + std * rng.normal((n, 2))
    meta = {"grid_side": grid_side, "spacing": spacing, "std": std,
            "centers": centers.tolist()}
    return ImageDataset(pts.reshape(n, 2, 1, 1).astype(np.float32), None,
                        provenance="toy:gaussian-grid", kind="points", meta=meta)


def _motif_mask(r: int, rng: T.Rng) -> np.ndarray:
    yy, xx = np.mgrid[0:r, 0:r] + 0.5
    mask = np.zeros((r, r), dtype=bool)
    kinds = [k for k in ("dots", "bands", "lattice") if rng.uniform() < 0.6] or ["dots"]
    for kind in kinds:
        if kind == "dots":
            for _ in range(int(rng.integers(1, 4))):
                cy, cx = rng.uniform(2, 0.0, r / 2.0)
                rad = rng.uniform(None, 0.06, 0.16) * r
                mask |= (yy - cy) ** 2 + (xx - cx) ** 2 < rad ** 2
        elif kind == "bands":
            period = rng.uniform(None, 0.25, 0.5) * r
            width = rng.uniform(None, 0.2, 0.45) * period
            phase = rng.uniform(None, 0.0, period)
            mask |= np.mod(xx + yy + phase, period) < width
        else:
            period = int(rng.integers(max(3, r // 8), max(4, r // 3)))
            width = max(1, int(round(period * rng.uniform(None, 0.15, 0.35))))
            mask |= (np.mod(np.floor(xx), period) < width) | (np.mod(np.floor(yy), period) < width)
    return mask | np.rot90(mask, 1) | np.rot90(mask, 2) | np.rot90(mask, 3)


def synth_motif(n: int, resolution: int = 28, rng: T.Rng | None = None,
                channels: int = 1) -> ImageDataset:
    """Procedural two-tone tiles with exact 4-fold rotational symmetry."""
    if resolution not in (28, 32, 64):
        raise ArgumentError(f"synth_motif resolution must be 28, 32 or 64, got {resolution}")
    rng = rng or T.Rng(0)
    imgs = np.empty((n, channels, resolution, resolution), dtype=np.float32)
    for i in range(n):
        r = rng.child("motif", i)
        mask = _motif_mask(resolution, r)
        bg = r.uniform(channels, -1.0, 0.0)
        fg = r.uniform(channels, 0.2, 1.0)
        imgs[i] = np.where(mask[None], fg[:, None, None], bg[:, None, None])
    return ImageDataset(imgs, None, provenance="toy:motif")


# ---------------------------------------------------------------- cache files

def _cache_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_suffix(".bin"), p.with_suffix(".json")


def save_dataset(ds: ImageDataset, path) -> Path:
    """Write ``<path>.bin`` (little-endian float32) and ``<path>.json``."""
    blob, manifest = _cache_paths(path)
    blob.parent.mkdir(parents=True, exist_ok=True)
    blob.write_bytes(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    classes = list(ds.meta.get("classes", ds.classes))
    doc = {
        "format_version": CACHE_VERSION,
        "n": len(ds),
        "channels": ds.channels,
        "resolution": ds.resolution,
        "classes": classes,
        "labels": [classes.index(l) for l in ds.labels] if ds.labels else None,
        "kind": ds.kind,
        "provenance": ds.provenance,
        "meta": {k: v for k, v in ds.meta.items() if k != "classes"},
    }
    manifest.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return manifest


def load_dataset(path) -> ImageDataset:
    blob, manifest = _cache_paths(path)
    if not manifest.is_file() or not blob.is_file():
        raise DatasetError(f"dataset cache not found: {manifest}")
    doc = json.loads(manifest.read_text())
    n, c, r = doc["n"], doc["channels"], doc["resolution"]
    raw = blob.read_bytes()
    if len(raw) != 4 * n * c * r * r:
        raise DatasetError(f"dataset blob {blob} has {len(raw)} bytes, expected {4 * n * c * r * r}")
    images = np.frombuffer(raw, dtype="<f4").reshape(n, c, r, r).astype(np.float32)
    labels = [doc["classes"][i] for i in doc["labels"]] if doc.get("labels") else None
    meta = dict(doc.get("meta", {}))
    if doc["classes"]:
        meta["classes"] = doc["classes"]
    return ImageDataset(images, labels, doc.get("provenance", ""), doc.get("kind", "images"), meta)
