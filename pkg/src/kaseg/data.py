"""Synthetic shape-segmentation data: generation, on-disk I/O and batching.

Each image is a noisy colored background with a few filled shapes.  Class 0
is background, then circle, rectangle and triangle.  Shape colors are random,
so the class of a region is defined by its geometry, not its color.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import netpbm
from .functional import IGNORE_LABEL, interp_matrix

SHAPE_KINDS = ("circle", "rectangle", "triangle")
MANIFEST_MAGIC = "# kaseg-dataset v1"

# stream ids so the train/val/augmentation generators never share a sequence
_TRAIN, _VAL = 1, 2


class DataError(ValueError):
    """A dataset file is missing, corrupt or inconsistent."""


@dataclass(frozen=True)
class DatasetSpec:
    num_train: int = 200
    num_val: int = 50
    image_size: int = 64
    num_classes: int = 4
    min_shapes: int = 1
    max_shapes: int = 3
    noise: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPE_KINDS) + 1:
            raise ValueError(
                f"num_classes must be in [2, {len(SHAPE_KINDS) + 1}], got {self.num_classes}"
            )
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if self.min_shapes < 0 or self.max_shapes < self.min_shapes:
            raise ValueError("need 0 <= min_shapes <= max_shapes")
        if self.num_train < 0 or self.num_val < 0:
            raise ValueError("split sizes must be non-negative")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


# ---------------------------------------------------------------------------
# rasterization


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5  # pixel centers
    r = rng.uniform(0.14, 0.3) * size
    cy, cx = rng.uniform(r * 0.5, size - r * 0.5, size=2)
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rectangle":
        hy, hx = rng.uniform(0.55, 1.0, size=2) * r
        return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    theta = rng.uniform(0, 2 * math.pi)
    angles = theta + np.array([0.0, 2.0, 4.0]) * math.pi / 3
    vy, vx = cy + 1.2 * r * np.sin(angles), cx + 1.2 * r * np.cos(angles)
    inside = np.ones((size, size), dtype=bool)
    for i in range(3):
        j = (i + 1) % 3
        ey, ex = vy[j] - vy[i], vx[j] - vx[i]
        side = ex * (yy - vy[i]) - ey * (xx - vx[i])
        ref = ex * (cy - vy[i]) - ey * (cx - vx[i])  # the center is inside
        inside &= side * np.sign(ref) >= 0
    return inside


def _contrasting_color(rng: np.random.Generator, against: np.ndarray) -> np.ndarray:
    color = rng.uniform(0, 1, size=3)
    for _ in range(8):
        if np.abs(color - against).max() >= 0.3:
            break
        color = rng.uniform(0, 1, size=3)
    return color


def render_sample(spec: DatasetSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One ``(H, W, 3)`` uint8 image and its ``(H, W)`` uint8 mask."""
    s = spec.image_size
    base = rng.uniform(0, 1, size=3)
    ramp = rng.uniform(-0.15, 0.15, size=(2, 3))
    yy, xx = np.mgrid[0:s, 0:s] / s - 0.5
    image = base + yy[..., None] * ramp[0] + xx[..., None] * ramp[1]
    mask = np.zeros((s, s), dtype=np.uint8)
    for _ in range(int(rng.integers(spec.min_shapes, spec.max_shapes + 1))):
        cls = int(rng.integers(1, spec.num_classes))
        region = _shape_mask(SHAPE_KINDS[cls - 1], s, rng)
        image[region] = _contrasting_color(rng, base)
        mask[region] = cls
    image = image + spec.noise * rng.standard_normal(image.shape)
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    return pixels, mask


# ---------------------------------------------------------------------------
# on-disk dataset


def _sample_rng(seed: int, split: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, split, index])


def generate(spec: DatasetSpec, out_dir: str | os.PathLike) -> dict[str, Path]:
    """Write image/mask pairs for both splits; return the manifest paths."""
    out = Path(out_dir)
    manifests = {}
    for split, stream, count in (("train", _TRAIN, spec.num_train), ("val", _VAL, spec.num_val)):
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        lines = [MANIFEST_MAGIC, "# spec: " + json.dumps(asdict(spec), sort_keys=True)]
        for i in range(count):
            image, mask = render_sample(spec, _sample_rng(spec.seed, stream, i))
            img_path = split_dir / f"{i:05d}.ppm"
            mask_path = split_dir / f"{i:05d}.pgm"
            netpbm.write(img_path, image)
            netpbm.write(mask_path, mask)
            lines.append(f"{split}/{img_path.name}\t{split}/{mask_path.name}")
        manifest = out / f"{split}.txt"
        manifest.write_text("\n".join(lines) + "\n")
        manifests[split] = manifest
    return manifests


def read_manifest(path: str | os.PathLike) -> tuple[DatasetSpec, list[tuple[Path, Path]]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != MANIFEST_MAGIC:
        raise DataError(f"{path}: not a dataset manifest (missing '{MANIFEST_MAGIC}')")
    spec = None
    pairs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("# spec:"):
            try:
                raw = json.loads(line[len("# spec:"):])
                known = {f.name for f in fields(DatasetSpec)}
                spec = DatasetSpec(**{k: v for k, v in raw.items() if k in known})
            except (ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad spec header ({exc})") from exc
            continue
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'image<TAB>mask', got {line!r}")
        pairs.append((path.parent / parts[0], path.parent / parts[1]))
    if spec is None:
        raise DataError(f"{path}: missing '# spec:' header")
    return spec, pairs


@dataclass
class SegDataset:
    """In-memory split: images ``(N, 3, H, W)`` float32 in [0, 1], masks ``(N, H, W)`` uint8."""

    images: np.ndarray
    masks: np.ndarray
    num_classes: int
    paths: list[tuple[Path, Path]]

    def __len__(self) -> int:
        return len(self.images)


def load(manifest: str | os.PathLike, num_classes: Optional[int] = None) -> SegDataset:
    spec, pairs = read_manifest(manifest)
    k = spec.num_classes if num_classes is None else num_classes
    if not pairs:
        raise DataError(f"{manifest}: manifest lists no samples")
    images, masks = [], []
    for img_path, mask_path in pairs:
        try:
            img = netpbm.read(img_path)
            mask = netpbm.read(mask_path)
        except netpbm.ImageFormatError as exc:
            raise DataError(str(exc)) from exc
        if img.ndim != 3 or mask.ndim != 2:
            raise DataError(f"{img_path}: expected an RGB image with a single-channel mask")
        if img.shape[:2] != mask.shape:
            raise DataError(f"{mask_path}: mask {mask.shape} does not match image {img.shape[:2]}")
        bad = (mask >= k) & (mask != IGNORE_LABEL)
        if bad.any():
            raise DataError(
                f"{mask_path}: mask value {int(mask[bad][0])} outside [0, {k}) and not {IGNORE_LABEL}"
            )
        images.append(img)
        masks.append(mask)
    if len({m.shape for m in masks}) != 1:
        raise DataError(f"{manifest}: samples have differing sizes")
    stacked = np.stack(images).transpose(0, 3, 1, 2).astype(np.float32) / np.float32(255)
    return SegDataset(stacked, np.stack(masks), k, pairs)


# ---------------------------------------------------------------------------
# augmentation


def hflip(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return image[..., ::-1].copy(), mask[..., ::-1].copy()


def _nearest_index(in_size: int, out_size: int) -> np.ndarray:
    src = np.floor((np.arange(out_size) + 0.5) * in_size / out_size).astype(np.int64)
    return np.minimum(src, in_size - 1)


def rescale(image: np.ndarray, mask: np.ndarray, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Resize ``(3, H, W)`` image bilinearly and ``(H, W)`` mask by nearest neighbor."""
    h, w = mask.shape
    oh, ow = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    ah, aw = interp_matrix(h, oh), interp_matrix(w, ow)
    out_img = (ah @ image @ aw.T).astype(np.float32)
    out_mask = mask[_nearest_index(h, oh)][:, _nearest_index(w, ow)]
    return out_img, out_mask


def crop_or_pad(image: np.ndarray, mask: np.ndarray, size: tuple[int, int],
                offset: Optional[tuple[int, int]] = None) -> tuple[np.ndarray, np.ndarray]:
    """Bring a sample to ``size``: crop when larger, pad when smaller.

    ``offset`` is the (row, col) of the crop window, or of the source inside
    the padded canvas; ``None`` centers it.  Padding is 0 for the image and
    the ignore label for the mask.
    """
    th, tw = size
    h, w = mask.shape
    if offset is None:
        offset = (abs(h - th) // 2, abs(w - tw) // 2)
    oy, ox = offset
    out_img = np.zeros((image.shape[0], th, tw), dtype=np.float32)
    out_mask = np.full((th, tw), IGNORE_LABEL, dtype=mask.dtype)
    # per axis: source slice and destination slice
    def span(src_len, dst_len, off):
        if src_len >= dst_len:
            return slice(off, off + dst_len), slice(0, dst_len)
        return slice(0, src_len), slice(off, off + src_len)

    sy, dy = span(h, th, oy)
    sx, dx = span(w, tw, ox)
    out_img[:, dy, dx] = image[:, sy, sx]
    out_mask[dy, dx] = mask[sy, sx]
    return out_img, out_mask


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            scale_range: tuple[float, float] = (0.75, 1.25),
            flip_prob: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Random horizontal flip, then scale jitter with a random crop/pad."""
    h, w = mask.shape
    if rng.random() < flip_prob:
        image, mask = hflip(image, mask)
    img, msk = rescale(image, mask, rng.uniform(*scale_range))
    nh, nw = msk.shape
    oy = int(rng.integers(0, abs(nh - h) + 1))
    ox = int(rng.integers(0, abs(nw - w) + 1))
    return crop_or_pad(img, msk, (h, w), (oy, ox))


# ---------------------------------------------------------------------------
# batching


class BatchSampler:
    """Endless shuffled index stream.

    The permutation of epoch ``e`` depends only on ``(seed, e)``, so the
    stream is fully described by its integer ``position``.
    """

    def __init__(self, size: int, batch_size: int, seed: int, position: int = 0):
        if size <= 0:
            raise ValueError("cannot sample from an empty dataset")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.size = size
        self.batch_size = batch_size
        self.seed = seed
        self.position = position

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.size)

    def next_indices(self) -> np.ndarray:
        pos = self.position + np.arange(self.batch_size)
        epochs, offsets = np.divmod(pos, self.size)
        out = np.empty(self.batch_size, dtype=np.int64)
        for e in np.unique(epochs):
            sel = epochs == e
            out[sel] = self.epoch_order(int(e))[offsets[sel]]
        self.position += self.batch_size
        return out


def next_batch(dataset: SegDataset, sampler: BatchSampler, augment_data: bool,
               rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, np.ndarray]:
    """Stacked ``(images, masks)`` for the sampler's next indices."""
    idx = sampler.next_indices()
    images = dataset.images[idx]
    masks = dataset.masks[idx]
    if augment_data:
        if rng is None:
            raise ValueError("augmentation needs an rng")
        pairs = [augment(img, m, rng) for img, m in zip(images, masks)]
        images = np.stack([p[0] for p in pairs])
        masks = np.stack([p[1] for p in pairs])
    return images, masks.astype(np.int64)
