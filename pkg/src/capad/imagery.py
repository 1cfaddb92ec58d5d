"""Image tensors, masks, blocks, sliding crops, file I/O and augmentation.

Conventions used throughout the package:

* images and feature maps are numpy float arrays of shape
  ``(channels, height, width)``, C-contiguous (channel-major, then row,
  then column);
* image-valued tensors hold values in ``[0, 1]``; gradients and feature
  tensors are unbounded;
* masks are single-channel ``uint8`` arrays of shape ``(height, width)``
  whose values are exactly 0 (unknown / padding) or 1 (known);
* label maps are ``(height, width)`` integer arrays with 255 as the
  ignore index.

All functions are pure: random choices come from an explicit
``numpy.random.Generator`` argument, never from global state.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

SIDES = ("left", "right", "top", "bottom")

#: Label value treated as "don't care" by augmentation and the metrics.
IGNORE_INDEX = 255

CAPT_MAGIC = b"CAPT"
CAPT_VERSION = 1


def check_tensor(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate the (C, H, W) layout and return the array unchanged."""
    t = np.asarray(t)
    if t.ndim != 3:
        raise ValueError(f"{name} must have shape (channels, height, width), got {t.shape}")
    if min(t.shape) < 1:
        raise ValueError(f"{name} has a zero-sized dimension: {t.shape}")
    return t


def check_mask(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    """Validate a binary (H, W) mask and return it as uint8."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 and 1")
    return mask.astype(np.uint8)


def quantize_u8(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 samples, round half up."""
    clipped = np.clip(values, 0.0, 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# Raster I/O (PNG and binary PPM/PGM, 8-bit only)


def load_image(path) -> np.ndarray:
    """Load an 8-bit raster file as a (3, H, W) tensor with values in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
                raise ValueError(f"{path}: unsupported bit depth (mode {im.mode}), 8-bit only")
            rgb = im.convert("RGB")
            data = np.asarray(rgb, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc
    return data.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_image(tensor: np.ndarray, path) -> None:
    """Write a 1- or 3-channel tensor as an 8-bit PNG/PPM/PGM file.

    Values are clamped to [0, 1] and quantized round-half-up, so a
    load/save round trip is exact to within 1/255 per sample.
    """
    tensor = check_tensor(tensor)
    c = tensor.shape[0]
    if c not in (1, 3):
        raise ValueError(f"save_image expects 1 or 3 channels, got {c}")
    samples = quantize_u8(tensor)
    if c == 1:
        im = Image.fromarray(samples[0], mode="L")
    else:
        im = Image.fromarray(samples.transpose(1, 2, 0), mode="RGB")
    try:
        im.save(path)
    except (OSError, KeyError) as exc:
        raise ValueError(f"cannot write image {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# CAPT tensor files: magic "CAPT", u8 version, u32le C/H/W, f32le values


def save_tensor(tensor: np.ndarray, path) -> None:
    """Write a (C, H, W) tensor in the CAPT binary format (float32 LE)."""
    tensor = check_tensor(tensor)
    c, h, w = tensor.shape
    with open(path, "wb") as f:
        f.write(CAPT_MAGIC)
        f.write(struct.pack("<BIII", CAPT_VERSION, c, h, w))
        f.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a CAPT file back into a float64 (C, H, W) tensor."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CAPT_MAGIC:
            raise ValueError(f"{path}: not a CAPT file (magic {magic!r})")
        version, c, h, w = struct.unpack("<BIII", f.read(13))
        if version != CAPT_VERSION:
            raise ValueError(f"{path}: unsupported CAPT version {version}")
        payload = f.read(4 * c * h * w)
    if len(payload) != 4 * c * h * w:
        raise ValueError(f"{path}: truncated CAPT payload")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return values.reshape(c, h, w)


# ---------------------------------------------------------------------------
# Border masks and direction blocks


def make_border_mask(height: int, width: int, p: int, sides=SIDES) -> np.ndarray:
    """Binary mask that is 0 within ``p`` pixels of each selected side, 1 elsewhere."""
    if p < 1:
        raise ValueError(f"padding width must be >= 1, got {p}")
    sides = tuple(sides)
    for side in sides:
        if side not in SIDES:
            raise ValueError(f"unknown side {side!r}")
    if "left" in sides and "right" in sides and 2 * p >= width:
        raise ValueError(f"p={p} too large for width {width} with both horizontal sides")
    if "top" in sides and "bottom" in sides and 2 * p >= height:
        raise ValueError(f"p={p} too large for height {height} with both vertical sides")
    if ("left" in sides or "right" in sides) and p >= width:
        raise ValueError(f"p={p} too large for width {width}")
    if ("top" in sides or "bottom" in sides) and p >= height:
        raise ValueError(f"p={p} too large for height {height}")

    mask = np.ones((height, width), dtype=np.uint8)
    if "left" in sides:
        mask[:, :p] = 0
    if "right" in sides:
        mask[:, width - p:] = 0
    if "top" in sides:
        mask[:p, :] = 0
    if "bottom" in sides:
        mask[height - p:, :] = 0
    return mask


@dataclass(frozen=True)
class Block:
    """A direction strip: ``p`` pad rows/columns plus ``m`` of context.

    For ``left``/``right`` the tensor is (C, h, p+m); for ``top``/``bottom``
    it is (C, p+m, w).  The pad band sits on the outer edge named by
    ``side`` and is zero right after construction.
    """

    tensor: np.ndarray
    side: str
    p: int
    m: int

    def known_mask(self) -> np.ndarray:
        """Mask over the block's spatial dims: 0 on the pad band, 1 on context."""
        h, w = self.tensor.shape[1:]
        return make_border_mask(h, w, self.p, sides=(self.side,))


def band_slices(side: str, p: int) -> tuple[slice, slice]:
    """Spatial slices selecting the p-wide outer band of a block-shaped array."""
    if side == "left":
        return slice(None), slice(0, p)
    if side == "right":
        return slice(None), slice(-p, None)
    if side == "top":
        return slice(0, p), slice(None)
    if side == "bottom":
        return slice(-p, None), slice(None)
    raise ValueError(f"unknown side {side!r}")


def extract_block(image: np.ndarray, side: str, p: int, m: int) -> Block:
    """Crop the m-pixel border strip next to ``side`` and prepend p zeros outside it."""
    image = check_tensor(image, "image")
    if side not in SIDES:
        raise ValueError(f"unknown side {side!r}")
    if p < 1 or m < 1:
        raise ValueError(f"p and m must be >= 1, got p={p}, m={m}")
    c, h, w = image.shape
    horizontal = side in ("left", "right")
    dim = w if horizontal else h
    if p + m > dim:
        raise ValueError(f"p+m={p + m} exceeds image {'width' if horizontal else 'height'} {dim}")

    if side == "left":
        band = np.zeros((c, h, p), dtype=image.dtype)
        tensor = np.concatenate([band, image[:, :, :m]], axis=2)
    elif side == "right":
        band = np.zeros((c, h, p), dtype=image.dtype)
        tensor = np.concatenate([image[:, :, w - m:], band], axis=2)
    elif side == "top":
        band = np.zeros((c, p, w), dtype=image.dtype)
        tensor = np.concatenate([band, image[:, :m, :]], axis=1)
    else:
        band = np.zeros((c, p, w), dtype=image.dtype)
        tensor = np.concatenate([image[:, h - m:, :], band], axis=1)
    return Block(tensor=tensor, side=side, p=p, m=m)


# ---------------------------------------------------------------------------
# Sliding-window crops


def _axis_origins(dim: int, crop: int, stride: int) -> list[int]:
    origins = list(range(0, dim - crop + 1, stride))
    if origins[-1] != dim - crop:
        origins.append(dim - crop)  # shift the last crop so it ends on the edge
    return origins


def sliding_crops(image: np.ndarray, crop: int, overlap_fraction=Fraction(1, 3)):
    """Overlapping square crops covering every pixel.

    The stride is ``crop - floor(crop * overlap_fraction)``; the final crop
    along each axis is shifted back so its far edge meets the image edge.
    Pass ``overlap_fraction`` as a Fraction or string such as ``"1/3"`` to
    keep the stride arithmetic exact.

    Returns a list of ``(crop_tensor, (row, col))`` pairs in row-major order.
    """
    image = check_tensor(image, "image")
    _, h, w = image.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} exceeds image dims ({h}, {w})")
    overlap = Fraction(overlap_fraction)
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap fraction must be in [0, 1), got {overlap}")
    stride = crop - math.floor(crop * overlap)
    if stride < 1:
        raise ValueError(f"overlap {overlap} leaves a non-positive stride for crop {crop}")

    out = []
    for y in _axis_origins(h, crop, stride):
        for x in _axis_origins(w, crop, stride):
            out.append((image[:, y:y + crop, x:x + crop].copy(), (y, x)))
    return out


# ---------------------------------------------------------------------------
# Resampling primitives (shared by augmentation and distribution padding)


def _axis_taps(n_in: int, n_out: int):
    # Half-pixel-center (align-corners-false) source coordinates, edge-clamped.
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, float(n_in - 1))
    i0 = np.floor(src).astype(np.int64)
    np.minimum(i0, n_in - 1, out=i0)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(tensor: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize with the half-pixel-center convention."""
    tensor = check_tensor(tensor)
    _, h, w = tensor.shape
    r0, r1, fr = _axis_taps(h, out_h)
    rows = tensor[:, r0, :] * (1.0 - fr)[None, :, None] + tensor[:, r1, :] * fr[None, :, None]
    c0, c1, fc = _axis_taps(w, out_w)
    return rows[:, :, c0] * (1.0 - fc) + rows[:, :, c1] * fc


def resize_nearest(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize for label maps (no class mixing)."""
    labels = np.asarray(labels)
    h, w = labels.shape
    src_r = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    src_c = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    rows = np.clip(np.floor(src_r + 0.5).astype(np.int64), 0, h - 1)
    cols = np.clip(np.floor(src_c + 0.5).astype(np.int64), 0, w - 1)
    return labels[np.ix_(rows, cols)]


def _rotation_sources(h: int, w: int, angle_deg: float):
    # Inverse mapping of a counter-clockwise rotation about the pixel-center
    # of the image; returns per-output-pixel source coordinates.
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64) - cy,
                         np.arange(w, dtype=np.float64) - cx, indexing="ij")
    src_x = cx + cos_t * xs + sin_t * ys
    src_y = cy - sin_t * xs + cos_t * ys
    return src_x, src_y


def rotate_bilinear(tensor: np.ndarray, angle_deg: float, fill: float = 0.0) -> np.ndarray:
    """Rotate about the image center; out-of-frame pixels take ``fill``."""
    tensor = check_tensor(tensor)
    _, h, w = tensor.shape
    src_x, src_y = _rotation_sources(h, w, angle_deg)
    inside = (src_x >= 0) & (src_x <= w - 1) & (src_y >= 0) & (src_y <= h - 1)
    x = np.clip(src_x, 0.0, w - 1.0)
    y = np.clip(src_y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    out = (tensor[:, y0, x0] * (1 - fx) * (1 - fy)
           + tensor[:, y0, x1] * fx * (1 - fy)
           + tensor[:, y1, x0] * (1 - fx) * fy
           + tensor[:, y1, x1] * fx * fy)
    return np.where(inside[None], out, fill)


def rotate_nearest(labels: np.ndarray, angle_deg: float, fill: int = IGNORE_INDEX) -> np.ndarray:
    labels = np.asarray(labels)
    h, w = labels.shape
    src_x, src_y = _rotation_sources(h, w, angle_deg)
    inside = (src_x >= 0) & (src_x <= w - 1) & (src_y >= 0) & (src_y <= h - 1)
    cols = np.clip(np.floor(src_x + 0.5).astype(np.int64), 0, w - 1)
    rows = np.clip(np.floor(src_y + 0.5).astype(np.int64), 0, h - 1)
    return np.where(inside, labels[rows, cols], fill)


# ---------------------------------------------------------------------------
# Stochastic augmentation pipeline


@dataclass(frozen=True)
class AugmentConfig:
    """Mirror / resize / rotate / blur / crop pipeline parameters.

    Defaults follow common segmentation training practice: mirror with
    probability 0.5, uniform resize in (0.5, 2), rotation in (-10, 10)
    degrees, Gaussian blur with probability 0.5, crop to 713 pixels.
    """

    mirror_prob: float = 0.5
    scale_range: tuple[float, float] = (0.5, 2.0)
    rotation_range: tuple[float, float] = (-10.0, 10.0)
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 1.0)
    crop_size: int = 713
    seed: int = 0

    def validate(self) -> "AugmentConfig":
        if not 0.0 <= self.mirror_prob <= 1.0 or not 0.0 <= self.blur_prob <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        if self.scale_range[0] <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise ValueError(f"bad scale_range {self.scale_range}")
        if self.crop_size < 1:
            raise ValueError("crop_size must be positive")
        return self


def _pad_to_size(tensor: np.ndarray, size: int, fill: float) -> np.ndarray:
    _, h, w = tensor.shape
    if h >= size and w >= size:
        return tensor
    pt = max(0, (size - h)) // 2
    pb = max(0, size - h) - pt
    pl = max(0, (size - w)) // 2
    pr = max(0, size - w) - pl
    return np.pad(tensor, ((0, 0), (pt, pb), (pl, pr)), constant_values=fill)


def augment(image: np.ndarray, label: np.ndarray | None, cfg: AugmentConfig,
            rng: np.random.Generator):
    """Apply mirror, resize, rotation, blur and random crop; returns (image, label).

    The same spatial transform is applied to ``label`` (nearest-neighbor,
    out-of-frame filled with the ignore index).  All randomness is drawn
    from ``rng`` in a fixed order, so the output is fully determined by
    the generator state.
    """
    image = check_tensor(image, "image")
    cfg.validate()
    if label is not None:
        label = np.asarray(label)
        if label.shape != image.shape[1:]:
            raise ValueError(f"label shape {label.shape} != image dims {image.shape[1:]}")

    # Draw every random in a fixed order so the transform is a pure
    # function of (inputs, rng state) regardless of which steps fire.
    u_mirror = rng.random()
    scale = rng.uniform(*cfg.scale_range)
    angle = rng.uniform(*cfg.rotation_range)
    u_blur = rng.random()
    sigma = rng.uniform(*cfg.blur_sigma_range)
    u_crop_y = rng.random()
    u_crop_x = rng.random()

    if u_mirror < cfg.mirror_prob:
        image = image[:, :, ::-1]
        if label is not None:
            label = label[:, ::-1]

    _, h, w = image.shape
    out_h = max(1, int(math.floor(h * scale + 0.5)))
    out_w = max(1, int(math.floor(w * scale + 0.5)))
    if (out_h, out_w) != (h, w):
        image = resize_bilinear(image, out_h, out_w)
        if label is not None:
            label = resize_nearest(label, out_h, out_w)

    if angle != 0.0:
        image = rotate_bilinear(image, angle, fill=0.0)
        if label is not None:
            label = rotate_nearest(label, angle, fill=IGNORE_INDEX)

    if u_blur < cfg.blur_prob:
        image = np.stack([gaussian_filter(ch, sigma=sigma) for ch in image])

    cs = cfg.crop_size
    image = _pad_to_size(np.ascontiguousarray(image), cs, 0.0)
    if label is not None:
        label = _pad_to_size(label[None], cs, IGNORE_INDEX)[0]
    _, h, w = image.shape
    y0 = min(int(u_crop_y * (h - cs + 1)), h - cs)
    x0 = min(int(u_crop_x * (w - cs + 1)), w - cs)
    image = image[:, y0:y0 + cs, x0:x0 + cs].copy()
    if label is not None:
        label = label[y0:y0 + cs, x0:x0 + cs].copy()
    return image, label
