"""Non-learned padding baselines and partial-convolution re-weighting.

The index-mapped methods (zero, circular, reflect, replicate) fill the
border purely by remapping pixel indices; corners compose the row map and
column map independently.  Reflect is mirror-exclusive: the edge pixel is
the mirror axis and is not repeated (index -1 maps to 1, index h to h-2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imagery import check_mask, check_tensor, resize_bilinear

#: CLI-stable method names.
METHOD_TAGS = ("zero", "circular", "reflect", "replicate", "bilinear", "distribution", "ca")

INDEX_MAPPED = ("zero", "circular", "reflect", "replicate")


def _index_map(n: int, p: int, method: str) -> np.ndarray:
    idx = np.arange(-p, n + p)
    if method == "circular":
        if p > n:
            raise ValueError(f"circular padding needs p <= {n}, got {p}")
        return idx % n
    if method == "replicate":
        return np.clip(idx, 0, n - 1)
    if method == "reflect":
        if p > n - 1:
            raise ValueError(f"reflect padding needs p <= {n - 1}, got {p}")
        return np.where(idx < 0, -idx, np.where(idx >= n, 2 * (n - 1) - idx, idx))
    raise ValueError(f"unknown index-mapped method {method!r}")


def pad_index_mapped(t: np.ndarray, method: str, p: int) -> np.ndarray:
    """Pad by ``p`` on every side using an index-mapping rule."""
    t = check_tensor(t)
    if method not in INDEX_MAPPED:
        raise ValueError(f"method must be one of {INDEX_MAPPED}, got {method!r}")
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    c, h, w = t.shape
    if method == "zero":
        out = np.zeros((c, h + 2 * p, w + 2 * p), dtype=t.dtype)
        out[:, p:p + h, p:p + w] = t
        return out
    rows = _index_map(h, p, method)
    cols = _index_map(w, p, method)
    return t[:, rows[:, None], cols[None, :]]


def pad_bilinear_extrapolation(t: np.ndarray, p: int, clamp: bool = True) -> np.ndarray:
    """Linear extrapolation from the two outermost pixels along each axis.

    A padded pixel at distance d beyond an edge takes ``edge + d*(edge -
    inner)``.  Rows are extrapolated first (left/right bands), then the
    widened array is extrapolated vertically, so corners continue the
    horizontal extrapolation.  ``clamp`` restricts the result to [0, 1],
    appropriate for image tensors.
    """
    t = check_tensor(t)
    c, h, w = t.shape
    if h < 2 or w < 2:
        raise ValueError(f"bilinear extrapolation needs at least 2x2 pixels, got {h}x{w}")
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    d = np.arange(p, 0, -1, dtype=t.dtype)  # distance, outermost first
    left = t[:, :, :1] + d[None, None, :] * (t[:, :, :1] - t[:, :, 1:2])
    right = t[:, :, -1:] + d[None, None, ::-1] * (t[:, :, -1:] - t[:, :, -2:-1])
    wide = np.concatenate([left, t, right], axis=2)
    top = wide[:, :1, :] + d[None, :, None] * (wide[:, :1, :] - wide[:, 1:2, :])
    bottom = wide[:, -1:, :] + d[None, ::-1, None] * (wide[:, -1:, :] - wide[:, -2:-1, :])
    out = np.concatenate([top, wide, bottom], axis=1)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
        out[:, p:p + h, p:p + w] = t  # interior stays verbatim even if unclamped input
    return out


def pad_distribution(t: np.ndarray, p: int) -> np.ndarray:
    """Mean-interpolation padding: fill the frame from a resized copy.

    The input is bilinearly resized to the padded shape so the frame keeps
    the border region's statistics; the interior is then restored verbatim.
    """
    t = check_tensor(t)
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    c, h, w = t.shape
    out = resize_bilinear(t, h + 2 * p, w + 2 * p)
    out[:, p:p + h, p:p + w] = t
    return out


def partial_conv2d(t: np.ndarray, mask: np.ndarray, weights: np.ndarray,
                   bias: np.ndarray, stride: int = 1):
    """Mask-aware convolution re-weighted by window area over valid count.

    Per window: ``out = conv(t * mask) * (k*k) / sum(mask in window) + bias``
    where the mask sum is positive, else just ``bias``.  Returns the output
    tensor and the propagated mask (1 where any valid pixel was seen).
    No implicit padding is applied; pad the inputs first if needed.
    """
    t = check_tensor(t)
    mask = check_mask(mask)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 4:
        raise ValueError(f"weights must be (out, in, kh, kw), got {weights.shape}")
    out_c, in_c, kh, kw = weights.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel dims must be odd, got {kh}x{kw}")
    if in_c != t.shape[0]:
        raise ValueError(f"weights expect {in_c} input channels, tensor has {t.shape[0]}")
    if mask.shape != t.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} != tensor dims {t.shape[1:]}")
    if bias.shape != (out_c,):
        raise ValueError(f"bias must have shape ({out_c},), got {bias.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")

    maskf = mask.astype(np.float64)
    masked = t * maskf[None]
    windows = sliding_window_view(masked, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    raw = np.einsum("oipq,ihwpq->ohw", weights, windows, optimize=True)
    valid = sliding_window_view(maskf, (kh, kw))[::stride, ::stride].sum(axis=(-2, -1))

    covered = valid > 0
    ratio = np.zeros_like(valid)
    np.divide(float(kh * kw), valid, out=ratio, where=covered)
    out = raw * ratio[None] + bias[:, None, None]
    out = np.where(covered[None], out, bias[:, None, None])
    return out, covered.astype(np.uint8)


@dataclass
class PaddingMethod:
    """A named padding scheme plus its default pad width.

    ``tag`` is one of the CLI-stable names in :data:`METHOD_TAGS`; the
    ``ca`` method additionally needs a trained pad model.
    """

    tag: str
    p: int = 1
    model: object | None = None

    def __post_init__(self):
        if self.tag not in METHOD_TAGS:
            raise ValueError(f"unknown padding method {self.tag!r}; expected one of {METHOD_TAGS}")
        if self.p < 1:
            raise ValueError(f"p must be >= 1, got {self.p}")
        if self.tag == "ca" and self.model is None:
            raise ValueError("the 'ca' method requires a trained pad model")

    def apply(self, tensor: np.ndarray, p: int | None = None) -> np.ndarray:
        """Pad ``tensor`` by ``p`` (defaults to the method's own width)."""
        width = self.p if p is None else p
        if self.tag in INDEX_MAPPED:
            return pad_index_mapped(tensor, self.tag, width)
        if self.tag == "bilinear":
            return pad_bilinear_extrapolation(tensor, width)
        if self.tag == "distribution":
            return pad_distribution(tensor, width)
        return self.model.pad(tensor, width)
