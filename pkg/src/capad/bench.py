"""Evaluation protocols: masked PSNR/MSE tables, border mIoU with center
leave-out, error-vs-distance histograms, and summed-activation maps.

PSNR and MSE are averaged per image first and then across the corpus,
each independently, so a table row's PSNR is generally not 10*log10(1/MSE)
of the same row.  Label maps are (H, W) integer arrays with 255 as the
ignore index.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from PIL import Image
from numpy.lib.stride_tricks import sliding_window_view

from .imagery import IGNORE_INDEX, check_mask, check_tensor, make_border_mask, sliding_crops
from .padding import PaddingMethod

PSNR_CAP_DB = 99.0
PSNR_CAP_MSE = 1e-10


@dataclass(frozen=True)
class MetricsRecord:
    method: str
    p: int
    psnr_db: float
    mse: float
    n_images: int


# ---------------------------------------------------------------------------
# Padding quality


def masked_psnr_mse(truth: np.ndarray, pred: np.ndarray, mask: np.ndarray):
    """PSNR (dB, unit-range) and MSE over mask==0 pixels of all channels."""
    truth = check_tensor(truth, "truth")
    pred = check_tensor(pred, "pred")
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    mask = check_mask(mask, "mask")
    if mask.shape != truth.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} != spatial dims {truth.shape[1:]}")
    hole = mask == 0
    if not hole.any():
        raise ValueError("mask has no zero pixels; empty evaluation region")
    diff = truth[:, hole] - pred[:, hole]
    mse = float(np.mean(diff * diff))
    psnr = PSNR_CAP_DB if mse < PSNR_CAP_MSE else 10.0 * math.log10(1.0 / mse)
    return psnr, mse


def eval_padding(corpus, methods, p: int, crop: int,
                 overlap=Fraction(1, 3), m: int = 20, map_fn=None):
    """Score padding methods on the masked-border protocol.

    Each sliding crop keeps its outer ``p`` band as ground truth; every
    method re-predicts that band from the crop interior.  Per-crop scores
    are averaged per image, then across the corpus.  ``map_fn`` (same
    contract as builtin ``map``) lets callers parallelize the per-image
    work; reduction order stays fixed either way.
    """
    corpus = [check_tensor(img, "corpus image") for img in corpus]
    if not corpus:
        raise ValueError("empty corpus")
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if crop < 2 * p + m:
        raise ValueError(f"crop {crop} smaller than 2p+m = {2 * p + m}")
    for meth in methods:
        if not isinstance(meth, PaddingMethod):
            raise TypeError(f"methods must be PaddingMethod instances, got {type(meth)!r}")
    mask = make_border_mask(crop, crop, p)

    def per_image(image):
        sums = np.zeros((len(methods), 2))
        crops = sliding_crops(image, crop, overlap)
        for tensor, _ in crops:
            interior = np.ascontiguousarray(tensor[:, p:crop - p, p:crop - p])
            for j, meth in enumerate(methods):
                pred = meth.apply(interior, p)
                if pred.shape != tensor.shape:
                    raise ValueError(f"method {meth.tag!r} returned shape {pred.shape}, "
                                     f"expected {tensor.shape}")
                psnr, mse = masked_psnr_mse(tensor, pred, mask)
                sums[j] += (psnr, mse)
        return sums / len(crops)

    per_image_scores = list(map_fn(per_image, corpus) if map_fn else map(per_image, corpus))
    totals = np.sum(per_image_scores, axis=0) / len(corpus)
    return [MetricsRecord(method=meth.tag, p=p, psnr_db=float(totals[j, 0]),
                          mse=float(totals[j, 1]), n_images=len(corpus))
            for j, meth in enumerate(methods)]


# ---------------------------------------------------------------------------
# Segmentation metrics


def _check_label_map(arr, name, num_classes):
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    vals = arr[arr != IGNORE_INDEX]
    if vals.size and (vals.min() < 0 or vals.max() >= num_classes):
        raise ValueError(f"{name} has labels outside [0, {num_classes}) that are not ignore")
    return arr.astype(np.int64)


def confusion_matrix(pred, gt, num_classes: int):
    """Counts over non-ignored gt pixels; returns (matrix, pred-ignored-per-class).

    ``matrix[i, j]`` counts pixels with ground truth i predicted as j.  A
    prediction of the ignore index at a labeled pixel is a miss that is no
    class's false positive; those land in the second return value.
    """
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    pred = _check_label_map(pred, "pred", num_classes)
    gt = _check_label_map(gt, "gt", num_classes)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    valid = gt != IGNORE_INDEX
    pv, gv = pred[valid], gt[valid]
    known = pv != IGNORE_INDEX
    conf = np.bincount(gv[known] * num_classes + pv[known],
                       minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    missed = np.bincount(gv[~known], minlength=num_classes)
    return conf, missed


def iou_from_confusion(conf: np.ndarray, missed=None):
    """Per-class IoU (NaN for classes absent from both maps) and their mean."""
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    if missed is not None:
        fn = fn + missed
    denom = tp + fp + fn
    present = denom > 0
    if not present.any():
        raise ValueError("no class present in either map")
    ious = np.full(conf.shape[0], np.nan)
    ious[present] = tp[present] / denom[present]
    return ious, float(np.mean(ious[present]))


def miou(pred, gt, num_classes: int):
    """Mean intersection-over-union; returns (per-class IoU array, mean)."""
    valid_any = np.asarray(gt) != IGNORE_INDEX
    if not valid_any.any():
        raise ValueError("all ground-truth pixels are ignored")
    conf, missed = confusion_matrix(pred, gt, num_classes)
    return iou_from_confusion(conf, missed)


def _round_half_up(x: Fraction) -> int:
    return int(math.floor(x + Fraction(1, 2)))


def mask_center(gt, leave_out) -> np.ndarray:
    """Copy of gt with the centered leave_out*h x leave_out*w rect ignored."""
    f = Fraction(leave_out)
    if not 0 <= f < 1:
        raise ValueError(f"leave_out fraction must be in [0, 1), got {f}")
    gt = np.asarray(gt)
    h, w = gt.shape
    mh = _round_half_up(f * h)
    mw = _round_half_up(f * w)
    out = gt.copy()
    top, left = (h - mh) // 2, (w - mw) // 2
    out[top:top + mh, left:left + mw] = IGNORE_INDEX
    return out


def border_miou(pred, gt, leave_out, num_classes: int) -> float:
    """Mean IoU with the centered fraction of the ground truth left out."""
    return miou(pred, mask_center(gt, leave_out), num_classes)[1]


def error_distance_histogram(pred, gt, bin_width: int = 10):
    """Counts of misclassified pixels binned by distance to the image center.

    Distance is Euclidean between pixel centers; the bin count is fixed by
    the map size (up to the corner distance), so error-free maps yield
    all-zero counts rather than an empty array.
    """
    if bin_width < 1:
        raise ValueError("bin_width must be >= 1")
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"label maps must share a 2-D shape, got {pred.shape} vs {gt.shape}")
    h, w = gt.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    max_dist = math.hypot(cy, cx)
    n_bins = int(max_dist // bin_width) + 1
    centers = (np.arange(n_bins) + 0.5) * bin_width
    counts = np.zeros(n_bins, dtype=np.int64)
    wrong = (pred != gt) & (gt != IGNORE_INDEX)
    if wrong.any():
        ys, xs = np.nonzero(wrong)
        dist = np.hypot(ys - cy, xs - cx)
        np.add.at(counts, (dist // bin_width).astype(np.int64), 1)
    return centers, counts


# ---------------------------------------------------------------------------
# Activation visualization


def summed_activation_map(image: np.ndarray, weights: np.ndarray,
                          method: PaddingMethod) -> np.ndarray:
    """Sum of absolute conv activations, min-max normalized to [0, 1].

    The image is padded by ``method`` with p = (k-1)/2 so the map has the
    input's spatial dims; a flat map normalizes to all zeros.
    """
    image = check_tensor(image, "image")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ValueError(f"weights must be (out, in, k, k), got {weights.shape}")
    k = weights.shape[2]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if weights.shape[1] != image.shape[0]:
        raise ValueError(f"kernel expects {weights.shape[1]} channels, image has {image.shape[0]}")
    p = (k - 1) // 2
    padded = method.apply(image, p) if p else image
    cols = sliding_window_view(padded, (k, k), axis=(1, 2))
    out = np.einsum("oikl,ihwkl->ohw", weights, cols, optimize=True)
    summed = np.abs(out).sum(axis=0)
    lo, hi = summed.min(), summed.max()
    if hi - lo < 1e-12:
        return np.zeros_like(summed)
    return (summed - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# Label-map files

DEEPGLOBE_CLASSES = ("urban", "agriculture", "rangeland", "forest", "water", "barren")

# RGB -> class index; black ("unknown") decodes to the ignore label.
DEEPGLOBE_PALETTE = {
    (0, 255, 255): 0,
    (255, 255, 0): 1,
    (255, 0, 255): 2,
    (0, 255, 0): 3,
    (0, 0, 255): 4,
    (255, 255, 255): 5,
    (0, 0, 0): IGNORE_INDEX,
}

PALETTES = {"deepglobe": DEEPGLOBE_PALETTE}


def load_label_map(path, palette: str | None = None) -> np.ndarray:
    """Read a label map: grayscale class indices, or RGB via a named palette."""
    with Image.open(path) as img:
        if palette is None:
            if img.mode not in ("L", "P"):
                raise ValueError(f"{path}: mode {img.mode} needs a palette name to decode")
            return np.asarray(img if img.mode == "L" else img.convert("P"), dtype=np.uint8)
        if palette not in PALETTES:
            raise ValueError(f"unknown palette {palette!r}; available: {sorted(PALETTES)}")
        rgb = np.asarray(img.convert("RGB"))
    table = PALETTES[palette]
    out = np.zeros(rgb.shape[:2], dtype=np.uint8)
    matched = np.zeros(rgb.shape[:2], dtype=bool)
    for color, idx in table.items():
        sel = (rgb == color).all(axis=-1)
        out[sel] = idx
        matched |= sel
    if not matched.all():
        y, x = np.nonzero(~matched)
        raise ValueError(f"{path}: color {tuple(rgb[y[0], x[0]])} at ({y[0]}, {x[0]}) "
                         f"not in palette {palette!r}")
    return out


def save_label_map(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# CSV and SVG emission


def _fmt(x) -> str:
    return format(float(x), ".10g")


def write_metrics_csv(records, path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["method", "p", "psnr_db", "mse", "n_images"])
        for r in records:
            wr.writerow([r.method, r.p, _fmt(r.psnr_db), _fmt(r.mse), r.n_images])


def write_histogram_csv(bin_centers, counts, path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["bin_center", "count"])
        for c, n in zip(bin_centers, counts):
            wr.writerow([_fmt(c), int(n)])


def write_border_miou_csv(rows, path) -> None:
    """rows: (leave_out label, miou) pairs."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["leave_out", "miou"])
        for label, value in rows:
            wr.writerow([label, _fmt(value)])


def write_svg_plot(path, xs, ys, kind: str = "bar", title: str = "",
                   x_label: str = "", y_label: str = "",
                   width: int = 640, height: int = 400) -> None:
    """Dependency-free bar/line plot with axes and min/max tick labels."""
    if kind not in ("bar", "line"):
        raise ValueError(f"kind must be 'bar' or 'line', got {kind!r}")
    xs = [float(v) for v in xs]
    ys = [float(v) for v in ys]
    if len(xs) != len(ys) or not xs:
        raise ValueError("xs and ys must be equal-length and nonempty")
    ml, mr, mt, mb = 60, 15, 30, 45
    pw, ph = width - ml - mr, height - mt - mb
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(0.0, min(ys)), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    def px(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return mt + ph - (y - y_lo) / (y_hi - y_lo) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    if kind == "bar":
        bw = max(1.0, pw / len(xs) * 0.8)
        for x, y in zip(xs, ys):
            top = py(y)
            parts.append(f'<rect x="{px(x) - bw / 2:.2f}" y="{top:.2f}" width="{bw:.2f}" '
                         f'height="{py(y_lo) - top:.2f}" fill="steelblue"/>')
    else:
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="2"/>')
    ax = (f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>'
          f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>')
    parts.append(ax)
    parts.append(f'<text x="{ml}" y="{height - 28}" font-size="12">{_fmt(x_lo)}</text>')
    parts.append(f'<text x="{ml + pw}" y="{height - 28}" font-size="12" '
                 f'text-anchor="end">{_fmt(x_hi)}</text>')
    parts.append(f'<text x="{ml - 5}" y="{mt + ph}" font-size="12" '
                 f'text-anchor="end">{_fmt(y_lo)}</text>')
    parts.append(f'<text x="{ml - 5}" y="{mt + 10}" font-size="12" text-anchor="end">{_fmt(y_hi)}</text>')
    if title:
        parts.append(f'<text x="{width / 2:.0f}" y="18" font-size="14" text-anchor="middle">{title}</text>')
    if x_label:
        parts.append(f'<text x="{width / 2:.0f}" y="{height - 8}" font-size="12" '
                     f'text-anchor="middle">{x_label}</text>')
    if y_label:
        parts.append(f'<text x="14" y="{mt + ph / 2:.0f}" font-size="12" text-anchor="middle" '
                     f'transform="rotate(-90 14 {mt + ph / 2:.0f})">{y_label}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")
