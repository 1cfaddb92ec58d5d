"""Direction-model training and the end-to-end context-aware padding pipeline.

One displacement network is trained per side.  Right and bottom are stored
in canonical orientation: their strips are flipped onto the left/top layout
before the network runs and the warped result is flipped back.  Two-model
mode then simply reuses the left/top parameters for right/bottom.

Training minimizes the masked reconstruction loss: the strip with its outer
band zeroed is both the network input and the warp source, and only band
pixels are penalized.  At inference the warp source has its band pre-filled
with the adjacent context edge instead of zeros, which is equivalent to
clamping sample coordinates to the known image content; an untrained
(zero-field) model therefore reproduces replicate padding exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .imagery import SIDES, AugmentConfig, Block, augment, band_slices, check_tensor, extract_block
from .net import (DisplacementNet, NetConfig, load_checkpoint, net_backward,
                  net_forward, net_init, save_checkpoint)
from .warp import warp_backward, warp_forward

LOSS_NORMS = ("l1", "l2")

BUNDLE_FILES = {side: f"{side}.capm" for side in SIDES}
BUNDLE_MANIFEST = "manifest.txt"


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings for one direction model."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 150
    loss_norm: str = "l1"
    seed: int = 0
    augment: AugmentConfig | None = None
    border_only: bool = False
    shuffle: bool = True

    def validate(self) -> "TrainConfig":
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr, batch_size and epochs must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.loss_norm.lower() not in LOSS_NORMS:
            raise ValueError(f"loss_norm must be one of {LOSS_NORMS}, got {self.loss_norm!r}")
        if self.augment is not None:
            self.augment.validate()
        return self


# ---------------------------------------------------------------------------
# Loss


def reconstruction_loss(b_true: np.ndarray, mask: np.ndarray, b_pred: np.ndarray,
                        norm: str = "l1"):
    """Mean reconstruction error over masked-out pixels; returns (loss, grad).

    ``mask`` is (H, W) with 0 marking supervised pixels.  Inputs may be
    (C, H, W) or batched (N, C, H, W); the batch loss is the mean of the
    per-sample means and ``grad`` is d(loss)/d(b_pred) with zeros at
    unsupervised pixels.
    """
    norm = norm.lower()
    if norm not in LOSS_NORMS:
        raise ValueError(f"norm must be one of {LOSS_NORMS}, got {norm!r}")
    b_true = np.asarray(b_true, dtype=np.float64)
    b_pred = np.asarray(b_pred, dtype=np.float64)
    if b_true.shape != b_pred.shape:
        raise ValueError(f"shape mismatch: {b_true.shape} vs {b_pred.shape}")
    batched = b_true.ndim == 4
    if not batched:
        b_true, b_pred = b_true[None], b_pred[None]
    mask = np.asarray(mask)
    if mask.shape != b_true.shape[2:]:
        raise ValueError(f"mask shape {mask.shape} does not match spatial dims {b_true.shape[2:]}")
    hole = mask == 0
    n_hole = int(hole.sum())
    if n_hole == 0:
        raise ValueError("mask has no zero pixels; nothing to supervise")

    n, c = b_true.shape[:2]
    denom = n * c * n_hole  # per-sample mean over C*holes, then mean over batch
    diff = (b_pred - b_true) * hole[None, None]
    if norm == "l1":
        loss = np.abs(diff).sum() / denom
        grad = np.sign(diff) / denom
    else:
        loss = (diff * diff).sum() / denom
        grad = 2.0 * diff / denom
    return loss, (grad if batched else grad[0])


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(step=0,
                   m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """Bias-corrected Adam update, in place; returns (params, state)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - cfg.beta1) * (g - m)
        v += (1.0 - cfg.beta2) * (g * g - v)
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


# ---------------------------------------------------------------------------
# Training pairs


def make_training_pair(image: np.ndarray, side: str, p: int, m: int,
                       rng: np.random.Generator, border_only: bool = False):
    """Sample a supervised strip; returns (input Block, target Block, mask).

    The target strip is cut from the image so its outer ``p`` band holds
    real content; the input is the same strip with that band zeroed, which
    mimics what the model sees at a true border.  ``border_only`` pins the
    strip to the image edge instead of a random interior offset.
    """
    image = check_tensor(image, "image")
    if side not in SIDES:
        raise ValueError(f"unknown side {side!r}")
    c, h, w = image.shape
    horizontal = side in ("left", "right")
    dim = w if horizontal else h
    if p + m > dim:
        raise ValueError(f"image {'width' if horizontal else 'height'} {dim} too small "
                         f"for a p+m={p + m} strip")
    n_offsets = dim - (p + m) + 1
    if border_only:
        off = 0 if side in ("left", "top") else n_offsets - 1
    else:
        off = int(rng.integers(0, n_offsets))

    if horizontal:
        strip = image[:, :, off:off + p + m].copy()
    else:
        strip = image[:, off:off + p + m, :].copy()
    target = Block(tensor=strip, side=side, p=p, m=m)
    masked = strip.copy()
    rs, cs = band_slices(side, p)
    masked[:, rs, cs] = 0.0
    inp = Block(tensor=masked, side=side, p=p, m=m)
    return inp, target, inp.known_mask()


def _to_canonical(t: np.ndarray, side: str) -> np.ndarray:
    """Flip a right/bottom strip onto the left/top layout (no-op otherwise)."""
    if side == "right":
        return np.ascontiguousarray(t[..., ::-1])
    if side == "bottom":
        return np.ascontiguousarray(t[..., ::-1, :])
    return t


_from_canonical = _to_canonical  # the flips are involutions


def canonical_side(side: str) -> str:
    return {"left": "left", "right": "left", "top": "top", "bottom": "top"}[side]


# ---------------------------------------------------------------------------
# Training loop


def train_direction(corpus, side: str, cfg: TrainConfig, net_cfg: NetConfig,
                    p: int, m: int = 20):
    """Train one direction model; returns (net, per-epoch mean loss list).

    The returned net is stored in canonical (left/top) orientation; callers
    must flip right/bottom inputs before running it (``PadModel`` does).
    """
    cfg.validate()
    net_cfg.validate()
    if side not in SIDES:
        raise ValueError(f"unknown side {side!r}")
    corpus = [check_tensor(img, "corpus image") for img in corpus]
    if not corpus:
        raise ValueError("empty training corpus")

    rng = np.random.default_rng(cfg.seed)
    net = net_init(net_cfg)
    params = dict(net.named_params())
    state = AdamState.for_params(params)
    canon = canonical_side(side)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(corpus)) if cfg.shuffle else np.arange(len(corpus))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            inputs, targets = [], []
            for i in order[start:start + cfg.batch_size]:
                img = corpus[int(i)]
                if cfg.augment is not None:
                    img, _ = augment(img, None, cfg.augment, rng)
                inp, tgt, _ = make_training_pair(img, side, p, m, rng, cfg.border_only)
                inputs.append(_to_canonical(inp.tensor, side))
                targets.append(_to_canonical(tgt.tensor, side))
            shapes = {t.shape for t in inputs}
            if len(shapes) > 1:
                raise ValueError(f"corpus strips have mixed shapes {sorted(shapes)}; "
                                 "images must share the strip dimension (or use augment)")
            x = np.stack(inputs)
            t = np.stack(targets)
            mask = Block(tensor=x[0], side=canon, p=p, m=m).known_mask()

            field, fcache = net_forward(net, x, training=True)
            warped = warp_forward(x, field)
            loss, grad_pred = reconstruction_loss(t, mask, warped, cfg.loss_norm)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {state.step + 1}")
            _, grad_field = warp_backward(grad_pred, x, field)
            grads, _ = net_backward(net, fcache, grad_field)
            params, state = adam_step(params, grads, state, cfg)
            epoch_losses.append(loss)
        history.append(float(np.mean(epoch_losses)))
    return net, history


# ---------------------------------------------------------------------------
# Inference pipeline


@dataclass
class PadModel:
    """Four direction nets plus the strip geometry they were trained at."""

    left: DisplacementNet
    right: DisplacementNet | None
    top: DisplacementNet
    bottom: DisplacementNet | None
    p: int
    m: int = 20
    two_model_mode: bool = False

    def __post_init__(self):
        if self.p < 1 or self.m < 1:
            raise ValueError(f"p and m must be >= 1, got p={self.p}, m={self.m}")
        if self.two_model_mode:
            self.right = self.left
            self.bottom = self.top
        if self.right is None or self.bottom is None:
            raise ValueError("right/bottom nets required unless two_model_mode is set")
        cfgs = {net.config for net in (self.left, self.right, self.top, self.bottom)}
        if len(cfgs) > 1:
            raise ValueError("all four direction nets must share one NetConfig")

    @property
    def config(self) -> NetConfig:
        return self.left.config

    def net_for(self, side: str) -> DisplacementNet:
        if side not in SIDES:
            raise ValueError(f"unknown side {side!r}")
        return getattr(self, side)

    def pad(self, image: np.ndarray, p: int | None = None) -> np.ndarray:
        return ca_pad(image, self, p)


def _prefill_band(canonical: np.ndarray, p: int, canon: str) -> np.ndarray:
    """Replace the zeroed left/top band with the adjacent context edge.

    Equivalent to clamping warp sample coordinates to the known content:
    keeps constant images constant and makes a zero field act as replicate.
    """
    out = canonical.copy()
    if canon == "left":
        out[:, :, :p] = out[:, :, p:p + 1]
    else:
        out[:, :p, :] = out[:, p:p + 1, :]
    return out


def _predict_band(image: np.ndarray, side: str, model: PadModel) -> np.ndarray:
    block = extract_block(image, side, model.p, model.m)
    canonical = _to_canonical(block.tensor, side)
    fld, _ = net_forward(model.net_for(side), canonical, training=False)
    filled = _prefill_band(canonical, model.p, canonical_side(side))
    warped = warp_forward(filled, fld)
    restored = _from_canonical(warped, side)
    rs, cs = band_slices(side, model.p)
    return np.ascontiguousarray(restored[:, rs, cs])


def ca_pad(image: np.ndarray, model: PadModel, p: int | None = None) -> np.ndarray:
    """Extend an image by p pixels on every side with the direction models.

    Horizontal bands are predicted first; the vertical models then run on
    the widened image so the corners are filled by the vertical pass.  For
    p below the trained width the model still runs at its trained geometry
    and the result is center-cropped.
    """
    image = check_tensor(image, "image")
    if p is None:
        p = model.p
    if not 1 <= p <= model.p:
        raise ValueError(f"p must be in [1, {model.p}], got {p}")
    c, h, w = image.shape
    if c != model.config.in_channels:
        raise ValueError(f"model expects {model.config.in_channels} channels, got {c}")
    if h < model.p + model.m or w < model.p + model.m:
        raise ValueError(f"image dims ({h}, {w}) too small for p+m={model.p + model.m}")

    big = model.p
    left_band = _predict_band(image, "left", model)
    right_band = _predict_band(image, "right", model)
    wide = np.concatenate([left_band, image, right_band], axis=2)
    top_band = _predict_band(wide, "top", model)
    bottom_band = _predict_band(wide, "bottom", model)
    out = np.concatenate([top_band, wide, bottom_band], axis=1)
    if p < big:
        d = big - p
        out = np.ascontiguousarray(out[:, d:d + h + 2 * p, d:d + w + 2 * p])
    return out


# ---------------------------------------------------------------------------
# Bundles


def save_bundle(model: PadModel, directory) -> None:
    """Write four CAPM checkpoints and a key=value manifest to a directory."""
    os.makedirs(directory, exist_ok=True)
    for side in SIDES:
        save_checkpoint(model.net_for(side), side, os.path.join(directory, BUNDLE_FILES[side]))
    cfg = model.config
    lines = [
        f"p={model.p}",
        f"m={model.m}",
        f"two_model_mode={'true' if model.two_model_mode else 'false'}",
        f"depth={cfg.depth}",
        f"base_channels={cfg.base_channels}",
        f"in_channels={cfg.in_channels}",
        f"skip_connections={'true' if cfg.skip_connections else 'false'}",
        f"seed={cfg.seed}",
    ]
    with open(os.path.join(directory, BUNDLE_MANIFEST), "w") as f:
        f.write("\n".join(lines) + "\n")


def _parse_manifest(path) -> dict:
    out = {}
    with open(path) as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: bad manifest line {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def load_bundle(directory) -> PadModel:
    """Read a bundle directory back into a PadModel."""
    manifest = _parse_manifest(os.path.join(directory, BUNDLE_MANIFEST))
    try:
        p = int(manifest["p"])
        m = int(manifest["m"])
        two_model = manifest["two_model_mode"] == "true"
    except KeyError as exc:
        raise ValueError(f"bundle manifest missing key {exc}") from exc
    nets = {}
    for side in SIDES:
        if two_model and side in ("right", "bottom"):
            continue
        net, tagged = load_checkpoint(os.path.join(directory, BUNDLE_FILES[side]))
        if tagged != side:
            raise ValueError(f"{BUNDLE_FILES[side]}: direction tag says {tagged!r}")
        nets[side] = net
    return PadModel(left=nets["left"], right=nets.get("right"), top=nets["top"],
                    bottom=nets.get("bottom"), p=p, m=m, two_model_mode=two_model)
