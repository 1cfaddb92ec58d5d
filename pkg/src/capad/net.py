"""Displacement network: a small encoder-decoder with exact reverse-mode gradients.

Each encoder unit is conv3x3 -> batchnorm -> relu -> maxpool2; each decoder
unit is bilinear-upsample2 -> conv3x3 -> relu with an elementwise-add skip
from the encoder activation at the same resolution (added before the relu).
A final zero-initialized 3x3 conv produces the 2-channel displacement field,
so a freshly initialized network predicts the identity warp.

Inputs whose spatial dims are not divisible by ``2**depth`` are zero-padded
on the right/bottom internally and the output is cropped back, so callers
never see the constraint.  All layers run on float64; checkpoints store
float32 little-endian values.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CAPM_MAGIC = b"CAPM"
CAPM_VERSION = 1

DIRECTION_TAGS = {"left": 0, "right": 1, "top": 2, "bottom": 3}
TAG_DIRECTIONS = {v: k for k, v in DIRECTION_TAGS.items()}

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters for one direction network."""

    depth: int = 2
    base_channels: int = 16
    in_channels: int = 3
    skip_connections: bool = True
    seed: int = 0

    def validate(self) -> "NetConfig":
        if self.depth not in (1, 2):
            raise ValueError(f"depth must be 1 or 2, got {self.depth}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")
        return self


@dataclass
class ConvLayer:
    weight: np.ndarray  # (out, in, k, k), k odd
    bias: np.ndarray    # (out,)
    pad: int = 1


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM


@dataclass
class DisplacementNet:
    """Parameter container; the forward/backward walk is fixed by the config."""

    config: NetConfig
    enc_convs: list
    enc_bns: list
    dec_convs: list
    head: ConvLayer

    def named_params(self):
        """Trainable arrays as (name, array) pairs, in a stable order."""
        out = []
        for i, (conv, bn) in enumerate(zip(self.enc_convs, self.enc_bns)):
            out += [(f"enc{i}.weight", conv.weight), (f"enc{i}.bias", conv.bias),
                    (f"enc{i}.gamma", bn.gamma), (f"enc{i}.beta", bn.beta)]
        for j, conv in enumerate(self.dec_convs):
            out += [(f"dec{j}.weight", conv.weight), (f"dec{j}.bias", conv.bias)]
        out += [("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        return out

    def layer_sequence(self):
        """The architecture walk as (kind, layer) pairs, checkpoint order."""
        seq = []
        for conv, bn in zip(self.enc_convs, self.enc_bns):
            seq += [("conv", conv), ("batchnorm", bn), ("maxpool", 2)]
        for conv in self.dec_convs:
            seq += [("upsample", 2), ("conv", conv)]
        seq.append(("conv", self.head))
        return seq

    def param_count(self) -> int:
        return sum(arr.size for _, arr in self.named_params())

    def copy(self) -> "DisplacementNet":
        return copy.deepcopy(self)


def _encoder_channels(cfg: NetConfig) -> list[int]:
    return [cfg.base_channels * (2 ** i) for i in range(cfg.depth)]


def net_init(cfg: NetConfig) -> DisplacementNet:
    """Build a network with fan-in-scaled uniform conv weights.

    Batchnorm starts at identity (gamma 1, beta 0) and the displacement
    head is zero-initialized.  Fully determined by ``cfg.seed``.
    """
    cfg = cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    enc_out = _encoder_channels(cfg)

    def conv(in_ch, out_ch, k=3):
        limit = np.sqrt(1.0 / (in_ch * k * k))
        weight = rng.uniform(-limit, limit, size=(out_ch, in_ch, k, k))
        return ConvLayer(weight=weight, bias=np.zeros(out_ch), pad=k // 2)

    enc_convs, enc_bns = [], []
    in_ch = cfg.in_channels
    for out_ch in enc_out:
        enc_convs.append(conv(in_ch, out_ch))
        enc_bns.append(BatchNormLayer(gamma=np.ones(out_ch), beta=np.zeros(out_ch),
                                      running_mean=np.zeros(out_ch), running_var=np.ones(out_ch)))
        in_ch = out_ch

    dec_convs = []
    cur = enc_out[-1]
    for j in range(cfg.depth):
        out_ch = enc_out[cfg.depth - 1 - j]  # match the skip activation's channels
        dec_convs.append(conv(cur, out_ch))
        cur = out_ch

    head = ConvLayer(weight=np.zeros((2, cur, 3, 3)), bias=np.zeros(2), pad=1)
    return DisplacementNet(config=cfg, enc_convs=enc_convs, enc_bns=enc_bns,
                           dec_convs=dec_convs, head=head)


# ---------------------------------------------------------------------------
# Layer primitives (batched, NCHW)


def _conv_forward(x, layer: ConvLayer):
    p = layer.pad
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    k = layer.weight.shape[2]
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.einsum("oikl,nihwkl->nohw", layer.weight, cols, optimize=True)
    out += layer.bias[None, :, None, None]
    return out, xp


def _conv_backward(grad_out, xp, layer: ConvLayer):
    k = layer.weight.shape[2]
    p = layer.pad
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    d_weight = np.einsum("nohw,nihwkl->oikl", grad_out, cols, optimize=True)
    d_bias = grad_out.sum(axis=(0, 2, 3))
    dxp = np.zeros_like(xp)
    ho, wo = grad_out.shape[2:]
    for di in range(k):
        for dj in range(k):
            dxp[:, :, di:di + ho, dj:dj + wo] += np.einsum(
                "nohw,oi->nihw", grad_out, layer.weight[:, :, di, dj], optimize=True)
    dx = dxp[:, :, p:xp.shape[2] - p, p:xp.shape[3] - p] if p else dxp
    return dx, d_weight, d_bias


def _bn_forward(x, layer: BatchNormLayer, training: bool):
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        # Running stats use the biased batch variance and are the only
        # state mutated by a training-mode forward.
        layer.running_mean += layer.momentum * (mean - layer.running_mean)
        layer.running_var += layer.momentum * (var - layer.running_var)
    else:
        mean = layer.running_mean
        var = layer.running_var
    inv = 1.0 / np.sqrt(var + layer.eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = layer.gamma[None, :, None, None] * xhat + layer.beta[None, :, None, None]
    return out, (xhat, inv)


def _bn_backward(grad_out, cache, layer: BatchNormLayer):
    xhat, inv = cache
    n, c, h, w = grad_out.shape
    m = n * h * w
    d_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    d_beta = grad_out.sum(axis=(0, 2, 3))
    d_xhat = grad_out * layer.gamma[None, :, None, None]
    dx = (inv[None, :, None, None] / m) * (
        m * d_xhat
        - d_xhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (d_xhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
    return dx, d_gamma, d_beta


def _maxpool_forward(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first occurrence wins ties (row-major in window)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool_backward(grad_out, idx, in_shape):
    n, c, h, w = in_shape
    gwin = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(gwin, idx[..., None], grad_out[..., None], axis=-1)
    return gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def _upsample_taps(n_in: int):
    # x2 bilinear, half-pixel centers, edge-clamped.
    src = (np.arange(2 * n_in, dtype=np.float64) + 0.5) * 0.5 - 0.5
    src = np.clip(src, 0.0, float(n_in - 1))
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _upsample_forward(x):
    n, c, h, w = x.shape
    r0, r1, fr = _upsample_taps(h)
    c0, c1, fc = _upsample_taps(w)
    rows = x[:, :, r0, :] * (1.0 - fr)[None, None, :, None] + x[:, :, r1, :] * fr[None, None, :, None]
    out = rows[:, :, :, c0] * (1.0 - fc) + rows[:, :, :, c1] * fc
    return out, (r0, r1, fr, c0, c1, fc, (h, w))


def _upsample_backward(grad_out, cache):
    r0, r1, fr, c0, c1, fc, (h, w) = cache
    n, c = grad_out.shape[:2]
    grows = np.zeros((n, c, 2 * h, w))
    np.add.at(grows, (slice(None), slice(None), slice(None), c0), grad_out * (1.0 - fc))
    np.add.at(grows, (slice(None), slice(None), slice(None), c1), grad_out * fc)
    gx = np.zeros((n, c, h, w))
    np.add.at(gx, (slice(None), slice(None), r0), grows * (1.0 - fr)[None, None, :, None])
    np.add.at(gx, (slice(None), slice(None), r1), grows * fr[None, None, :, None])
    return gx


# ---------------------------------------------------------------------------
# Whole-network forward / backward


@dataclass
class NetCache:
    training: bool
    batched: bool
    in_hw: tuple
    pad_hw: tuple
    enc: list = field(default_factory=list)
    dec: list = field(default_factory=list)
    head_cache: object = None


def net_forward(net: DisplacementNet, b: np.ndarray, training: bool = False):
    """Run the encoder-decoder; returns (displacement field, cache).

    ``b`` may be a single (C, H, W) block or a batch (N, C, H, W); the
    field has shape (2, H, W) or (N, 2, H, W) accordingly.  Training mode
    normalizes with batch statistics (and updates the running stats);
    inference uses the running statistics and never mutates the net.
    """
    cfg = net.config
    b = np.asarray(b, dtype=np.float64)
    batched = b.ndim == 4
    if not batched:
        if b.ndim != 3:
            raise ValueError(f"expected (C, H, W) or (N, C, H, W), got shape {b.shape}")
        b = b[None]
    if b.shape[1] != cfg.in_channels:
        raise ValueError(f"network expects {cfg.in_channels} channels, got {b.shape[1]}")

    n, c, h, w = b.shape
    f = 2 ** cfg.depth
    ph, pw = (-h) % f, (-w) % f
    x = np.pad(b, ((0, 0), (0, 0), (0, ph), (0, pw))) if (ph or pw) else b

    cache = NetCache(training=training, batched=batched, in_hw=(h, w),
                     pad_hw=(h + ph, w + pw))
    skips = []
    for conv, bn in zip(net.enc_convs, net.enc_bns):
        x, c_conv = _conv_forward(x, conv)
        x, c_bn = _bn_forward(x, bn, training)
        relu_mask = x > 0
        x = x * relu_mask
        skips.append(x)
        pooled_in_shape = x.shape
        x, c_pool = _maxpool_forward(x)
        cache.enc.append((c_conv, c_bn, relu_mask, c_pool, pooled_in_shape))

    for j, conv in enumerate(net.dec_convs):
        x, c_up = _upsample_forward(x)
        x, c_conv = _conv_forward(x, conv)
        if cfg.skip_connections:
            x = x + skips[cfg.depth - 1 - j]
        relu_mask = x > 0
        x = x * relu_mask
        cache.dec.append((c_up, c_conv, relu_mask))

    out, cache.head_cache = _conv_forward(x, net.head)
    field = out[:, :, :h, :w]
    return (field if batched else field[0]), cache


def net_backward(net: DisplacementNet, cache: NetCache, grad_field: np.ndarray):
    """Exact reverse-mode gradients; returns (param-grad dict, input grad).

    Requires the cache of a training-mode forward.  Gradient keys match
    :meth:`DisplacementNet.named_params` names.
    """
    if not cache.training:
        raise ValueError("net_backward needs a cache from a training-mode forward")
    cfg = net.config
    grad_field = np.asarray(grad_field, dtype=np.float64)
    if not cache.batched:
        grad_field = grad_field[None]
    h, w = cache.in_hw
    hp, wp = cache.pad_hw
    if grad_field.shape[1] != 2 or grad_field.shape[2:] != (h, w):
        raise ValueError(f"grad_field shape {grad_field.shape} does not match forward output")
    g = np.zeros((grad_field.shape[0], 2, hp, wp))
    g[:, :, :h, :w] = grad_field

    grads = {}
    g, grads["head.weight"], grads["head.bias"] = _conv_backward(g, cache.head_cache, net.head)

    skip_grads = [None] * cfg.depth
    for j in reversed(range(cfg.depth)):
        c_up, c_conv, relu_mask = cache.dec[j]
        g = g * relu_mask
        if cfg.skip_connections:
            skip_grads[cfg.depth - 1 - j] = g
        g, grads[f"dec{j}.weight"], grads[f"dec{j}.bias"] = _conv_backward(g, c_conv, net.dec_convs[j])
        g = _upsample_backward(g, c_up)

    for i in reversed(range(cfg.depth)):
        c_conv, c_bn, relu_mask, c_pool, pooled_in_shape = cache.enc[i]
        g = _maxpool_backward(g, c_pool, pooled_in_shape)
        if cfg.skip_connections and skip_grads[i] is not None:
            g = g + skip_grads[i]
        g = g * relu_mask
        g, grads[f"enc{i}.gamma"], grads[f"enc{i}.beta"] = _bn_backward(g, c_bn, net.enc_bns[i])
        g, grads[f"enc{i}.weight"], grads[f"enc{i}.bias"] = _conv_backward(g, c_conv, net.enc_convs[i])

    grad_input = g[:, :, :h, :w]
    return grads, (grad_input if cache.batched else grad_input[0])


# ---------------------------------------------------------------------------
# CAPM checkpoints


def save_checkpoint(net: DisplacementNet, side: str, path) -> None:
    """Write one direction network in the CAPM binary format."""
    if side not in DIRECTION_TAGS:
        raise ValueError(f"unknown direction {side!r}")
    cfg = net.config
    seq = net.layer_sequence()
    with open(path, "wb") as f:
        f.write(CAPM_MAGIC)
        f.write(struct.pack("<BBBIIBQI", CAPM_VERSION, DIRECTION_TAGS[side], cfg.depth,
                            cfg.base_channels, cfg.in_channels, int(cfg.skip_connections),
                            cfg.seed, len(seq)))
        for kind, layer in seq:
            if kind == "conv":
                f.write(struct.pack("<B", 0))
                f.write(struct.pack("<IIII", *layer.weight.shape))
                f.write(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
            elif kind == "batchnorm":
                f.write(struct.pack("<B", 1))
                f.write(struct.pack("<I", layer.gamma.size))
                for arr in (layer.gamma, layer.beta, layer.running_mean, layer.running_var):
                    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            elif kind == "maxpool":
                f.write(struct.pack("<BI", 2, layer))
            else:  # upsample
                f.write(struct.pack("<BI", 3, layer))


def load_checkpoint(path):
    """Read a CAPM file; returns ``(net, side)``."""
    with open(path, "rb") as f:
        if f.read(4) != CAPM_MAGIC:
            raise ValueError(f"{path}: not a CAPM checkpoint")
        version, direction, depth, base, in_ch, skip, seed, n_layers = struct.unpack(
            "<BBBIIBQI", f.read(24))
        if version != CAPM_VERSION:
            raise ValueError(f"{path}: unsupported CAPM version {version}")
        if direction not in TAG_DIRECTIONS:
            raise ValueError(f"{path}: bad direction tag {direction}")
        cfg = NetConfig(depth=depth, base_channels=base, in_channels=in_ch,
                        skip_connections=bool(skip), seed=seed)
        net = net_init(cfg)  # allocates the right shapes; values overwritten below
        seq = net.layer_sequence()
        if n_layers != len(seq):
            raise ValueError(f"{path}: layer count {n_layers} does not match config")

        def read_f32(count):
            data = f.read(4 * count)
            if len(data) != 4 * count:
                raise ValueError(f"{path}: truncated checkpoint")
            return np.frombuffer(data, dtype="<f4").astype(np.float64)

        for kind, layer in seq:
            (tag,) = struct.unpack("<B", f.read(1))
            if kind == "conv":
                if tag != 0:
                    raise ValueError(f"{path}: expected conv layer, got tag {tag}")
                shape = struct.unpack("<IIII", f.read(16))
                if shape != layer.weight.shape:
                    raise ValueError(f"{path}: conv shape {shape} does not match config")
                layer.weight = read_f32(int(np.prod(shape))).reshape(shape)
                layer.bias = read_f32(shape[0])
            elif kind == "batchnorm":
                if tag != 1:
                    raise ValueError(f"{path}: expected batchnorm layer, got tag {tag}")
                (ch,) = struct.unpack("<I", f.read(4))
                if ch != layer.gamma.size:
                    raise ValueError(f"{path}: batchnorm width {ch} does not match config")
                layer.gamma = read_f32(ch)
                layer.beta = read_f32(ch)
                layer.running_mean = read_f32(ch)
                layer.running_var = read_f32(ch)
            else:
                expect = 2 if kind == "maxpool" else 3
                if tag != expect:
                    raise ValueError(f"{path}: expected {kind} layer, got tag {tag}")
                struct.unpack("<I", f.read(4))
    return net, TAG_DIRECTIONS[direction]
