"""Differentiable bilinear warping with exact reverse-mode gradients.

A displacement field is a 2-channel array ``(2, H, W)`` holding per-pixel
offsets in pixel units: channel 0 is dx, channel 1 is dy.  Each output
pixel at integer coordinates ``(x, y)`` samples the input at ``(x - dx,
y - dy)``; the source coordinate is clamped to the valid image rectangle
and the value is the bilinear blend of its 4-neighborhood.

Both functions accept a single instance (``(C, H, W)`` with field
``(2, H, W)``) or a batch (``(N, C, H, W)`` with field ``(N, 2, H, W)``).
At integer source coordinates the bilinear kernel has a kink; gradients
use the right-hand derivative there.  Where the source coordinate was
clamped, the displacement gradient normal to the clamp is zero.
"""

from __future__ import annotations

import numpy as np


def _promote(arr: np.ndarray, rank: int):
    arr = np.asarray(arr)
    if arr.ndim == rank - 1:
        return arr[None], True
    if arr.ndim == rank:
        return arr, False
    raise ValueError(f"expected a rank-{rank - 1} or rank-{rank} array, got shape {arr.shape}")


def _check_pair(b: np.ndarray, flow: np.ndarray):
    b, b_single = _promote(b, 4)
    flow, f_single = _promote(flow, 4)
    if b_single != f_single:
        raise ValueError("input and displacement field must both be batched or both single")
    if flow.shape[1] != 2:
        raise ValueError(f"displacement field needs 2 channels (dx, dy), got {flow.shape[1]}")
    if flow.shape[0] != b.shape[0] or flow.shape[2:] != b.shape[2:]:
        raise ValueError(f"field shape {flow.shape} does not match input shape {b.shape}")
    if not np.isfinite(flow).all():
        raise ValueError("displacement field contains non-finite values")
    return b, flow, b_single


def _taps(b: np.ndarray, flow: np.ndarray):
    n, c, h, w = b.shape
    dx = flow[:, 0]
    dy = flow[:, 1]
    xs = np.arange(w, dtype=np.float64)[None, None, :]
    ys = np.arange(h, dtype=np.float64)[None, :, None]
    raw_x = xs - dx
    raw_y = ys - dy
    x = np.clip(raw_x, 0.0, float(w - 1))
    y = np.clip(raw_y, 0.0, float(h - 1))
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    active_x = (raw_x >= 0.0) & (raw_x <= w - 1.0)
    active_y = (raw_y >= 0.0) & (raw_y <= h - 1.0)
    return x0, x1, y0, y1, fx, fy, active_x, active_y


def _gather(b: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    n, c = b.shape[:2]
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    return b[ni, ci, y[:, None], x[:, None]]


def warp_forward(b: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample ``b`` at displaced coordinates; same shape as ``b``.

    A zero field reproduces the input bitwise; any output value is a
    convex combination of input values.
    """
    b, flow, single = _check_pair(b, flow)
    x0, x1, y0, y1, fx, fy, _, _ = _taps(b, flow)
    fx = fx[:, None]
    fy = fy[:, None]
    out = ((1.0 - fx) * (1.0 - fy) * _gather(b, y0, x0)
           + fx * (1.0 - fy) * _gather(b, y0, x1)
           + (1.0 - fx) * fy * _gather(b, y1, x0)
           + fx * fy * _gather(b, y1, x1))
    return out[0] if single else out


def warp_backward(grad_out: np.ndarray, b: np.ndarray, flow: np.ndarray):
    """Adjoint of :func:`warp_forward`; returns ``(grad_b, grad_flow)``.

    ``grad_b`` accumulates each output gradient into its four source
    neighbors with the bilinear weights; ``grad_flow`` is the analytic
    derivative with respect to (dx, dy), sign-flipped because the source
    coordinate is ``output - displacement``.
    """
    b, flow, single = _check_pair(b, flow)
    grad_out, g_single = _promote(grad_out, 4)
    if g_single != single or grad_out.shape != b.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match input {b.shape}")

    n, c, h, w = b.shape
    x0, x1, y0, y1, fx, fy, active_x, active_y = _taps(b, flow)
    g00 = _gather(b, y0, x0)
    g01 = _gather(b, y0, x1)
    g10 = _gather(b, y1, x0)
    g11 = _gather(b, y1, x1)

    fxc = fx[:, None]
    fyc = fy[:, None]
    grad_b = np.zeros_like(b)
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(grad_b, (ni, ci, y0[:, None], x0[:, None]), grad_out * (1.0 - fxc) * (1.0 - fyc))
    np.add.at(grad_b, (ni, ci, y0[:, None], x1[:, None]), grad_out * fxc * (1.0 - fyc))
    np.add.at(grad_b, (ni, ci, y1[:, None], x0[:, None]), grad_out * (1.0 - fxc) * fyc)
    np.add.at(grad_b, (ni, ci, y1[:, None], x1[:, None]), grad_out * fxc * fyc)

    dv_dx = (1.0 - fyc) * (g01 - g00) + fyc * (g11 - g10)
    dv_dy = (1.0 - fxc) * (g10 - g00) + fxc * (g11 - g01)
    grad_dx = -(grad_out * dv_dx).sum(axis=1) * active_x
    grad_dy = -(grad_out * dv_dy).sum(axis=1) * active_y
    grad_flow = np.stack([grad_dx, grad_dy], axis=1)
    if single:
        return grad_b[0], grad_flow[0]
    return grad_b, grad_flow
