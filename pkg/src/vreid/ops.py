"""Differentiable operations over :class:`~vreid.tensor.Tensor`.

Convolution and the fully-connected product are routed through column/BLAS
matmul for speed; tests hold them to naive-loop oracles within 1e-12.
Every output is finiteness-checked at construction. Cross-entropy and the
adversarial losses clamp probabilities at ``LOG_FLOOR`` before the log.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateBatchError, LabelError, ShapeError
from .tensor import Tensor, active_tape

LOG_FLOOR = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _record(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    live = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=live)
    if live:
        tape.record(out, inputs, backward_fn)
    return out


def _require_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, k, k, oh, ow), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im(gcols: np.ndarray, xshape: tuple, k: int, stride: int, padding: int,
            oh: int, ow: int) -> np.ndarray:
    n, c, h, w = xshape
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    g6 = gcols.reshape(n, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g6[:, :, i, j]
    if padding:
        return np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + w])
    return gxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW input against OIKK square kernels."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: input ndim {x.ndim}, weight ndim {weight.ndim}, expected 4 and 4")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d: non-square kernel {kh}x{kw}")
    if i != c:
        raise ShapeError(f"conv2d: input channel axis {c} != weight input axis {i}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({o},)")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel {kh} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, stride, oh, ow)                    # (N, C*K*K, L)
    w2 = weight.data.reshape(o, -1)                           # (O, C*K*K)
    out = np.matmul(w2[None], cols) + bias.data[None, :, None]  # (N, O, L)
    out = out.reshape(n, o, oh, ow)

    needs = (x.requires_grad, weight.requires_grad, bias.requires_grad)

    def bwd(g):
        g2 = g.reshape(n, o, oh * ow)
        gx = gw = gb = None
        if needs[0]:
            gcols = np.matmul(w2.T[None], g2)
            gx = _col2im(gcols, x.shape, kh, stride, padding, oh, ow)
        if needs[1]:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if needs[2]:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    return _record(out, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# elementwise / shaping


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _record(np.maximum(x.data, 0.0), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _record(y, (x,), bwd)


def log_clamped(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """log(max(x, floor)); gradient is 1/x above the floor, 0 below."""
    mask = x.data > floor
    y = np.log(np.maximum(x.data, floor))

    def bwd(g):
        return (np.where(mask, g / x.data, 0.0),)

    return _record(y, (x,), bwd)


def add_maps(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add_maps")

    def bwd(g):
        return g, g

    return _record(a.data + b.data, (a, b), bwd)


def sum_maps(maps: Sequence[Tensor]) -> Tensor:
    """Elementwise sum of same-shape tensors, exactly permutation invariant.

    Addends are put in canonical (per-element ascending) order before the
    fold, so any argument permutation produces bit-identical output.
    """
    if not maps:
        raise ShapeError("sum_maps: empty input")
    for m in maps[1:]:
        _require_same_shape(maps[0], m, "sum_maps")
    if len(maps) == 1:
        def bwd_one(g):
            return (g,)

        return _record(maps[0].data.copy(), tuple(maps), bwd_one)
    stacked = np.sort(np.stack([m.data for m in maps], axis=0), axis=0)
    acc = stacked[0].copy()
    for i in range(1, len(maps)):
        acc += stacked[i]

    def bwd(g):
        return tuple(g for _ in maps)

    return _record(acc, tuple(maps), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")

    def bwd(g):
        return g, -g

    return _record(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")

    def bwd(g):
        return g * b.data, g * a.data

    return _record(a.data * b.data, (a, b), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    def bwd(g):
        return (g * s,)

    return _record(x.data * s, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        return (np.full_like(x.data, float(g)),)

    return _record(np.asarray(x.data.sum()), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    inv = 1.0 / x.size

    def bwd(g):
        return (np.full_like(x.data, float(g) * inv),)

    return _record(np.asarray(x.data.mean()), (x,), bwd)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    def bwd(g):
        return (g.reshape(x.shape),)

    return _record(x.data.reshape(shape), (x,), bwd)


def column(x: Tensor, k: int) -> Tensor:
    """Column k of a 2-D tensor; gradient scatters back into that column."""
    if x.ndim != 2:
        raise ShapeError(f"column: need 2-D tensor, got shape {x.shape}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, k] = g
        return (gx,)

    return _record(x.data[:, k].copy(), (x,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis of NCHW tensors."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels: need 4-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} disagree off-channel")
    ca = a.shape[1]

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return _record(np.concatenate([a.data, b.data], axis=1), (a, b), bwd)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("upsample_nearest2x: need NCHW tensor")
    n, c, h, w = x.shape
    y = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(y, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization, pooling, linear


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, train: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over an NCHW tensor.

    Train mode normalizes by batch statistics and updates the running
    buffers in place (exponential moving average, unbiased variance for the
    running estimate). Eval mode normalizes by the running buffers.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: need NCHW tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must be ({c},)")
    axes = (0, 2, 3)
    if train:
        if n < 2:
            raise DegenerateBatchError(f"batch_norm: train mode needs batch >= 2, got {n}")
        m = n * h * w
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * ivar[None, :, None, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def bwd(g):
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            gx = None
            if x.requires_grad:
                coef = (gamma.data * ivar / m)[None, :, None, None]
                gx = coef * (m * g - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
            return gx, dgamma if gamma.requires_grad else None, dbeta if beta.requires_grad else None

        return _record(out, (x, gamma, beta), bwd)

    ivar = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean[None, :, None, None]) * ivar[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd_eval(g):
        gx = g * (gamma.data * ivar)[None, :, None, None] if x.requires_grad else None
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        return gx, dgamma, dbeta

    return _record(out, (x, gamma, beta), bwd_eval)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of an NCHW tensor, giving N x C."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: need NCHW tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, x.shape).copy(),)

    return _record(x.data.mean(axis=(2, 3)), (x,), bwd)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias for x of shape N x D, weight D x M, bias M."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"fully_connected: need 2-D x and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected: inner dims {x.shape[1]} and {weight.shape[0]} differ")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"fully_connected: bias shape {bias.shape}, expected ({weight.shape[1]},)")
    needs = (x.requires_grad, weight.requires_grad, bias.requires_grad)

    def bwd(g):
        gx = g @ weight.data.T if needs[0] else None
        gw = x.data.T @ g if needs[1] else None
        gb = g.sum(axis=0) if needs[2] else None
        return gx, gw, gb

    return _record(x.data @ weight.data + bias.data, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# probabilities and losses


def softmax(x: Tensor) -> Tensor:
    """Row softmax (last axis) with max-subtraction for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record(y, (x,), bwd)


def _check_one_hot(q: np.ndarray) -> None:
    if not np.all((q == 0.0) | (q == 1.0)) or not np.all(q.sum(axis=-1) == 1.0):
        raise LabelError("cross_entropy: q is not one-hot")


def cross_entropy(p: Tensor, q: np.ndarray) -> Tensor:
    """-sum_k log(p_k) q_k for one-hot q; rows averaged when p is 2-D.

    ``p`` holds probabilities (post-softmax); entries are clamped at
    ``LOG_FLOOR`` before the log.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != p.shape:
        raise ShapeError(f"cross_entropy: p shape {p.shape}, q shape {q.shape}")
    _check_one_hot(q)
    pc = np.maximum(p.data, LOG_FLOOR)
    per_row = -(np.log(pc) * q).sum(axis=-1)
    n_rows = per_row.size
    loss = np.asarray(per_row.mean() if p.ndim == 2 else per_row)
    mask = p.data > LOG_FLOOR

    def bwd(g):
        gp = np.where(mask, -q / pc, 0.0) * (float(g) / n_rows)
        return (gp,)

    return _record(loss, (p,), bwd)


def scale_map(f: Tensor, w: Tensor) -> Tensor:
    """Scale each sample's map by its scalar weight w_n (broadcast over CHW)."""
    if f.ndim != 4:
        raise ShapeError(f"scale_map: need NCHW map, got shape {f.shape}")
    if w.shape != (f.shape[0],):
        raise ShapeError(f"scale_map: weights shape {w.shape}, expected ({f.shape[0]},)")
    wb = w.data[:, None, None, None]

    def bwd(g):
        gf = g * wb if f.requires_grad else None
        gw = (g * f.data).sum(axis=(1, 2, 3)) if w.requires_grad else None
        return gf, gw

    return _record(f.data * wb, (f, w), bwd)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; subgradient sign(a-b)/count, zero at ties."""
    _require_same_shape(a, b, "l1_loss")
    diff = a.data - b.data
    inv = 1.0 / diff.size
    sgn = np.sign(diff)

    def bwd(g):
        ga = float(g) * inv * sgn
        return ga, -ga

    return _record(np.asarray(np.abs(diff).mean()), (a, b), bwd)
