"""Differentiable primitives.

Every function takes and returns :class:`TapeTensor`; auxiliary non-learnable
arguments (indices, masks, strides) are plain numpy/python values. Shapes are
checked explicitly — there is no broadcasting beyond the documented cases.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import ShapeError, TapeTensor, record, result_of


def _same_shape(a: TapeTensor, b: TapeTensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: TapeTensor, b: TapeTensor) -> TapeTensor:
    _same_shape(a, b, "add")
    out = result_of([a, b], a.data + b.data)
    record(out, [a, b], lambda g: (g, g))
    return out


def sub(a: TapeTensor, b: TapeTensor) -> TapeTensor:
    _same_shape(a, b, "sub")
    out = result_of([a, b], a.data - b.data)
    record(out, [a, b], lambda g: (g, -g))
    return out


def mul(a: TapeTensor, b: TapeTensor) -> TapeTensor:
    _same_shape(a, b, "mul")
    out = result_of([a, b], a.data * b.data)
    ad, bd = a.data, b.data
    record(out, [a, b], lambda g: (g * bd, g * ad))
    return out


def div(a: TapeTensor, b: TapeTensor) -> TapeTensor:
    _same_shape(a, b, "div")
    out = result_of([a, b], a.data / b.data)
    ad, bd = a.data, b.data
    record(out, [a, b], lambda g: (g / bd, -g * ad / (bd * bd)))
    return out


def scale(x: TapeTensor, c: float) -> TapeTensor:
    c = float(c)
    out = result_of([x], x.data * c)
    record(out, [x], lambda g: (g * c,))
    return out


def scale_last(x: TapeTensor, s: TapeTensor) -> TapeTensor:
    """Multiply ``x[..., C]`` by a per-entry scalar ``s`` of shape ``x.shape[:-1]``."""
    if s.shape != x.shape[:-1]:
        raise ShapeError(f"scale_last: scalar shape {s.shape} must equal {x.shape[:-1]}")
    out = result_of([x, s], x.data * s.data[..., None])
    xd, sd = x.data, s.data
    record(out, [x, s], lambda g: (g * sd[..., None], np.sum(g * xd, axis=-1)))
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: TapeTensor) -> TapeTensor:
    out = result_of([x], np.maximum(x.data, 0.0))
    mask = x.data > 0.0
    record(out, [x], lambda g: (g * mask,))
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: TapeTensor) -> TapeTensor:
    """Smooth gaussian-error linear unit (tanh approximation)."""
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd ** 3)
    t = np.tanh(inner)
    out = result_of([x], 0.5 * xd * (1.0 + t))

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner),)

    record(out, [x], backward)
    return out


def sigmoid(x: TapeTensor) -> TapeTensor:
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    s[~pos] = e / (1.0 + e)
    out = result_of([x], s)
    record(out, [x], lambda g: (g * s * (1.0 - s),))
    return out


def exp(x: TapeTensor) -> TapeTensor:
    e = np.exp(x.data)
    out = result_of([x], e)
    record(out, [x], lambda g: (g * e,))
    return out


def softmax(x: TapeTensor, axis: int = -1) -> TapeTensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)
    out = result_of([x], s)

    def backward(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return (s * (g - dot),)

    record(out, [x], backward)
    return out


def masked_softmax(x: TapeTensor, valid: np.ndarray, axis: int = -1) -> TapeTensor:
    """Softmax restricted to ``valid`` entries; invalid entries get weight 0.
    Rows with no valid entry produce an all-zero row (and zero gradient)."""
    if valid.shape != x.shape:
        raise ShapeError(f"masked_softmax: mask shape {valid.shape} vs {x.shape}")
    valid = valid.astype(bool)
    neg = np.where(valid, x.data, -np.inf)
    mx = np.max(neg, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)  # rows with no valid entry
    e = np.where(valid, np.exp(neg - mx), 0.0)
    denom = np.sum(e, axis=axis, keepdims=True)
    s = np.where(denom > 0.0, e / np.where(denom > 0.0, denom, 1.0), 0.0)
    out = result_of([x], s)

    def backward(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return (np.where(valid, s * (g - dot), 0.0),)

    record(out, [x], backward)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: TapeTensor, b: TapeTensor) -> TapeTensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = result_of([a, b], a.data @ b.data)
    ad, bd = a.data, b.data
    record(out, [a, b], lambda g: (g @ bd.T, ad.T @ g))
    return out


def linear(x: TapeTensor, w: TapeTensor, b: TapeTensor) -> TapeTensor:
    """y = x @ w + b for x[n, in], w[in, out], b[out]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = result_of([x, w, b], x.data @ w.data + b.data)
    xd, wd = x.data, w.data
    record(out, [x, w, b], lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))
    return out


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(x: TapeTensor, axis: int | None = None, keepdims: bool = False) -> TapeTensor:
    out = result_of([x], np.sum(x.data, axis=axis, keepdims=keepdims))
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    record(out, [x], backward)
    return out


def mean(x: TapeTensor) -> TapeTensor:
    return scale(tsum(x), 1.0 / x.size)


def cumsum(x: TapeTensor, axis: int = -1, exclusive: bool = False) -> TapeTensor:
    """Running sum along ``axis``; ``exclusive`` shifts by one (first entry 0)."""
    cs = np.cumsum(x.data, axis=axis)
    if exclusive:
        cs = np.roll(cs, 1, axis=axis)
        idx = [slice(None)] * x.ndim
        idx[axis] = 0
        cs[tuple(idx)] = 0.0
    out = result_of([x], cs)

    def backward(g):
        if exclusive:
            gg = np.roll(g, -1, axis=axis)
            idx = [slice(None)] * g.ndim
            idx[axis] = -1
            gg[tuple(idx)] = 0.0
        else:
            gg = g
        rev = np.flip(np.cumsum(np.flip(gg, axis=axis), axis=axis), axis=axis)
        return (rev,)

    record(out, [x], backward)
    return out


def concat(tensors: list[TapeTensor], axis: int = 0) -> TapeTensor:
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    out = result_of(tensors, np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def reshape(x: TapeTensor, shape) -> TapeTensor:
    out = result_of([x], x.data.reshape(shape))
    old = x.shape
    record(out, [x], lambda g: (g.reshape(old),))
    return out


def permute(x: TapeTensor, axes) -> TapeTensor:
    out = result_of([x], np.transpose(x.data, axes))
    inv = np.argsort(axes)
    record(out, [x], lambda g: (np.transpose(g, inv),))
    return out


def slice_axis(x: TapeTensor, axis: int, start: int, stop: int) -> TapeTensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = result_of([x], x.data[idx].copy())
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    record(out, [x], backward)
    return out


def gather_rows(x: TapeTensor, idx: np.ndarray) -> TapeTensor:
    """out[i] = x[idx[i]] along the leading axis; gradients scatter-add back."""
    idx = np.asarray(idx, dtype=np.intp)
    out = result_of([x], x.data[idx])
    n = x.shape[0]
    tail = x.shape[1:]

    def backward(g):
        dx = np.zeros((n,) + tail, dtype=g.dtype)
        if g.ndim == 2:  # fast path: per-channel bincount
            for c in range(g.shape[1]):
                dx[:, c] = np.bincount(idx, weights=g[:, c], minlength=n)
        else:
            np.add.at(dx, idx, g)
        return (dx,)

    record(out, [x], backward)
    return out


# ---------------------------------------------------------------------------
# spatial operations


def bilinear_sample2d(grid: TapeTensor, coords: TapeTensor):
    """Sample ``grid[C, H, W]`` at ``coords[n, 2]`` = (u, v) in [-1, 1].

    -1/+1 map to the centers of the border cells (u along W, v along H).
    Out-of-range coordinates are clamped; the returned boolean mask flags
    which queries were inside the grid. Gradients flow to grid values and to
    the coordinates (zero positional gradient where clamping was active).
    """
    if grid.ndim != 3:
        raise ShapeError(f"bilinear_sample2d: grid must be [C,H,W], got {grid.shape}")
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"bilinear_sample2d: coords must be [n,2], got {coords.shape}")
    C, H, W = grid.shape
    u = coords.data[:, 0]
    v = coords.data[:, 1]
    inside = (u >= -1.0) & (u <= 1.0) & (v >= -1.0) & (v <= 1.0)
    uc = np.clip(u, -1.0, 1.0)
    vc = np.clip(v, -1.0, 1.0)

    # continuous cell index; border cell centers sit at indices 0 and size-1
    fx = (uc + 1.0) * 0.5 * (W - 1)
    fy = (vc + 1.0) * 0.5 * (H - 1)
    x0 = np.clip(np.floor(fx).astype(np.intp), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(fy).astype(np.intp), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = fx - x0
    ay = fy - y0

    g00 = grid.data[:, y0, x0]  # [C, n]
    g01 = grid.data[:, y0, x1]
    g10 = grid.data[:, y1, x0]
    g11 = grid.data[:, y1, x1]
    # interpolation weights follow the grid dtype so float32 models stay float32
    ax = ax.astype(grid.data.dtype)
    ay = ay.astype(grid.data.dtype)
    w00 = (1 - ax) * (1 - ay)
    w01 = ax * (1 - ay)
    w10 = (1 - ax) * ay
    w11 = ax * ay
    vals = (g00 * w00 + g01 * w01 + g10 * w10 + g11 * w11).T  # [n, C]
    out = result_of([grid, coords], np.ascontiguousarray(vals))

    du_scale = 0.5 * (W - 1)
    dv_scale = 0.5 * (H - 1)
    # clamped queries get no positional gradient
    live_u = inside | ((u > -1.0) & (u < 1.0))
    live_v = live_u
    open_u = (u >= -1.0) & (u <= 1.0)

    def backward(g):
        gT = g.T  # [C, n]
        grads_grid = None
        grads_coords = None
        if grid.requires_grad:
            flat = np.zeros(C * H * W, dtype=g.dtype)
            base = np.arange(C)[:, None] * (H * W)
            for wgt, yy, xx in ((w00, y0, x0), (w01, y0, x1), (w10, y1, x0), (w11, y1, x1)):
                idx = (base + yy[None, :] * W + xx[None, :]).ravel()
                flat += np.bincount(idx, weights=(gT * wgt[None, :]).ravel(), minlength=flat.size)
            grads_grid = flat.reshape(C, H, W)
        if coords.requires_grad:
            dfx = np.sum(gT * ((g01 - g00) * (1 - ay)[None, :] + (g11 - g10) * ay[None, :]), axis=0)
            dfy = np.sum(gT * ((g10 - g00) * (1 - ax)[None, :] + (g11 - g01) * ax[None, :]), axis=0)
            du = np.where(open_u, dfx * du_scale, 0.0)
            dv = np.where((v >= -1.0) & (v <= 1.0), dfy * dv_scale, 0.0)
            grads_coords = np.stack([du, dv], axis=1)
        return (grads_grid, grads_coords)

    record(out, [grid, coords], backward)
    return out, inside


def conv2d(x: TapeTensor, kernel: TapeTensor, stride: int = 1, padding: int = 0) -> TapeTensor:
    """Cross-correlate ``x[C_in, H, W]`` with ``kernel[C_out, C_in, kh, kw]``."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: need x[C,H,W] and kernel[O,C,kh,kw], got {x.shape}, {kernel.shape}")
    C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"conv2d: kernel channels {Ck} do not match input channels {C}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}"
        )
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    pad = np.zeros((C, Hp, Wp), dtype=x.data.dtype)
    pad[:, padding:padding + H, padding:padding + W] = x.data

    # flat gather indices of every patch element on the padded input
    oy = (np.arange(Ho) * stride)[:, None, None, None]
    ox = (np.arange(Wo) * stride)[None, :, None, None]
    ky = np.arange(kh)[None, None, :, None]
    kx = np.arange(kw)[None, None, None, :]
    spatial = ((oy + ky) * Wp + (ox + kx)).reshape(Ho * Wo, kh * kw)
    chan = (np.arange(C) * (Hp * Wp))[None, :, None]
    idx = (spatial[:, None, :] + chan).reshape(Ho * Wo, C * kh * kw)

    cols = pad.reshape(-1)[idx]  # [Ho*Wo, C*kh*kw]
    kmat = kernel.data.reshape(O, C * kh * kw)
    out_data = (cols @ kmat.T).T.reshape(O, Ho, Wo)
    out = result_of([x, kernel], np.ascontiguousarray(out_data))

    def backward(g):
        gmat = g.reshape(O, Ho * Wo).T  # [Ho*Wo, O]
        gx = None
        gk = None
        if kernel.requires_grad:
            gk = (gmat.T @ cols).reshape(O, C, kh, kw)
        if x.requires_grad:
            dcols = gmat @ kmat  # [Ho*Wo, C*kh*kw]
            flat = np.bincount(idx.ravel(), weights=dcols.ravel(), minlength=C * Hp * Wp)
            gx = flat.reshape(C, Hp, Wp)[:, padding:padding + H, padding:padding + W]
            gx = np.ascontiguousarray(gx)
        return (gx, gk)

    record(out, [x, kernel], backward)
    return out


def add_channel_bias(x: TapeTensor, b: TapeTensor) -> TapeTensor:
    """Add a per-channel bias ``b[C]`` to a feature map ``x[C, H, W]``."""
    if x.ndim != 3 or b.shape != (x.shape[0],):
        raise ShapeError(f"add_channel_bias: bias {b.shape} does not match map {x.shape}")
    out = result_of([x, b], x.data + b.data[:, None, None])
    record(out, [x, b], lambda g: (g, g.sum(axis=(1, 2))))
    return out


def upsample2x(x: TapeTensor) -> TapeTensor:
    """Nearest-neighbour 2x upsampling of ``x[C, H, W]``."""
    if x.ndim != 3:
        raise ShapeError(f"upsample2x: need [C,H,W], got {x.shape}")
    out = result_of([x], np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2))
    C, H, W = x.shape

    def backward(g):
        return (g.reshape(C, H, 2, W, 2).sum(axis=(2, 4)),)

    record(out, [x], backward)
    return out


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one normalization layer."""

    gamma: TapeTensor
    beta: TapeTensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5,
               dtype=np.float64) -> "BatchNormState":
        return cls(
            gamma=TapeTensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=TapeTensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def batch_norm(x: TapeTensor, state: BatchNormState, training: bool) -> TapeTensor:
    """Per-channel normalization of ``x[n, C]`` with learnable scale/shift.

    Training mode normalizes by batch statistics and updates the running
    estimates; eval mode uses the stored running statistics.
    """
    if x.ndim != 2:
        raise ShapeError(f"batch_norm: need [n,C], got {x.shape}")
    n, C = x.shape
    if state.gamma.shape != (C,):
        raise ShapeError(f"batch_norm: state has {state.gamma.shape[0]} channels, input has {C}")
    if n < 1:
        raise ShapeError("batch_norm: empty batch")
    gamma, beta, eps = state.gamma, state.beta, state.eps

    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)  # biased, used for normalization
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        m = state.momentum
        unbiased = var * n / (n - 1) if n > 1 else var
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * unbiased
    else:
        mu = state.running_mean
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - mu) * inv

    out = result_of([x, gamma, beta], xhat * gamma.data + beta.data)
    gd = gamma.data

    def backward(g):
        dgamma = np.sum(g * xhat, axis=0) if gamma.requires_grad else None
        dbeta = np.sum(g, axis=0) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            gx = g * gd
            if training:
                dx = inv / n * (n * gx - gx.sum(axis=0) - xhat * np.sum(gx * xhat, axis=0))
            else:
                dx = gx * inv
        return (dx, dgamma, dbeta)

    record(out, [x, gamma, beta], backward)
    return out
