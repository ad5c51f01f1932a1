"""Minimal dense-tensor engine with reverse-mode gradients.

Tensors wrap contiguous numpy arrays (float64 by default, float32 opt-in).
Each differentiable op records its inputs and a backward closure; calling
``backward()`` on a scalar replays the recorded graph once in reverse
topological order. Only the operations the detector needs are provided.
"""

from __future__ import annotations

import contextlib

import numpy as np

DEFAULT_DTYPE = np.float64

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible, naming the offending axis."""


class ConfigurationError(ValueError):
    """Raised for structurally invalid op configurations (e.g. Kt > T in valid mode)."""


class NumericDomainError(ValueError):
    """Raised when a numeric precondition is violated (e.g. nonpositive sigma)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph machinery -----------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar-valued root")
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # free the closure so saved activations can be collected
            node._backward = None
            node._parents = ()

    def _accumulate(self, g):
        if not (self.requires_grad or self._parents):
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        return mul(self, power(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _result(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ops ---------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _result(data, (a, b), backward)


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward)


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    data = a.data**p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _result(data, (a,), backward)


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _result(data, (a,), backward)


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _result(data, (a,), backward)


def sqrt(a):
    return power(a, 0.5)


def sigmoid(a):
    a = as_tensor(a)
    data = _sigmoid_np(a.data)

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _result(data, (a,), backward)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a):
    """x * sigmoid(x); the smooth nonlinearity used throughout the model."""
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    data = a.data * s

    def backward(g):
        a._accumulate(g * (s + a.data * s * (1.0 - s)))

    return _result(data, (a,), backward)


def softplus(a):
    """log(1 + exp(x)) computed stably; building block for BCE-with-logits."""
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def backward(g):
        a._accumulate(g * _sigmoid_np(a.data))

    return _result(data, (a,), backward)


def maximum(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    data = np.maximum(a.data, b.data)
    mask = (a.data >= b.data).astype(a.dtype)

    def backward(g):
        a._accumulate(_unbroadcast(g * mask, a.shape))
        b._accumulate(_unbroadcast(g * (1.0 - mask), b.shape))

    return _result(data, (a, b), backward)


def minimum(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    data = np.minimum(a.data, b.data)
    mask = (a.data <= b.data).astype(a.dtype)

    def backward(g):
        a._accumulate(_unbroadcast(g * mask, a.shape))
        b._accumulate(_unbroadcast(g * (1.0 - mask), b.shape))

    return _result(data, (a, b), backward)


def relu(a):
    return maximum(a, as_tensor(np.zeros((), dtype=a.dtype)))


# -- reductions and shape ops ------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, in_shape).copy())
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, in_shape).copy())

    return _result(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    in_shape = a.shape
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(in_shape))

    return _result(data, (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _result(data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return _result(data, tuple(tensors), backward)


def take(a, idx):
    """Basic indexing with slices/ints/index arrays; backward scatter-adds."""
    a = as_tensor(a)
    data = a.data[idx]
    in_shape = a.shape
    fancy = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        buf = np.zeros(in_shape, dtype=g.dtype)
        if fancy:
            np.add.at(buf, idx, g)
        else:
            # scalar tensors carry shape (1,); the indexed slot may be 0-d
            buf[idx] += np.reshape(g, np.shape(buf[idx]))
        a._accumulate(buf)

    return _result(data, (a,), backward)


def pad_zero(a, pad_width):
    """Zero padding; pad_width is the numpy-style per-axis (before, after) list."""
    a = as_tensor(a)
    data = np.pad(a.data, pad_width)
    slices = tuple(slice(b, b + s) for (b, _), s in zip(pad_width, a.shape))

    def backward(g):
        a._accumulate(g[slices])

    return _result(data, (a,), backward)


def roll(a, shifts, axes):
    a = as_tensor(a)
    shifts = tuple(shifts)
    axes = tuple(axes)
    data = np.roll(a.data, shifts, axis=axes)

    def backward(g):
        a._accumulate(np.roll(g, tuple(-s for s in shifts), axis=axes))

    return _result(data, (a,), backward)


def broadcast_to(a, shape):
    a = as_tensor(a)
    data = np.broadcast_to(a.data, shape).copy()
    in_shape = a.shape

    def backward(g):
        a._accumulate(_unbroadcast(g, in_shape))

    return _result(data, (a,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner-dimension mismatch: {a.shape[-1]} (axis {a.ndim - 1} of a) "
            f"vs {b.shape[-2]} (axis {b.ndim - 2} of b)"
        )
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        a._accumulate(_unbroadcast(ga, a.shape))
        b._accumulate(_unbroadcast(gb, b.shape))

    return _result(data, (a, b), backward)


def linear(x, weight, bias=None):
    """Affine map on the last axis: y[..., o] = sum_i x[..., i] * W[o, i] + b[o]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear inner-dimension mismatch: input last axis {x.shape[-1]} "
            f"vs weight axis 1 {weight.shape[1]}"
        )
    out = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        out = add(out, bias)
    return out


def softmax_last(a):
    """Softmax over the last axis, stabilized by max subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        a._accumulate(data * (g - dot))

    return _result(data, (a,), backward)


# -- convolution -------------------------------------------------------------

TEMPORAL_MODES = ("causal_replicate", "valid", "same_zero")


def _check_conv_args(in_shape, w_shape, temporal_mode):
    n, c_in, t, h, w = in_shape
    c_out, wc_in, kt, kh, kw = w_shape
    if wc_in != c_in:
        raise ShapeError(f"conv3d channel mismatch: input C_in={c_in} (axis 1) vs weight C_in={wc_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"spatial kernel must be odd, got ({kh}, {kw})")
    if temporal_mode not in TEMPORAL_MODES:
        raise ConfigurationError(f"unknown temporal_mode {temporal_mode!r}")
    if temporal_mode == "valid" and kt > t:
        raise ConfigurationError(f"temporal kernel Kt={kt} exceeds T={t} in valid mode")


def conv3d(x, weight, bias=None, spatial_stride=1, spatial_pad=0, temporal_mode="causal_replicate"):
    """3D cross-correlation over [N, C_in, T, H, W].

    Temporal modes: ``causal_replicate`` keeps T' = T, each output step t
    aggregating input frames [t-Kt+1, t] with out-of-range history replaced
    by frame 0; ``valid`` gives T' = T - Kt + 1; ``same_zero`` zero-pads
    (Kt-1)//2 frames on both sides.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_conv_args(x.shape, weight.shape, temporal_mode)
    kt = weight.shape[2]
    data, cache = _conv3d_forward(
        x.data, weight.data, bias.data if bias is not None else None,
        spatial_stride, spatial_pad, temporal_mode,
    )
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx, gw, gb = _conv3d_backward(g, cache)
        x._accumulate(gx)
        weight._accumulate(gw)
        if bias is not None:
            bias._accumulate(gb)

    del kt
    return _result(data, parents, backward)


def _pad_input_3d(x, kt, spatial_pad, temporal_mode):
    if temporal_mode == "causal_replicate":
        front = np.repeat(x[:, :, :1], kt - 1, axis=2)
        x = np.concatenate([front, x], axis=2) if kt > 1 else x
    elif temporal_mode == "same_zero":
        pt = (kt - 1) // 2
        x = np.pad(x, ((0, 0), (0, 0), (pt, kt - 1 - pt), (0, 0), (0, 0)))
    if spatial_pad:
        p = spatial_pad
        x = np.pad(x, ((0, 0), (0, 0), (0, 0), (p, p), (p, p)))
    return x


def _conv3d_forward(x, w, b, stride, pad, temporal_mode):
    n, c_in, t, h, wd = x.shape
    c_out, _, kt, kh, kw = w.shape
    xp = _pad_input_3d(x, kt, pad, temporal_mode)
    view = np.lib.stride_tricks.sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
    view = view[:, :, :, ::stride, ::stride]  # [N, C_in, T', H', W', kt, kh, kw]
    tp, hp, wp = view.shape[2:5]
    col = np.ascontiguousarray(view.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(
        n * tp * hp * wp, c_in * kt * kh * kw
    )
    wmat = w.reshape(c_out, -1)
    out = col @ wmat.T
    if b is not None:
        out += b
    out = out.reshape(n, tp, hp, wp, c_out).transpose(0, 4, 1, 2, 3)
    cache = (x.shape, xp.shape, w, col, stride, pad, temporal_mode)
    return np.ascontiguousarray(out), cache


def _conv3d_backward(g, cache):
    x_shape, xp_shape, w, col, stride, pad, temporal_mode = cache
    n, c_in, t, h, wd = x_shape
    c_out, _, kt, kh, kw = w.shape
    tp, hp, wp = g.shape[2:]
    gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, c_out)
    gw = (gmat.T @ col).reshape(w.shape)
    gb = gmat.sum(axis=0)
    gcol = gmat @ w.reshape(c_out, -1)
    gcol = gcol.reshape(n, tp, hp, wp, c_in, kt, kh, kw).transpose(0, 4, 1, 2, 3, 5, 6, 7)
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    for it in range(kt):
        for ih in range(kh):
            for iw in range(kw):
                gxp[
                    :, :, it : it + tp,
                    ih : ih + (hp - 1) * stride + 1 : stride,
                    iw : iw + (wp - 1) * stride + 1 : stride,
                ] += gcol[:, :, :, :, :, it, ih, iw]
    # undo spatial zero padding
    if pad:
        gxp = gxp[:, :, :, pad:-pad, pad:-pad]
    # undo temporal padding
    if temporal_mode == "causal_replicate" and kt > 1:
        gx = gxp[:, :, kt - 1 :].copy()
        gx[:, :, 0] += gxp[:, :, : kt - 1].sum(axis=2)
    elif temporal_mode == "same_zero":
        pt = (kt - 1) // 2
        gx = gxp[:, :, pt : pt + t]
    else:
        gx = gxp
    return np.ascontiguousarray(gx), gw, gb


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """2D cross-correlation over [N, C_in, H, W]; conv3d with Kt=1 collapsed."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.ndim}-D/{weight.ndim}-D")
    x5 = reshape(x, (x.shape[0], x.shape[1], 1, x.shape[2], x.shape[3]))
    w5 = reshape(weight, (weight.shape[0], weight.shape[1], 1, weight.shape[2], weight.shape[3]))
    out = conv3d(x5, w5, bias=bias, spatial_stride=stride, spatial_pad=pad, temporal_mode="valid")
    return reshape(out, (out.shape[0], out.shape[1], out.shape[3], out.shape[4]))


# -- batch norm --------------------------------------------------------------


class BatchNormState:
    """Running statistics + affine parameters for one BN layer."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=DEFAULT_DTYPE):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mu = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    @property
    def channels(self):
        return self.gamma.shape[0]


def batch_norm(x, bn, mode="train", channel_axis=1):
    """Per-channel normalization.

    Train mode normalizes with batch statistics over all non-channel axes and
    updates running stats in place with ``bn.momentum``; infer mode applies
    gamma * (x - mu) / sqrt(var + eps) + beta from the running stats.
    """
    x = as_tensor(x)
    c = x.shape[channel_axis]
    if c != bn.channels:
        raise ShapeError(f"batch_norm channel mismatch: input axis {channel_axis} has {c}, params have {bn.channels}")
    bshape = [1] * x.ndim
    bshape[channel_axis] = c
    bshape = tuple(bshape)
    axes = tuple(i for i in range(x.ndim) if i != channel_axis)

    if mode == "infer":
        var = bn.running_var
        if np.any(var + bn.eps <= 0):
            raise NumericDomainError("nonpositive variance in infer-mode batch_norm")
        sigma = np.sqrt(var + bn.eps)
        scale = reshape(mul(bn.gamma, 1.0 / sigma), bshape)
        shift = reshape(add(bn.beta, mul(Tensor(-bn.running_mu / sigma), bn.gamma)), bshape)
        return add(mul(x, scale), shift)
    if mode != "train":
        raise ConfigurationError(f"unknown batch_norm mode {mode!r}")

    mu = tmean(x, axis=axes, keepdims=True)
    centered = x - mu
    var = tmean(mul(centered, centered), axis=axes, keepdims=True)
    inv = power(add(var, bn.eps), -0.5)
    xhat = mul(centered, inv)
    m = bn.momentum
    bn.running_mu = (1 - m) * bn.running_mu + m * mu.data.reshape(c)
    # unbiased variance for the running estimate, matching common practice
    nelem = x.size // c
    correction = nelem / max(nelem - 1, 1)
    bn.running_var = (1 - m) * bn.running_var + m * var.data.reshape(c) * correction
    return add(mul(xhat, reshape(bn.gamma, bshape)), reshape(bn.beta, bshape))


# -- misc structured ops -----------------------------------------------------


def upsample2x(x):
    """Nearest-neighbor 2x spatial upsampling of [N, C, H, W]."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _result(data, (x,), backward)


def avgpool2_spatial(x):
    """2x2 average pooling on the trailing two axes (even extents required)."""
    x = as_tensor(x)
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even spatial extents, got ({h}, {w})")
    r = reshape(x, (*lead, h // 2, 2, w // 2, 2))
    return tmean(r, axis=(x.ndim - 1, x.ndim + 1))


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy on raw logits: softplus(x) - x*y."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=logits.dtype)
    return softplus(logits) - mul(logits, targets)


# -- gradient verification ---------------------------------------------------


def grad_check(loss_fn, params, step=1e-5, max_entries=None, rng=None, max_total=None):
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` rebuilds the graph and returns the scalar loss; ``params`` is
    a list of leaf Tensors. Checks every entry, ``max_entries`` randomly
    sampled entries per parameter, or ``max_total`` entries spread over all
    parameters (at least one per parameter when the budget allows). Returns
    the max relative error |analytic - cd| / max(|analytic|, |cd|, 1e-8).
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if loss.size != 1:
        raise ValueError("grad_check requires a scalar loss")
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    rng = rng or np.random.default_rng(0)
    per_param = [max_entries] * len(params)
    if max_total is not None:
        base, extra = divmod(max_total, len(params))
        order = rng.permutation(len(params))
        per_param = [base + (1 if k < extra else 0) for k in range(len(params))]
        per_param = [per_param[np.where(order == i)[0][0]] for i in range(len(params))]
    worst = 0.0
    for p, g, budget in zip(params, analytic, per_param):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if budget is not None and flat.size > budget:
            idxs = rng.choice(flat.size, size=budget, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                hi = loss_fn().item()
            flat[i] = orig - step
            with no_grad():
                lo = loss_fn().item()
            flat[i] = orig
            cd = (hi - lo) / (2 * step)
            an = g.reshape(-1)[i]
            rel = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
            worst = max(worst, rel)
    return worst
