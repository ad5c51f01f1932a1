"""Windowed self- and cross-attention over spatio-temporal feature volumes.

Feature maps [T, C, H, W] are cut into non-overlapping P x M x M windows
(zero-padded to fit, optionally cyclically shifted by half a window) and
attention runs independently per window with a learnable relative positional
bias. Cross-attention draws queries from the temporal-difference stream, keys
from the 3D-convolution stream, and values from the 2D spatial stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, ShapeError, Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class WindowSpec:
    p: int  # temporal window size
    m: int  # spatial window size
    shifted: bool = False

    @property
    def tokens_per_window(self):
        return self.p * self.m * self.m

    @property
    def shift_offsets(self):
        if not self.shifted:
            return (0, 0, 0)
        return (self.p // 2, self.m // 2, self.m // 2)


def _ceil_to(x, mult):
    return ((x + mult - 1) // mult) * mult


def window_partition(x, spec: WindowSpec):
    """Split [T, C, H, W] into (tokens [nW, P*M*M, C], meta).

    Non-divisible extents are zero padded; the shifted variant cyclically
    rolls the volume by half a window first. ``meta`` carries everything
    :func:`window_reverse` needs plus an additive attention mask (or None)
    that blocks pad tokens and cross-boundary pairs in shifted windows.
    """
    t, c, h, w = x.shape
    p, m = spec.p, spec.m
    tp, hp, wp = _ceil_to(t, p), _ceil_to(h, m), _ceil_to(w, m)
    pads = (tp - t, hp - h, wp - w)
    if any(pads):
        x = T.pad_zero(x, ((0, pads[0]), (0, 0), (0, pads[1]), (0, pads[2])))
    st, sh, sw = spec.shift_offsets
    if spec.shifted:
        x = T.roll(x, (-st, -sh, -sw), (0, 2, 3))
    # [T, C, H, W] -> [nT, P, nH, M, nW, M, C] -> windows x tokens x C
    nt, nh, nw = tp // p, hp // m, wp // m
    xt = T.transpose(x, (0, 2, 3, 1))  # [T, H, W, C]
    xt = T.reshape(xt, (nt, p, nh, m, nw, m, c))
    xt = T.transpose(xt, (0, 2, 4, 1, 3, 5, 6))
    tokens = T.reshape(xt, (nt * nh * nw, p * m * m, c))
    mask = _attention_mask(spec, (t, h, w), (tp, hp, wp)) if (any(pads) or spec.shifted) else None
    meta = {
        "spec": spec,
        "orig": (t, c, h, w),
        "padded": (tp, hp, wp),
        "counts": (nt, nh, nw),
        "mask": mask,
    }
    return tokens, meta


def window_reverse(tokens, meta):
    """Exact inverse of :func:`window_partition`, including unshift and unpad."""
    spec = meta["spec"]
    t, c, h, w = meta["orig"]
    tp, hp, wp = meta["padded"]
    nt, nh, nw = meta["counts"]
    p, m = spec.p, spec.m
    if tokens.shape != (nt * nh * nw, p * m * m, c):
        raise ShapeError(f"tokens shape {tokens.shape} does not match partition meta")
    xt = T.reshape(tokens, (nt, nh, nw, p, m, m, c))
    xt = T.transpose(xt, (0, 3, 1, 4, 2, 5, 6))
    xt = T.reshape(xt, (tp, hp, wp, c))
    x = T.transpose(xt, (0, 3, 1, 2))  # [T, C, H, W]
    if spec.shifted:
        st, sh, sw = spec.shift_offsets
        x = T.roll(x, (st, sh, sw), (0, 2, 3))
    if (tp, hp, wp) != (t, h, w):
        x = x[:t, :, :h, :w]
    return x


def _region_ids(size, win, shift, valid):
    """Per-cell region labels along one axis (pre-roll coordinates)."""
    ids = np.zeros(size, dtype=np.int64)
    if shift:
        # swin-style three segments so wrapped cells land in distinct regions
        ids[-win:] = 1
        ids[-shift:] = 2
    ids[valid:] = 3  # padding region
    return ids


def _attention_mask(spec, orig_thw, padded_thw):
    """Additive [nW, L, L] mask: 0 within a region, MASK_VALUE across regions."""
    p, m = spec.p, spec.m
    st, sh, sw = spec.shift_offsets
    axes = []
    for size, win, shift, valid in zip(padded_thw, (p, m, m), (st, sh, sw), orig_thw):
        axes.append(_region_ids(size, win, shift, valid))
    vol = (axes[0][:, None, None] * 16 + axes[1][None, :, None] * 4 + axes[2][None, None, :])
    if spec.shifted:
        vol = np.roll(vol, (-st, -sh, -sw), axis=(0, 1, 2))
    tp, hp, wp = padded_thw
    nt, nh, nw = tp // p, hp // m, wp // m
    vol = vol.reshape(nt, p, nh, m, nw, m).transpose(0, 2, 4, 1, 3, 5).reshape(nt * nh * nw, p * m * m)
    mask = np.where(vol[:, :, None] != vol[:, None, :], MASK_VALUE, 0.0)
    return mask


# -- parameters --------------------------------------------------------------


def relative_index_map(p, m):
    """[L, L] map from token-pair coordinate offsets into bias-table rows."""
    coords = np.stack(np.meshgrid(np.arange(p), np.arange(m), np.arange(m), indexing="ij"), axis=-1)
    coords = coords.reshape(-1, 3)
    delta = coords[:, None, :] - coords[None, :, :]  # [L, L, 3]
    dt = delta[..., 0] + p - 1
    dh = delta[..., 1] + m - 1
    dw = delta[..., 2] + m - 1
    return dt * (2 * m - 1) ** 2 + dh * (2 * m - 1) + dw


def bias_table_rows(p, m):
    return (2 * p - 1) * (2 * m - 1) * (2 * m - 1)


@dataclass
class AttentionParams:
    """Projection weights, output projection, and the relative bias table."""

    d: int
    n_h: int
    p: int
    m: int
    weights: dict = field(default_factory=dict)
    index_map: np.ndarray = None

    @classmethod
    def init(cls, d, n_h, p, m, rng=None, zero_out_proj=False, with_ln=True, dtype=np.float64):
        if d % n_h:
            raise ConfigurationError(f"embed dim {d} not divisible by head count {n_h}")
        rng = rng or np.random.default_rng(0)
        s = 1.0 / np.sqrt(d)

        def w(shape, zero=False):
            data = np.zeros(shape, dtype=dtype) if zero else rng.uniform(-s, s, size=shape).astype(dtype)
            return Tensor(data, requires_grad=True)

        weights = {
            "wq": w((d, d)), "bq": w((d,), zero=True),
            "wk": w((d, d)),  # no key bias: softmax shift-invariance makes it a dead parameter
            "wv": w((d, d)), "bv": w((d,), zero=True),
            "wo": w((d, d), zero=zero_out_proj), "bo": w((d,), zero=True),
            "table": Tensor(np.zeros((bias_table_rows(p, m), n_h), dtype=dtype), requires_grad=True),
        }
        if with_ln:
            # pre-norm parameters for sa_block; cross-attention callers norm
            # their streams themselves and should drop these
            weights["ln_gamma"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
            weights["ln_beta"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        return cls(d=d, n_h=n_h, p=p, m=m, weights=weights, index_map=relative_index_map(p, m))

    def parameters(self):
        return list(self.weights.values())

    def state_arrays(self, prefix=""):
        return {prefix + k: v.data for k, v in self.weights.items()}

    def load_state_arrays(self, arrays, prefix=""):
        for k, v in self.weights.items():
            v.data = arrays[prefix + k].astype(v.dtype)


def relative_bias(params: AttentionParams, spec: WindowSpec):
    """Materialize the [n_h, L, L] additive bias from the learnable table."""
    if (spec.p, spec.m) != (params.p, params.m):
        raise ShapeError(f"bias table built for window {(params.p, params.m)}, got {(spec.p, spec.m)}")
    rows = params.weights["table"][params.index_map]  # [L, L, n_h]
    return T.transpose(rows, (2, 0, 1))


def layer_norm(x, gamma, beta=None, eps=1e-6):
    """Normalization over the last axis (token features); beta is optional."""
    mu = T.tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = T.tmean(T.mul(centered, centered), axis=-1, keepdims=True)
    out = T.mul(T.mul(centered, T.power(T.add(var, eps), -0.5)), gamma)
    return out if beta is None else T.add(out, beta)


def _split_heads(x, n_h):
    nw, l, d = x.shape
    x = T.reshape(x, (nw, l, n_h, d // n_h))
    return T.transpose(x, (0, 2, 1, 3))  # [nW, n_h, L, d_h]


def _merge_heads(x):
    nw, n_h, l, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (nw, l, n_h * dh))


def _attend(q_tok, k_tok, v_tok, params: AttentionParams, spec: WindowSpec, mask):
    wts = params.weights
    q = _split_heads(T.linear(q_tok, wts["wq"], wts["bq"]), params.n_h)
    k = _split_heads(T.linear(k_tok, wts["wk"]), params.n_h)
    v = _split_heads(T.linear(v_tok, wts["wv"], wts["bv"]), params.n_h)
    d_h = params.d // params.n_h
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d_h))
    scores = T.add(scores, relative_bias(params, spec))
    if mask is not None:
        scores = T.add(scores, mask[:, None, :, :])
    attn = T.softmax_last(scores)
    out = _merge_heads(T.matmul(attn, v))
    return T.linear(out, wts["wo"], wts["bo"])


def self_attention(tokens, params: AttentionParams, spec: WindowSpec, mask=None):
    """Per-window multi-head self-attention with relative positional bias."""
    return _attend(tokens, tokens, tokens, params, spec, mask)


def cross_attention(q_tokens, k_tokens, v_tokens, params: AttentionParams, spec: WindowSpec, mask=None):
    """Attention with query/key/value drawn from three different streams."""
    if not (q_tokens.shape == k_tokens.shape == v_tokens.shape):
        raise ShapeError(
            f"stream token shapes differ: {q_tokens.shape} / {k_tokens.shape} / {v_tokens.shape}"
        )
    return _attend(q_tokens, k_tokens, v_tokens, params, spec, mask)


# -- blocks over full feature volumes ----------------------------------------


def sa_block(x, params: AttentionParams, shifted):
    """Pre-norm residual self-attention pass over one [T, C, H, W] volume."""
    spec = WindowSpec(p=params.p, m=params.m, shifted=shifted)
    tokens, meta = window_partition(x, spec)
    normed = layer_norm(tokens, params.weights["ln_gamma"], params.weights["ln_beta"])
    out = self_attention(normed, params, spec, mask=meta["mask"])
    return T.add(x, window_reverse(out, meta))


@dataclass
class StageAttention:
    """One TDCSTA stage: per-stream self-attention then guided cross-attention.

    Streams are first projected to the stage dim with 1x1 convolutions, each
    stream gets a regular plus a shifted self-attention pass (residual), and
    cross-attention (query: TDC stream, key: 3D stream, value: 2D stream) with
    its own bias table produces the enhanced output, residual to the TDC
    stream.
    """

    d: int
    n_h: int
    p: int
    m: int
    projections: dict = field(default_factory=dict)  # stream -> (weight, bias)
    sa: dict = field(default_factory=dict)  # stream -> AttentionParams
    ca: AttentionParams = None
    ca_ln: dict = field(default_factory=dict)  # stream -> (gamma, beta)

    STREAMS = ("tdcf", "stf", "sf")

    @classmethod
    def init(cls, stream_channels, d, n_h, p, m, rng=None, zero_out_proj=True, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        stage = cls(d=d, n_h=n_h, p=p, m=m)
        for name in cls.STREAMS:
            c_in = stream_channels[name]
            s = 1.0 / np.sqrt(c_in)
            if name == "tdcf" and c_in == d:
                # identity projection keeps the residual path an exact copy of
                # the guiding stream at initialization
                kernel = np.eye(d, dtype=dtype).reshape(d, d, 1, 1)
            else:
                kernel = rng.uniform(-s, s, size=(d, c_in, 1, 1)).astype(dtype)
            w = Tensor(kernel, requires_grad=True)
            b = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
            stage.projections[name] = (w, b)
            stage.sa[name] = AttentionParams.init(d, n_h, p, m, rng=rng, zero_out_proj=zero_out_proj, dtype=dtype)
        stage.ca = AttentionParams.init(d, n_h, p, m, rng=rng, zero_out_proj=zero_out_proj,
                                        with_ln=False, dtype=dtype)
        for name in cls.STREAMS:
            # the key stream gets no shift: a per-channel constant on every key
            # cancels in the softmax and would be an untrainable parameter
            beta = None if name == "stf" else Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
            stage.ca_ln[name] = (Tensor(np.ones(d, dtype=dtype), requires_grad=True), beta)
        return stage

    def project(self, name, x):
        """1x1 conv over [T, C, H, W] treated as a batch of T frames."""
        w, b = self.projections[name]
        return T.conv2d(x, w, bias=b)

    def forward(self, tdcf, stf, sf):
        if not (tdcf.shape[0] == stf.shape[0] == sf.shape[0]) or not (
            tdcf.shape[2:] == stf.shape[2:] == sf.shape[2:]
        ):
            raise ShapeError(
                f"stream volumes disagree: {tdcf.shape} / {stf.shape} / {sf.shape}"
            )
        streams = {"tdcf": tdcf, "stf": stf, "sf": sf}
        enhanced = {}
        for name in self.STREAMS:
            x = self.project(name, streams[name])
            x = sa_block(x, self.sa[name], shifted=False)
            x = sa_block(x, self.sa[name], shifted=True)
            enhanced[name] = x
        spec = WindowSpec(p=self.p, m=self.m, shifted=False)
        toks, metas = {}, {}
        for name in self.STREAMS:
            tokens, meta = window_partition(enhanced[name], spec)
            g, b = self.ca_ln[name]
            toks[name] = layer_norm(tokens, g, b)
            metas[name] = meta
        out = cross_attention(toks["tdcf"], toks["stf"], toks["sf"], self.ca, spec,
                              mask=metas["tdcf"]["mask"])
        return T.add(enhanced["tdcf"], window_reverse(out, metas["tdcf"]))

    def parameters(self):
        out = []
        for name in self.STREAMS:
            out.extend(self.projections[name])
            out.extend(self.sa[name].parameters())
        out.extend(self.ca.parameters())
        for name in self.STREAMS:
            out.extend(p for p in self.ca_ln[name] if p is not None)
        return out

    def state_arrays(self, prefix=""):
        arrays = {}
        for name in self.STREAMS:
            w, b = self.projections[name]
            arrays[f"{prefix}proj.{name}.w"] = w.data
            arrays[f"{prefix}proj.{name}.b"] = b.data
            arrays.update(self.sa[name].state_arrays(f"{prefix}sa.{name}."))
        arrays.update(self.ca.state_arrays(f"{prefix}ca."))
        for name in self.STREAMS:
            g, b = self.ca_ln[name]
            arrays[f"{prefix}ca_ln.{name}.gamma"] = g.data
            if b is not None:
                arrays[f"{prefix}ca_ln.{name}.beta"] = b.data
        return arrays

    def load_state_arrays(self, arrays, prefix=""):
        for name in self.STREAMS:
            w, b = self.projections[name]
            w.data = arrays[f"{prefix}proj.{name}.w"].astype(w.dtype)
            b.data = arrays[f"{prefix}proj.{name}.b"].astype(b.dtype)
            self.sa[name].load_state_arrays(arrays, f"{prefix}sa.{name}.")
        self.ca.load_state_arrays(arrays, f"{prefix}ca.")
        for name in self.STREAMS:
            g, b = self.ca_ln[name]
            g.data = arrays[f"{prefix}ca_ln.{name}.gamma"].astype(g.dtype)
            if b is not None:
                b.data = arrays[f"{prefix}ca_ln.{name}.beta"].astype(b.dtype)


def tdcsta_forward(stage_streams, stage_params):
    """Run all stages; returns one enhanced volume per stage."""
    if len(stage_streams) != len(stage_params):
        raise ShapeError(f"{len(stage_streams)} stages of streams vs {len(stage_params)} parameter sets")
    outs = []
    for (tdcf, stf, sf), stage in zip(stage_streams, stage_params):
        outs.append(stage.forward(tdcf, stf, sf))
    return outs
