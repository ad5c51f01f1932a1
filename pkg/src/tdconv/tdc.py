"""Temporal-difference convolution (TDC) branches and their re-parameterization.

A TDC layer is a 3D convolution whose temporal taps are constrained linear
combinations of learnable 2D base kernels, making the layer algebraically
identical to convolving frame differences. Three variants cover different
temporal ranges:

  short-term  : differences of consecutive frames
  mid-term    : differences at two-frame lag
  long-term   : current frame minus every history frame

At training time the three branches run in parallel, each followed by its own
batch norm, and their outputs are summed. At inference the whole stack fuses
into one plain 3D convolution with a bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, Tensor

SHORT_TERM = "ShortTerm"
MID_TERM = "MidTerm"
LONG_TERM = "LongTerm"
VARIANTS = (SHORT_TERM, MID_TERM, LONG_TERM)

SUPPORTED_KT = (3, 5, 7)

# Test hook: when set, applied to the constructed tap list before stacking.
# Used by the verification suite's mutation check; never set in production.
_TAP_MUTATOR = None


def base_count(variant, kt):
    """Number of learnable 2D base kernels for a variant at temporal size kt."""
    if kt not in SUPPORTED_KT:
        raise ConfigurationError(f"temporal kernel size must be one of {SUPPORTED_KT}, got {kt}")
    if variant in (SHORT_TERM, LONG_TERM):
        return kt - 1
    if variant == MID_TERM:
        return kt - 2
    raise ConfigurationError(f"unknown TDC variant {variant!r}")


@dataclass
class TdcBranchParams:
    """One TDC branch: its base 2D kernels and the batch norm that follows it."""

    variant: str
    kt: int
    base_weights: list  # of Tensor[C_out, C_in, Kh, Kw]
    bn: T.BatchNormState

    def __post_init__(self):
        expected = base_count(self.variant, self.kt)
        if len(self.base_weights) != expected:
            raise ConfigurationError(
                f"{self.variant} with Kt={self.kt} needs {expected} base kernels, got {len(self.base_weights)}"
            )
        shapes = {w.shape for w in self.base_weights}
        if len(shapes) != 1:
            raise ConfigurationError(f"base kernels must share one shape, got {sorted(shapes)}")

    @property
    def kernel_shape(self):
        return self.base_weights[0].shape


def _tap_combinations(variant, kt):
    """Per-temporal-tap coefficients over the base kernels, oldest frame first.

    Returns a list of length kt; entry t is a list of (base_index, sign)
    pairs. Base kernels are indexed 0..n-1 in the order they are learned.
    """
    n = base_count(variant, kt)
    taps = [[] for _ in range(kt)]
    if variant == LONG_TERM:
        # sum_t W_t * (F_kt - F_t): frame t gets -W_t, the last frame sum(W_t)
        for i in range(n):
            taps[i].append((i, -1.0))
            taps[kt - 1].append((i, +1.0))
    elif variant == SHORT_TERM:
        # sum_{t=2..kt} W_t * (F_t - F_{t-1}); base i holds W_{i+2}
        for i in range(n):
            taps[i + 1].append((i, +1.0))
            taps[i].append((i, -1.0))
    else:  # MID_TERM: sum_{t=3..kt} W_t * (F_t - F_{t-2}); base i holds W_{i+3}
        for i in range(n):
            taps[i + 2].append((i, +1.0))
            taps[i].append((i, -1.0))
    return taps


def build_tdc_taps(params: TdcBranchParams):
    """Assemble the full [C_out, C_in, Kt, Kh, Kw] kernel from the base set.

    The combination rules make the temporal taps sum to zero for every
    (c_out, c_in, h, w), which is what gives TDC layers their zero response
    on temporally constant input.
    """
    co, ci, kh, kw = params.kernel_shape
    taps = []
    for combo in _tap_combinations(params.variant, params.kt):
        if not combo:
            taps.append(Tensor(np.zeros((co, ci, kh, kw), dtype=params.base_weights[0].dtype)))
            continue
        acc = None
        for idx, sign in combo:
            term = T.mul(params.base_weights[idx], sign)
            acc = term if acc is None else T.add(acc, term)
        taps.append(acc)
    if _TAP_MUTATOR is not None:
        taps = _TAP_MUTATOR(params.variant, taps)
    stacked = T.concat([T.reshape(t, (co, ci, 1, kh, kw)) for t in taps], axis=2)
    return stacked


def tdc_forward_unified(x, params: TdcBranchParams, temporal_mode="causal_replicate"):
    """TDC forward as a single 3D convolution with the constructed taps."""
    return T.conv3d(x, build_tdc_taps(params), spatial_stride=1,
                    spatial_pad=(params.kernel_shape[2] - 1) // 2, temporal_mode=temporal_mode)


def _naive_corr2d(img, ker):
    """Direct 2D cross-correlation (same padding) used only by the explicit path."""
    kh, kw = ker.shape[-2:]
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    pad = np.pad(img, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    view = np.lib.stride_tricks.sliding_window_view(pad, (kh, kw), axis=(2, 3))
    # view: [N, C_in, H, W, kh, kw]; ker: [C_out, C_in, kh, kw]
    return np.einsum("nchwij,ocij->nohw", view, ker)


def tdc_forward_explicit(x, params: TdcBranchParams, temporal_mode="causal_replicate"):
    """Literal difference-form TDC: 2D convolutions of explicit frame differences.

    Serves as the independent oracle for :func:`tdc_forward_unified`; plain
    numpy, not differentiable.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    kt = params.kt
    if temporal_mode == "causal_replicate":
        front = np.repeat(x[:, :, :1], kt - 1, axis=2)
        xp = np.concatenate([front, x], axis=2)
    elif temporal_mode == "same_zero":
        pt = (kt - 1) // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pt, kt - 1 - pt), (0, 0), (0, 0)))
    elif temporal_mode == "valid":
        xp = x
    else:
        raise ConfigurationError(f"unknown temporal_mode {temporal_mode!r}")
    t_out = xp.shape[2] - kt + 1
    bases = [w.data for w in params.base_weights]
    outs = []
    for t0 in range(t_out):
        win = xp[:, :, t0 : t0 + kt]  # frames F_1..F_kt of this window
        acc = 0.0
        if params.variant == LONG_TERM:
            for i, w in enumerate(bases):
                acc = acc + _naive_corr2d(win[:, :, kt - 1] - win[:, :, i], w)
        elif params.variant == SHORT_TERM:
            for i, w in enumerate(bases):
                acc = acc + _naive_corr2d(win[:, :, i + 1] - win[:, :, i], w)
        else:
            for i, w in enumerate(bases):
                acc = acc + _naive_corr2d(win[:, :, i + 2] - win[:, :, i], w)
        outs.append(acc[:, :, None])
    return np.concatenate(outs, axis=2)


# -- the three-branch module -------------------------------------------------


@dataclass
class TdcrModule:
    """Three parallel TDC branches (one per variant) plus their batch norms."""

    c_in: int
    c_out: int
    kt: int = 5
    spatial_kernel: tuple = (3, 3)
    branches: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.branches and set(self.branches) != set(VARIANTS):
            raise ConfigurationError(f"TDCR needs exactly one branch per variant, got {sorted(self.branches)}")

    @classmethod
    def init(cls, c_in, c_out, kt=5, spatial_kernel=(3, 3), rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        kh, kw = spatial_kernel
        limit = 1.0 / np.sqrt(c_in * kh * kw)
        mod = cls(c_in=c_in, c_out=c_out, kt=kt, spatial_kernel=spatial_kernel)
        for variant in VARIANTS:
            n = base_count(variant, kt)
            weights = [
                Tensor(rng.uniform(-limit, limit, size=(c_out, c_in, kh, kw)).astype(dtype), requires_grad=True)
                for _ in range(n)
            ]
            mod.branches[variant] = TdcBranchParams(
                variant=variant, kt=kt, base_weights=weights,
                bn=T.BatchNormState(c_out, dtype=dtype),
            )
        return mod

    def parameters(self):
        out = []
        for variant in VARIANTS:
            br = self.branches[variant]
            out.extend(br.base_weights)
            out.extend([br.bn.gamma, br.bn.beta])
        return out

    def state_arrays(self, prefix=""):
        """Ordered name -> ndarray map for checkpointing."""
        arrays = {}
        for variant in VARIANTS:
            br = self.branches[variant]
            for i, w in enumerate(br.base_weights):
                arrays[f"{prefix}{variant}.w{i}"] = w.data
            arrays[f"{prefix}{variant}.bn.gamma"] = br.bn.gamma.data
            arrays[f"{prefix}{variant}.bn.beta"] = br.bn.beta.data
            arrays[f"{prefix}{variant}.bn.mu"] = br.bn.running_mu
            arrays[f"{prefix}{variant}.bn.var"] = br.bn.running_var
        return arrays

    def load_state_arrays(self, arrays, prefix=""):
        for variant in VARIANTS:
            br = self.branches[variant]
            for i, w in enumerate(br.base_weights):
                w.data = arrays[f"{prefix}{variant}.w{i}"].astype(w.dtype)
            br.bn.gamma.data = arrays[f"{prefix}{variant}.bn.gamma"].astype(br.bn.gamma.dtype)
            br.bn.beta.data = arrays[f"{prefix}{variant}.bn.beta"].astype(br.bn.beta.dtype)
            br.bn.running_mu = arrays[f"{prefix}{variant}.bn.mu"].astype(br.bn.running_mu.dtype)
            br.bn.running_var = arrays[f"{prefix}{variant}.bn.var"].astype(br.bn.running_var.dtype)

    def learnable_param_count(self):
        n = 0
        for variant in VARIANTS:
            br = self.branches[variant]
            n += sum(w.size for w in br.base_weights) + 2 * self.c_out
        return n

    def count_into(self, visitor, input_shape):
        branched, _fused = tdcr_macs(self, input_shape)
        visitor.add("tdcr", self.learnable_param_count(), branched)


def tdcr_forward_train(x, module: TdcrModule, bn_mode="train", temporal_mode="causal_replicate"):
    """Three-branch forward: BN_s(F_s) + BN_m(F_m) + BN_l(F_l)."""
    out = None
    for variant in VARIANTS:
        br = module.branches[variant]
        f = tdc_forward_unified(x, br, temporal_mode=temporal_mode)
        f = T.batch_norm(f, br.bn, mode=bn_mode)
        out = f if out is None else T.add(out, f)
    return out


# -- re-parameterization -----------------------------------------------------


@dataclass
class FusedConv3d:
    """Single 3D convolution equivalent to an infer-mode TDCR module."""

    weight: np.ndarray  # [C_out, C_in, Kt, Kh, Kw]
    bias: np.ndarray  # [C_out]

    def forward(self, x, temporal_mode="causal_replicate"):
        kh = self.weight.shape[3]
        return T.conv3d(x, Tensor(self.weight), bias=Tensor(self.bias),
                        spatial_stride=1, spatial_pad=(kh - 1) // 2, temporal_mode=temporal_mode)

    def param_count(self):
        return self.weight.size + self.bias.size

    def count_into(self, visitor, input_shape):
        c_out, _c_in, kt, kh, kw = self.weight.shape
        macs = conv3d_macs(input_shape, c_out, kt, kh, kw) + self.bias.size
        visitor.add("fused_conv3d", self.param_count(), macs)


def fuse_conv_bn(weight, bias, bn: T.BatchNormState):
    """Fold an infer-mode batch norm into the preceding convolution.

    W_hat[o] = gamma[o] * W[o] / sigma[o]
    b_hat[o] = gamma[o] * (b[o] - mu[o]) / sigma[o] + beta[o]
    with sigma = sqrt(running_var + eps).
    """
    weight = np.asarray(weight.data if isinstance(weight, Tensor) else weight)
    var = bn.running_var + bn.eps
    if np.any(var <= 0):
        raise T.NumericDomainError("nonpositive variance in fuse_conv_bn")
    sigma = np.sqrt(var)
    gamma = bn.gamma.data
    beta = bn.beta.data
    if bias is None:
        bias = np.zeros(weight.shape[0], dtype=weight.dtype)
    else:
        bias = np.asarray(bias.data if isinstance(bias, Tensor) else bias)
    scale = gamma / sigma
    w_hat = weight * scale.reshape((-1,) + (1,) * (weight.ndim - 1))
    b_hat = scale * (bias - bn.running_mu) + beta
    return w_hat, b_hat


def reparameterize(module: TdcrModule) -> FusedConv3d:
    """Merge the three branch kernels and batch norms into one convolution."""
    w_total, b_total = None, None
    for variant in VARIANTS:
        br = module.branches[variant]
        with T.no_grad():
            taps = build_tdc_taps(br).data
        w_hat, b_hat = fuse_conv_bn(taps, None, br.bn)
        if w_total is None:
            w_total, b_total = w_hat.copy(), b_hat.copy()
        else:
            w_total += w_hat
            b_total += b_hat
    return FusedConv3d(weight=w_total, bias=b_total)


def conv3d_macs(in_shape, c_out, kt, kh, kw, temporal_mode="causal_replicate", stride=1, pad=None):
    """Multiply-add count of one 3D convolution forward pass."""
    n, c_in, t, h, w = in_shape
    if pad is None:
        pad = (kh - 1) // 2
    t_out = t if temporal_mode != "valid" else t - kt + 1
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    return n * c_out * t_out * h_out * w_out * (c_in * kt * kh * kw)


def tdcr_macs(module: TdcrModule, in_shape, temporal_mode="causal_replicate"):
    """(branched, fused) multiply-add counts for one forward at in_shape."""
    kh, kw = module.spatial_kernel
    one = conv3d_macs(in_shape, module.c_out, module.kt, kh, kw, temporal_mode)
    # branched: three full-kernel convolutions plus per-branch BN affine
    n, _, t, h, w = in_shape
    bn_cost = module.c_out * n * t * h * w
    return 3 * (one + bn_cost), one + module.c_out
