"""Moving-small-target detector: backbones, guided attention, neck, head.

Three backbone flavors share one topology (stem then four stages, each stage
a feature block, a pointwise conv, a nonlinearity and a 2x spatial pool); the
last three stage outputs feed the neck at strides 4/8/16. Variants:

- "baseline3d": plain 3x3x3 convolution blocks
- "tdcr": temporal-difference (TDCR) blocks
- "full": TDCR + plain-3D + 2D backbones merged per stage by guided attention

The anchor-free head predicts (dx, dy, log w, log h, objectness) per cell;
the single class reuses the objectness logit as its score but contributes a
separate loss term with identical targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as A
from . import serialize
from . import tensor as T
from . import tdc
from .metrics import iou as box_iou
from .optim import Adam
from .tensor import ConfigurationError, NumericDomainError, ShapeError, Tensor

STRIDES = (4, 8, 16)


@dataclass
class BackboneConfig:
    widths: tuple = (16, 32, 64, 128)
    kt: int = 5
    temporal_mode: str = "causal_replicate"
    stem_kernel: int = 3
    dtype: type = np.float64

    def __post_init__(self):
        if len(self.widths) != 4:
            raise ConfigurationError(f"backbone needs exactly 4 stages, got {len(self.widths)}")
        if self.kt not in tdc.SUPPORTED_KT:
            raise ConfigurationError(f"unsupported Kt {self.kt}")


class ConvLayer:
    """conv3d (+ optional bias) with same-size spatial padding."""

    def __init__(self, c_in, c_out, kt, kh, kw, bias=True, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        limit = 1.0 / np.sqrt(c_in * kt * kh * kw)
        self.weight = Tensor(rng.uniform(-limit, limit, size=(c_out, c_in, kt, kh, kw)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x, temporal_mode="causal_replicate"):
        kh = self.weight.shape[3]
        return T.conv3d(x, self.weight, bias=self.bias,
                        spatial_pad=(kh - 1) // 2, temporal_mode=temporal_mode)

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def state_arrays(self, prefix=""):
        out = {f"{prefix}w": self.weight.data}
        if self.bias is not None:
            out[f"{prefix}b"] = self.bias.data
        return out

    def load_state_arrays(self, arrays, prefix=""):
        self.weight.data = arrays[f"{prefix}w"].astype(self.weight.dtype)
        if self.bias is not None:
            self.bias.data = arrays[f"{prefix}b"].astype(self.bias.dtype)

    def param_count(self):
        return self.weight.size + (self.bias.size if self.bias is not None else 0)


class Backbone:
    """Stem + 4 stages; returns the last three stage outputs (strides 4/8/16).

    kind "tdc" uses TDCR blocks, "conv3d" plain 3x3x3 blocks with batch norm,
    "conv2d" per-frame 3x3 blocks (built as Kt=1 convolutions so single
    frames ride the same 5-D path with T=1).
    """

    def __init__(self, kind, cfg: BackboneConfig, rng=None):
        if kind not in ("tdc", "conv3d", "conv2d"):
            raise ConfigurationError(f"unknown backbone kind {kind!r}")
        rng = rng or np.random.default_rng(0)
        self.kind = kind
        self.cfg = cfg
        k = cfg.stem_kernel
        self.stem = ConvLayer(1, cfg.widths[0], 1, k, k, rng=rng, dtype=cfg.dtype)
        self.stages = []
        c_prev = cfg.widths[0]
        for c in cfg.widths:
            stage = {}
            if kind == "tdc":
                stage["block"] = tdc.TdcrModule.init(c_prev, c, kt=cfg.kt, rng=rng, dtype=cfg.dtype)
                stage["bn"] = None
            else:
                kt = cfg.kt if kind == "conv3d" else 1
                stage["block"] = ConvLayer(c_prev, c, kt, 3, 3, bias=False, rng=rng, dtype=cfg.dtype)
                stage["bn"] = T.BatchNormState(c, dtype=cfg.dtype)
            stage["point"] = ConvLayer(c, c, 1, 1, 1, rng=rng, dtype=cfg.dtype)
            self.stages.append(stage)
            c_prev = c

    def forward(self, x, bn_mode="train"):
        """x: [N, 1, T, H, W] -> three feature volumes [N, C_l, T, H_l, W_l]."""
        if x.shape[3] % 16 or x.shape[4] % 16:
            raise ConfigurationError(f"H, W must be divisible by 16, got {x.shape[3:]}" )
        mode = self.cfg.temporal_mode
        h = T.silu(self.stem.forward(x, temporal_mode=mode))
        feats = []
        for i, stage in enumerate(self.stages):
            block = stage["block"]
            if isinstance(block, tdc.TdcrModule):
                h = tdc.tdcr_forward_train(h, block, bn_mode=bn_mode, temporal_mode=mode)
            elif isinstance(block, tdc.FusedConv3d):
                h = block.forward(h, temporal_mode=mode)
            else:
                h = block.forward(h, temporal_mode=mode)
                h = T.batch_norm(h, stage["bn"], mode=bn_mode)
            h = T.silu(stage["point"].forward(h, temporal_mode=mode))
            h = T.avgpool2_spatial(h)
            if i >= 1:
                feats.append(h)
        return feats

    def parameters(self):
        out = self.stem.parameters()
        for stage in self.stages:
            out.extend(stage["block"].parameters() if hasattr(stage["block"], "parameters") else [])
            if isinstance(stage["block"], tdc.TdcrModule):
                pass
            elif stage["bn"] is not None:
                out.extend([stage["bn"].gamma, stage["bn"].beta])
            out.extend(stage["point"].parameters())
        return out

    def state_arrays(self, prefix=""):
        arrays = self.stem.state_arrays(f"{prefix}stem.")
        for i, stage in enumerate(self.stages):
            block = stage["block"]
            if isinstance(block, tdc.TdcrModule):
                arrays.update(block.state_arrays(f"{prefix}s{i}.tdcr."))
            elif isinstance(block, tdc.FusedConv3d):
                arrays[f"{prefix}s{i}.fused.w"] = block.weight
                arrays[f"{prefix}s{i}.fused.b"] = block.bias
            else:
                arrays.update(block.state_arrays(f"{prefix}s{i}.conv."))
                bn = stage["bn"]
                arrays[f"{prefix}s{i}.bn.gamma"] = bn.gamma.data
                arrays[f"{prefix}s{i}.bn.beta"] = bn.beta.data
                arrays[f"{prefix}s{i}.bn.mu"] = bn.running_mu
                arrays[f"{prefix}s{i}.bn.var"] = bn.running_var
            arrays.update(stage["point"].state_arrays(f"{prefix}s{i}.point."))
        return arrays

    def load_state_arrays(self, arrays, prefix=""):
        self.stem.load_state_arrays(arrays, f"{prefix}stem.")
        for i, stage in enumerate(self.stages):
            block = stage["block"]
            if isinstance(block, tdc.TdcrModule):
                block.load_state_arrays(arrays, f"{prefix}s{i}.tdcr.")
            elif isinstance(block, tdc.FusedConv3d):
                block.weight = arrays[f"{prefix}s{i}.fused.w"]
                block.bias = arrays[f"{prefix}s{i}.fused.b"]
            else:
                block.load_state_arrays(arrays, f"{prefix}s{i}.conv.")
                bn = stage["bn"]
                bn.gamma.data = arrays[f"{prefix}s{i}.bn.gamma"].astype(bn.gamma.dtype)
                bn.beta.data = arrays[f"{prefix}s{i}.bn.beta"].astype(bn.beta.dtype)
                bn.running_mu = arrays[f"{prefix}s{i}.bn.mu"]
                bn.running_var = arrays[f"{prefix}s{i}.bn.var"]
            stage["point"].load_state_arrays(arrays, f"{prefix}s{i}.point.")

    def fuse(self):
        """Replace every TDCR block with its single-conv re-parameterization."""
        if self.kind != "tdc":
            return
        for stage in self.stages:
            if isinstance(stage["block"], tdc.TdcrModule):
                stage["block"] = tdc.reparameterize(stage["block"])


class NeckHead:
    """Top-down feature pyramid plus a shared anchor-free head.

    Laterals project each level to a common width; coarser levels are
    upsampled 2x and added on the way down; the head (3x3 conv, silu, 1x1
    conv to 5 channels) is shared across levels. No batch norm here so the
    branched/fused equivalence carries through to raw predictions.
    """

    def __init__(self, in_channels, d, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.d = d
        self.lateral = [ConvLayer(c, d, 1, 1, 1, rng=rng, dtype=dtype) for c in in_channels]
        self.head_conv = ConvLayer(d, d, 1, 3, 3, rng=rng, dtype=dtype)
        self.head_out = ConvLayer(d, 5, 1, 1, 1, rng=rng, dtype=dtype)

    @staticmethod
    def _as2d(layer, x):
        x5 = T.reshape(x, (x.shape[0], x.shape[1], 1, x.shape[2], x.shape[3]))
        out = layer.forward(x5, temporal_mode="valid")
        return T.reshape(out, (out.shape[0], out.shape[1], out.shape[3], out.shape[4]))

    def forward(self, feats):
        """feats: three [N, C_l, H_l, W_l] maps, fine to coarse -> raw preds."""
        if len(feats) != 3:
            raise ShapeError(f"neck expects 3 levels, got {len(feats)}")
        laterals = [self._as2d(lat, f) for lat, f in zip(self.lateral, feats)]
        merged = [None, None, laterals[2]]
        merged[1] = T.add(laterals[1], T.upsample2x(merged[2]))
        merged[0] = T.add(laterals[0], T.upsample2x(merged[1]))
        raws = []
        for m in merged:
            h = T.silu(self._as2d(self.head_conv, m))
            raws.append(self._as2d(self.head_out, h))
        return raws

    def parameters(self):
        out = []
        for lat in self.lateral:
            out.extend(lat.parameters())
        out.extend(self.head_conv.parameters())
        out.extend(self.head_out.parameters())
        return out

    def state_arrays(self, prefix=""):
        arrays = {}
        for i, lat in enumerate(self.lateral):
            arrays.update(lat.state_arrays(f"{prefix}lat{i}."))
        arrays.update(self.head_conv.state_arrays(f"{prefix}hconv."))
        arrays.update(self.head_out.state_arrays(f"{prefix}hout."))
        return arrays

    def load_state_arrays(self, arrays, prefix=""):
        for i, lat in enumerate(self.lateral):
            lat.load_state_arrays(arrays, f"{prefix}lat{i}.")
        self.head_conv.load_state_arrays(arrays, f"{prefix}hconv.")
        self.head_out.load_state_arrays(arrays, f"{prefix}hout.")


# -- box encoding ------------------------------------------------------------


def encode_box(box, stride, grid_hw):
    """(cell_i, cell_j, dx, dy, tw, th) for one gt box at one level."""
    x, y, w, h = box
    gh, gw = grid_hw
    j = min(max(int(x / stride), 0), gw - 1)
    i = min(max(int(y / stride), 0), gh - 1)
    dx = x / stride - (j + 0.5)
    dy = y / stride - (i + 0.5)
    tw = np.log(w / (2.0 * stride))
    th = np.log(h / (2.0 * stride))
    return i, j, dx, dy, tw, th


def decode_cell(i, j, dx, dy, tw, th, stride):
    """Inverse of encode_box; works on floats or Tensors."""
    x = (dx + (j + 0.5)) * stride
    y = (dy + (i + 0.5)) * stride
    if isinstance(tw, Tensor):
        w = T.exp(tw) * (2.0 * stride)
        h = T.exp(th) * (2.0 * stride)
    else:
        w = np.exp(tw) * 2.0 * stride
        h = np.exp(th) * 2.0 * stride
    return x, y, w, h


def assign_level(box, strides=STRIDES):
    """Level whose stride is nearest to sqrt(w*h); ties take the finer one."""
    size = np.sqrt(box[2] * box[3])
    return int(np.argmin([abs(s - size) for s in strides]))


# -- loss --------------------------------------------------------------------


@dataclass
class LossBreakdown:
    l_reg: Tensor
    l_obj: Tensor
    l_cls: Tensor

    @property
    def total(self):
        return T.add(T.add(self.l_reg, self.l_obj), self.l_cls)

    def floats(self):
        return {"l_reg": self.l_reg.item(), "l_obj": self.l_obj.item(),
                "l_cls": self.l_cls.item(), "total": self.total.item()}


def _diff_iou(px, py, pw, ph, gx, gy, gw, gh):
    """Differentiable IoU of a predicted box against a constant gt box."""
    ix = T.relu(T.minimum(px + pw * 0.5, gx + gw / 2) - T.maximum(px - pw * 0.5, gx - gw / 2))
    iy = T.relu(T.minimum(py + ph * 0.5, gy + gh / 2) - T.maximum(py - ph * 0.5, gy - gh / 2))
    inter = T.mul(ix, iy)
    union = T.mul(pw, ph) + gw * gh - inter
    return T.mul(inter, T.power(union, -1.0))


def detection_loss(raw, targets, strides=STRIDES):
    """raw: per-level [N,5,H,W] Tensors; targets: per-image box lists.

    L_reg = mean over positive cells of 1 - IoU; L_obj = BCE over every cell
    of every level; L_cls = BCE over positive cells (single class, same
    targets as objectness). With no positives, L_reg = L_cls = 0.
    """
    n_img = raw[0].shape[0]
    dtype = raw[0].dtype
    obj_tgt = [np.zeros((n_img,) + (r.shape[2], r.shape[3]), dtype=dtype) for r in raw]
    positives = []
    for n, boxes in enumerate(targets):
        for box in boxes:
            lvl = assign_level(box, strides)
            i, j, *_ = encode_box(box, strides[lvl], raw[lvl].shape[2:])
            obj_tgt[lvl][n, i, j] = 1.0
            positives.append((n, lvl, i, j, box))

    obj_sum, n_cells = None, 0
    for lvl, r in enumerate(raw):
        logits = T.take(r, (slice(None), 4))
        bce = T.bce_with_logits(logits, obj_tgt[lvl])
        s = T.tsum(bce)
        obj_sum = s if obj_sum is None else T.add(obj_sum, s)
        n_cells += logits.size
    l_obj = obj_sum * (1.0 / n_cells)

    zero = Tensor(np.array(0.0, dtype=dtype))
    if not positives:
        return LossBreakdown(l_reg=zero, l_obj=l_obj, l_cls=zero)
    reg_sum, cls_sum = None, None
    for n, lvl, i, j, box in positives:
        s = strides[lvl]
        p = T.take(raw[lvl], (n, slice(None), i, j))  # [5]
        dx, dy = T.take(p, (0,)), T.take(p, (1,))
        tw, th = T.take(p, (2,)), T.take(p, (3,))
        px, py, pw, ph = decode_cell(i, j, dx, dy, tw, th, s)
        term = 1.0 - _diff_iou(px, py, pw, ph, *box)
        reg_sum = term if reg_sum is None else T.add(reg_sum, term)
        cls_term = T.bce_with_logits(T.take(p, (4,)), np.array(1.0, dtype=dtype))
        cls_sum = cls_term if cls_sum is None else T.add(cls_sum, cls_term)
    k = 1.0 / len(positives)
    return LossBreakdown(l_reg=T.reshape(reg_sum * k, ()),
                         l_obj=l_obj,
                         l_cls=T.reshape(cls_sum * k, ()))


# -- decoding ----------------------------------------------------------------


@dataclass
class Detection:
    box: tuple  # (x, y, w, h) center format, pixels
    objectness: float
    class_score: float
    frame: int = -1


def decode_predictions(raw, strides=STRIDES, conf_threshold=0.25, nms_iou=0.5):
    """Raw per-level predictions -> per-image Detection lists with NMS."""
    arrays = [r.data if isinstance(r, Tensor) else np.asarray(r) for r in raw]
    n_img = arrays[0].shape[0]
    out = []
    for n in range(n_img):
        cands = []
        for lvl, arr in enumerate(arrays):
            s = strides[lvl]
            obj = 0.5 * (1.0 + np.tanh(0.5 * arr[n, 4]))  # overflow-safe sigmoid
            ii, jj = np.nonzero(obj >= conf_threshold)
            for i, j in zip(ii, jj):
                x, y, w, h = decode_cell(i, j, arr[n, 0, i, j], arr[n, 1, i, j],
                                         arr[n, 2, i, j], arr[n, 3, i, j], s)
                cands.append(Detection(box=(float(x), float(y), float(w), float(h)),
                                       objectness=float(obj[i, j]),
                                       class_score=float(obj[i, j])))
        cands.sort(key=lambda d: -d.objectness)
        kept = []
        for d in cands:
            if all(box_iou(d.box, k.box) < nms_iou for k in kept):
                kept.append(d)
        out.append(kept)
    return out


# -- detector assembly -------------------------------------------------------


@dataclass
class DetectorConfig:
    variant: str = "full"  # baseline3d | tdcr | full
    widths: tuple = (16, 32, 64, 128)
    kt: int = 5
    t: int = 5
    n_heads: int = 4
    window_p: int = 5
    window_m: int = 8
    neck_width: int = 0  # 0 -> widths[1]
    attn_zero_init: bool = True  # full model starts identical to its TDC path
    dtype: type = np.float64

    def __post_init__(self):
        if self.variant not in ("baseline3d", "tdcr", "full"):
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.neck_width == 0:
            self.neck_width = self.widths[1]
        for w in self.widths[1:]:
            if w % self.n_heads:
                raise ConfigurationError(
                    f"stage width {w} not divisible by {self.n_heads} heads")


class Detector:
    """Variant-aware detector: backbones (+ attention) feeding neck and head."""

    def __init__(self, cfg: DetectorConfig, seed=0):
        self.cfg = cfg
        self.fused = False
        rng = np.random.default_rng(seed)
        bcfg = BackboneConfig(widths=cfg.widths, kt=cfg.kt, dtype=cfg.dtype)
        self.backbones = {}
        if cfg.variant in ("tdcr", "full"):
            self.backbones["tdc"] = Backbone("tdc", bcfg, rng=rng)
        if cfg.variant in ("baseline3d", "full"):
            self.backbones["stf"] = Backbone("conv3d", bcfg, rng=rng)
        if cfg.variant == "full":
            self.backbones["sf"] = Backbone("conv2d", bcfg, rng=rng)
        self.attn = None
        if cfg.variant == "full":
            # zero-initialized attention output projections make the full
            # model start as an exact copy of the TDCR-only forward path
            self.attn = [
                A.StageAttention.init(
                    {"tdcf": w, "stf": w, "sf": w}, d=w, n_h=cfg.n_heads,
                    p=cfg.window_p, m=cfg.window_m, rng=rng,
                    zero_out_proj=cfg.attn_zero_init, dtype=cfg.dtype)
                for w in cfg.widths[1:]
            ]
        self.neck = NeckHead(cfg.widths[1:], cfg.neck_width, rng=rng, dtype=cfg.dtype)

    # forward paths ---------------------------------------------------------

    @staticmethod
    def _last_t(feat):
        """[N, C, T, H, W] -> [N, C, H, W] at the final temporal index."""
        return T.take(feat, (slice(None), slice(None), feat.shape[2] - 1))

    def forward(self, clip, bn_mode="train", frozen_infer=True):
        """clip: [N, 1, T, H, W] -> per-level raw predictions [N, 5, H, W]."""
        cfg = self.cfg
        if clip.ndim != 5 or clip.shape[2] != cfg.t:
            raise ShapeError(f"expected [N,1,{cfg.t},H,W] clip, got {clip.shape}")
        if cfg.variant == "baseline3d":
            feats = self.backbones["stf"].forward(clip, bn_mode=bn_mode)
            return self.neck.forward([self._last_t(f) for f in feats])
        if cfg.variant == "tdcr":
            feats = self.backbones["tdc"].forward(clip, bn_mode=bn_mode)
            return self.neck.forward([self._last_t(f) for f in feats])

        aux_mode = "infer" if frozen_infer else bn_mode
        tdcf = self.backbones["tdc"].forward(clip, bn_mode=bn_mode)
        stf = self.backbones["stf"].forward(clip, bn_mode=aux_mode)
        last = T.take(clip, (slice(None), slice(None), cfg.t - 1))
        last5 = T.reshape(last, (last.shape[0], 1, 1, last.shape[2], last.shape[3]))
        sf = self.backbones["sf"].forward(last5, bn_mode=aux_mode)

        n_img = clip.shape[0]
        levels = []
        for lvl in range(3):
            per_image = []
            for n in range(n_img):
                streams = []
                for feat in (tdcf[lvl], stf[lvl]):
                    f = T.take(feat, (n,))  # [C, T', H, W]
                    f = T.transpose(f, (1, 0, 2, 3))  # [T', C, H, W]
                    if f.shape[0] == 1:
                        f = T.broadcast_to(f, (cfg.t,) + f.shape[1:])
                    streams.append(f)
                fsf = T.take(sf[lvl], (n,))  # [C, 1, H, W]
                fsf = T.transpose(fsf, (1, 0, 2, 3))
                fsf = T.broadcast_to(fsf, (cfg.t,) + fsf.shape[1:])
                stef = self.attn[lvl].forward(streams[0], streams[1], fsf)
                cur = T.take(stef, (cfg.t - 1,))  # [C, H, W]
                per_image.append(T.reshape(cur, (1,) + cur.shape))
            levels.append(T.concat(per_image, axis=0))
        return self.neck.forward(levels)

    def forward_2d(self, frames, bn_mode="train"):
        """Single-frame path for pretraining: [N, 1, H, W] -> raw preds."""
        x = T.reshape(frames, (frames.shape[0], 1, 1, frames.shape[2], frames.shape[3]))
        feats = self.backbones["sf"].forward(x, bn_mode=bn_mode)
        return self.neck.forward([self._last_t(f) for f in feats])

    def forward_3d(self, clip, bn_mode="train"):
        """Plain-3D path for pretraining: [N, 1, T, H, W] -> raw preds."""
        feats = self.backbones["stf"].forward(clip, bn_mode=bn_mode)
        return self.neck.forward([self._last_t(f) for f in feats])

    # parameter bookkeeping --------------------------------------------------

    def parameters(self, parts=None):
        groups = {name: bb.parameters() for name, bb in self.backbones.items()}
        if self.attn is not None:
            groups["attn"] = [p for st in self.attn for p in st.parameters()]
        groups["neck"] = self.neck.parameters()
        if parts is None:
            parts = list(groups)
        out = []
        for part in parts:
            out.extend(groups.get(part, []))
        return out

    def state_arrays(self):
        arrays = {}
        for name, bb in self.backbones.items():
            arrays.update(bb.state_arrays(f"{name}."))
        if self.attn is not None:
            for lvl, st in enumerate(self.attn):
                arrays.update(st.state_arrays(f"attn{lvl}."))
        arrays.update(self.neck.state_arrays("neck."))
        return arrays

    def load_state_arrays(self, arrays):
        for name, bb in self.backbones.items():
            bb.load_state_arrays(arrays, f"{name}.")
        if self.attn is not None:
            for lvl, st in enumerate(self.attn):
                st.load_state_arrays(arrays, f"attn{lvl}.")
        self.neck.load_state_arrays(arrays, "neck.")

    def fuse(self):
        if self.fused:
            return
        if "tdc" in self.backbones:
            self.backbones["tdc"].fuse()
        self.fused = True

    def count_into(self, visitor, input_shape):
        """Analytic params/MACs per component for one clip forward."""
        n, _c, t, h, w = input_shape
        for name, bb in self.backbones.items():
            tt = 1 if bb.kind == "conv2d" else t
            k = bb.cfg.stem_kernel
            visitor.add(f"{name}.stem", bb.stem.param_count(),
                        tdc.conv3d_macs((n, 1, tt, h, w), bb.cfg.widths[0], 1, k, k))
            c_prev, hh, ww = bb.cfg.widths[0], h, w
            for i, (stage, c) in enumerate(zip(bb.stages, bb.cfg.widths)):
                shape = (n, c_prev, tt, hh, ww)
                block = stage["block"]
                if isinstance(block, tdc.TdcrModule):
                    block.count_into(visitor, shape)
                    visitor.rows[-1] = (f"{name}.s{i}.block",) + visitor.rows[-1][1:]
                elif isinstance(block, tdc.FusedConv3d):
                    block.count_into(visitor, shape)
                    visitor.rows[-1] = (f"{name}.s{i}.block",) + visitor.rows[-1][1:]
                else:
                    kt = block.weight.shape[2]
                    macs = tdc.conv3d_macs(shape, c, kt, 3, 3) + 2 * c * n * tt * hh * ww
                    visitor.add(f"{name}.s{i}.block", block.param_count() + 2 * c, macs)
                visitor.add(f"{name}.s{i}.point", stage["point"].param_count(),
                            tdc.conv3d_macs((n, c, tt, hh, ww), c, 1, 1, 1))
                hh, ww, c_prev = hh // 2, ww // 2, c
        if self.attn is not None:
            from .metrics import attention_macs
            for lvl, st in enumerate(self.attn):
                hh, ww = h // STRIDES[lvl], w // STRIDES[lvl]
                spec = A.WindowSpec(p=st.p, m=st.m, shifted=False)
                n_win = int(np.ceil(t / st.p) * np.ceil(hh / st.m) ** 2)
                tok = spec.tokens_per_window
                params = sum(p.size for p in st.parameters())
                # 6 self-attention passes + 1 cross pass + projections
                macs = 7 * attention_macs(n_win, tok, st.d, st.n_h)
                macs += 3 * st.d * st.d * t * hh * ww
                visitor.add(f"attn{lvl}", params, n * macs)
        neck_params = sum(p.size for p in self.neck.parameters())
        neck_macs = 0
        for lvl, c in enumerate(self.cfg.widths[1:]):
            hh, ww = h // STRIDES[lvl], w // STRIDES[lvl]
            d = self.neck.d
            neck_macs += n * hh * ww * (c * d + d * d * 9 + d * 5)
        visitor.add("neck_head", neck_params, neck_macs)


def save_checkpoint(path, model: Detector, extra_meta=None):
    cfg = model.cfg
    meta = {
        "variant": cfg.variant, "widths": list(cfg.widths), "kt": cfg.kt,
        "t": cfg.t, "n_heads": cfg.n_heads, "window_p": cfg.window_p,
        "window_m": cfg.window_m, "neck_width": cfg.neck_width,
        "dtype": np.dtype(cfg.dtype).name, "fused": model.fused,
    }
    if extra_meta:
        meta.update(extra_meta)
    serialize.save_arrays(path, meta, model.state_arrays())


def load_checkpoint(path):
    meta, arrays = serialize.load_arrays(path)
    cfg = DetectorConfig(
        variant=meta["variant"], widths=tuple(meta["widths"]), kt=meta["kt"],
        t=meta["t"], n_heads=meta["n_heads"], window_p=meta["window_p"],
        window_m=meta["window_m"], neck_width=meta["neck_width"],
        dtype=np.dtype(meta["dtype"]).type,
    )
    model = Detector(cfg, seed=0)
    if meta.get("fused"):
        model.fuse()
    try:
        model.load_state_arrays(arrays)
    except KeyError as exc:
        raise ConfigurationError(f"checkpoint does not match config: missing {exc}")
    return model, meta


# -- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    model: DetectorConfig = field(default_factory=DetectorConfig)
    batch: int = 4
    epochs_2d: int = 2
    epochs_3d: int = 2
    epochs_main: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_stride: int = 1  # keep every k-th clip of the stream


def normalize_frames(frames):
    """uint8-range frames -> zero-centered floats the stem can digest."""
    return frames / 255.0 - 0.5


def _batches(samples, batch, rng):
    order = rng.permutation(len(samples))
    for k in range(0, len(order), batch):
        yield [samples[i] for i in order[k:k + batch]]


def _stack_clips(batch, dtype):
    clips = np.stack([normalize_frames(s.frames) for s in batch]).astype(dtype)
    clips = clips.transpose(0, 2, 1, 3, 4)  # [N, T, 1, H, W] -> [N, 1, T, H, W]
    targets = [s.boxes for s in batch]
    return Tensor(clips), targets


def train_loop(dataset, cfg: TrainConfig, seed=0, model=None, start_stage=1,
               stage_callback=None):
    """Staged training; returns (model, history).

    Stage order for the "full" variant: 2D backbone pretrain on single
    frames, 3D backbone pretrain on clips, then both frozen while the TDCR
    backbone, attention, and neck/head train. The reduced variants run only
    the stage that owns their backbone. A NaN loss aborts immediately.

    Each stage draws batch order from its own seeded stream, so a run
    resumed from a stage checkpoint (``model`` + ``start_stage``) replays
    the remaining stages bit-exactly. ``stage_callback(name, model,
    losses)`` fires after each completed stage.
    """
    samples = list(dataset)[:: max(cfg.clip_stride, 1)]
    if not samples:
        raise ConfigurationError("empty training set")
    if model is None:
        model = Detector(cfg.model, seed=seed)
    dtype = cfg.model.dtype
    history = {}
    variant = cfg.model.variant

    def run_stage(name, stage_no, epochs, params, step_fn):
        if stage_no < start_stage:
            return
        opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        rng = np.random.default_rng([seed + 1, stage_no])
        losses = []
        for _epoch in range(epochs):
            for batch in _batches(samples, cfg.batch, rng):
                opt.zero_grad()
                loss = step_fn(batch)
                val = loss.item()
                if not np.isfinite(val):
                    raise NumericDomainError(
                        f"loss diverged to {val} in stage {name} after {len(losses)} steps")
                loss.backward()
                opt.step()
                losses.append(val)
        history[name] = losses
        if stage_callback is not None:
            stage_callback(name, model, losses)

    if variant == "full":
        def step_2d(batch):
            clips, targets = _stack_clips(batch, dtype)
            frames = T.take(clips, (slice(None), slice(None), cfg.model.t - 1))
            raw = model.forward_2d(frames, bn_mode="train")
            return detection_loss(raw, targets).total
        run_stage("stage1_2d", 1, cfg.epochs_2d,
                  model.parameters(["sf", "neck"]), step_2d)

    if variant in ("full", "baseline3d"):
        def step_3d(batch):
            clips, targets = _stack_clips(batch, dtype)
            raw = model.forward_3d(clips, bn_mode="train")
            return detection_loss(raw, targets).total
        run_stage("stage2_3d", 2, cfg.epochs_3d,
                  model.parameters(["stf", "neck"]), step_3d)

    if variant in ("full", "tdcr"):
        parts = ["tdc", "attn", "neck"] if variant == "full" else ["tdc", "neck"]
        def step_main(batch):
            clips, targets = _stack_clips(batch, dtype)
            raw = model.forward(clips, bn_mode="train", frozen_infer=True)
            return detection_loss(raw, targets).total
        run_stage("stage3_main", 3, cfg.epochs_main, model.parameters(parts), step_main)

    return model, history


def evaluate_model(model: Detector, clips, conf_threshold=0.25, nms_iou=0.5, batch=4):
    """Run inference over ClipSamples; returns (dets, gts) keyed by frame.

    Frame keys combine the segment id and frame index so distinct segments
    never collide.
    """
    dets, gts = {}, {}
    clips = list(clips)
    dtype = model.cfg.dtype
    with T.no_grad():
        for k in range(0, len(clips), batch):
            chunk = clips[k:k + batch]
            x, targets = _stack_clips(chunk, dtype)
            raw = model.forward(x, bn_mode="infer")
            decoded = decode_predictions(raw, conf_threshold=conf_threshold, nms_iou=nms_iou)
            for s, found in zip(chunk, decoded):
                key = (s.seq_id, s.frame_index)
                dets[key] = [(d.box, d.objectness) for d in found]
                gts[key] = list(s.boxes)
    return dets, gts
