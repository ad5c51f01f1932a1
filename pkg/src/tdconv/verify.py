"""Self-check suites behind the ``verify`` command.

Each suite returns rows of ``{"suite", "invariant", "measured",
"tolerance", "pass"}`` so callers can render a table or emit JSON. The
suites re-measure the library's core invariants from scratch; they are the
release gate, not a substitute for the test suite.
"""

from __future__ import annotations

import numpy as np

from . import attention as A
from . import metrics as M
from . import tdc
from . import tensor as T

SUITES = ("tdc", "attention", "grads", "metrics")


def _row(suite, invariant, measured, tolerance):
    return {
        "suite": suite,
        "invariant": invariant,
        "measured": float(measured),
        "tolerance": float(tolerance),
        "pass": bool(measured <= tolerance),
    }


def suite_tdc(seed=0):
    rows = []
    rng = np.random.default_rng(seed)
    for variant in tdc.VARIANTS:
        for kt in tdc.SUPPORTED_KT:
            n = tdc.base_count(variant, kt)
            weights = [T.Tensor(rng.normal(size=(2, 2, 3, 3))) for _ in range(n)]
            params = tdc.TdcBranchParams(variant=variant, kt=kt,
                                         base_weights=weights,
                                         bn=T.BatchNormState(2))
            x = T.Tensor(rng.normal(size=(1, 2, kt + 2, 8, 8)))
            got = tdc.tdc_forward_unified(x, params).data
            want = tdc.tdc_forward_explicit(x, params)
            rows.append(_row("tdc", f"unified=explicit {variant} kt={kt}",
                             np.abs(got - want).max(), 1e-10))
            const = T.Tensor(np.broadcast_to(
                rng.normal(size=(1, 2, 1, 8, 8)), (1, 2, kt + 2, 8, 8)).copy())
            rows.append(_row("tdc", f"constant-input zero {variant} kt={kt}",
                             np.abs(tdc.tdc_forward_unified(const, params).data).max(),
                             1e-10))
    for kt in tdc.SUPPORTED_KT:
        mod = tdc.TdcrModule.init(2, 3, kt=kt, rng=rng)
        for br in mod.branches.values():
            br.bn.running_mu = rng.normal(size=3)
            br.bn.running_var = rng.uniform(0.5, 2.0, size=3)
        fused = tdc.reparameterize(mod)
        x = T.Tensor(rng.normal(size=(1, 2, kt + 1, 8, 8)))
        with T.no_grad():
            branched = tdcr_infer(x, mod)
            single = fused.forward(x).data
        rows.append(_row("tdc", f"reparam equivalence kt={kt}",
                         np.abs(branched - single).max(), 1e-9))
        rows.append(_row("tdc", f"fused tap sums zero kt={kt}",
                         np.abs(fused.weight.sum(axis=2)).max(), 1e-10))
        rows.append(_row("tdc", f"fused params < branched kt={kt}",
                         fused.param_count() - mod.learnable_param_count(), -1))
    return rows


def tdcr_infer(x, mod):
    return tdc.tdcr_forward_train(x, mod, bn_mode="infer").data


def suite_attention(seed=0, n_shapes=30):
    rows = []
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_shapes):
        t = int(rng.integers(1, 8))
        c = int(rng.integers(1, 5))
        h = int(rng.integers(3, 14))
        w = int(rng.integers(3, 14))
        spec = A.WindowSpec(p=int(rng.integers(1, 5)),
                            m=int(rng.integers(2, 6)),
                            shifted=bool(rng.integers(0, 2)))
        x = T.Tensor(rng.normal(size=(t, c, h, w)))
        tokens, meta = A.window_partition(x, spec)
        back = A.window_reverse(tokens, meta)
        worst = max(worst, float(np.abs(back.data - x.data).max()))
    rows.append(_row("attention", f"partition/reverse roundtrip x{n_shapes}",
                     worst, 0.0))
    logits = rng.normal(size=(4, 6, 9)) * 20
    probs = T.softmax_last(T.Tensor(logits)).data
    rows.append(_row("attention", "softmax rows stochastic",
                     np.abs(probs.sum(axis=-1) - 1.0).max(), 1e-12))
    # masked pairs must carry (numerically) zero attention weight
    masked = logits.copy()
    masked[..., 0] = -1e9
    probs = T.softmax_last(T.Tensor(masked)).data
    rows.append(_row("attention", "masked tokens get zero weight",
                     probs[..., 0].max(), 1e-12))
    return rows


def suite_grads(seed=0):
    rows = []
    rng = np.random.default_rng(seed)

    x = T.Tensor(rng.normal(size=(1, 2, 4, 5, 5)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(3, 2, 3, 3, 3)) * 0.3, requires_grad=True)
    def conv_loss():
        return T.tsum(T.mul(T.conv3d(x, w, spatial_pad=1), 0.1))
    rows.append(_row("grads", "conv3d", T.grad_check(conv_loss, [x, w]), 1e-6))

    mod = tdc.TdcrModule.init(2, 2, kt=5, rng=rng)
    xin = T.Tensor(rng.normal(size=(1, 2, 6, 6, 6)), requires_grad=True)
    # plain sums of train-mode BN output cancel to ~0 gradient; random
    # projection keeps every parameter's gradient well away from FD noise
    proj = T.Tensor(rng.uniform(0.5, 1.0, size=(1, 2, 6, 6, 6)))
    def tdcr_loss():
        return T.tsum(T.mul(tdc.tdcr_forward_train(xin, mod, bn_mode="train"), proj))
    rows.append(_row("grads", "tdcr train forward",
                     T.grad_check(tdcr_loss, mod.parameters() + [xin],
                                  max_total=120, rng=np.random.default_rng(1)),
                     1e-6))

    ap = A.AttentionParams.init(d=8, n_h=2, p=2, m=3, rng=rng)
    spec = A.WindowSpec(p=2, m=3, shifted=True)
    xa = T.Tensor(rng.normal(size=(3, 8, 5, 5)), requires_grad=True)
    def attn_loss():
        return T.tsum(T.mul(A.sa_block(xa, ap, shifted=True), 0.1))
    rows.append(_row("grads", "shifted window attention",
                     T.grad_check(attn_loss, ap.parameters() + [xa],
                                  max_total=120, rng=np.random.default_rng(2)),
                     1e-6))
    return rows


def suite_metrics():
    rows = []
    v = M.iou((0.0, 0.0, 2.0, 2.0), (1.0, 1.0, 2.0, 2.0))
    rows.append(_row("metrics", "IoU corner case 1/7", abs(v - 1.0 / 7.0), 1e-12))

    dets = {"f": [((0.0, 0.0, 2.0, 2.0), 0.9), ((10.0, 10.0, 2.0, 2.0), 0.8)]}
    gts = {"f": [(0.0, 0.0, 2.0, 2.0)]}
    m = M.match_detections(dets, gts)
    rows.append(_row("metrics", "AP two-det case = 1.0", abs(M.ap50(m) - 1.0), 1e-12))

    dets = {"f": [((10.0, 10.0, 2.0, 2.0), 0.9), ((0.0, 0.0, 2.0, 2.0), 0.8)]}
    m = M.match_detections(dets, gts)
    rows.append(_row("metrics", "AP two-det case = 0.5", abs(M.ap50(m) - 0.5), 1e-12))

    # one perfect detection against two ground truths: P=1, R=1/2, F1=2/3
    dets = {"f": [((0.0, 0.0, 2.0, 2.0), 0.9)]}
    gts2 = {"f": [(0.0, 0.0, 2.0, 2.0), (20.0, 20.0, 2.0, 2.0)]}
    m = M.match_detections(dets, gts2)
    _p, _r, f1 = M.prf1(m)
    rows.append(_row("metrics", "F1 = 2/3 case", abs(f1 - 2.0 / 3.0), 1e-12))
    return rows


def run_suites(names, seed=0):
    rows = []
    for name in names:
        if name == "tdc":
            rows.extend(suite_tdc(seed))
        elif name == "attention":
            rows.extend(suite_attention(seed))
        elif name == "grads":
            rows.extend(suite_grads(seed))
        elif name == "metrics":
            rows.extend(suite_metrics())
        else:
            raise ValueError(f"unknown suite {name!r}")
    return rows
