"""Detector assembly, loss, decoding, and training-loop tests."""

import numpy as np
import pytest

from tdconv import data as D
from tdconv import model as M
from tdconv import tdc
from tdconv import tensor as T
from tdconv.tensor import ConfigurationError, NumericDomainError, Tensor

TINY = dict(widths=(4, 8, 16, 32), window_m=4)


def tiny_cfg(variant="tdcr", **kw):
    args = dict(TINY)
    args.update(kw)
    return M.DetectorConfig(variant=variant, **args)


def rand_clip(shape=(1, 1, 5, 32, 32), seed=0, dtype=np.float64):
    return Tensor(np.random.default_rng(seed).normal(size=shape).astype(dtype))


class TestBackbone:
    def test_export_shapes_default_widths(self):
        cfg = M.BackboneConfig()  # widths (16, 32, 64, 128)
        bb = M.Backbone("tdc", cfg)
        x = rand_clip((1, 1, 5, 128, 128))
        feats = bb.forward(x, bn_mode="infer")
        assert [f.shape for f in feats] == [
            (1, 32, 5, 32, 32), (1, 64, 5, 16, 16), (1, 128, 5, 8, 8)]

    def test_export_shapes_all_kinds_tiny(self):
        cfg = M.BackboneConfig(widths=(4, 8, 16, 32))
        for kind, t in (("tdc", 5), ("conv3d", 5), ("conv2d", 1)):
            bb = M.Backbone(kind, cfg)
            feats = bb.forward(rand_clip((2, 1, t, 32, 32)), bn_mode="infer")
            assert [f.shape for f in feats] == [
                (2, 8, t, 8, 8), (2, 16, t, 4, 4), (2, 32, t, 2, 2)]

    def test_first_tdcr_zero_on_constant_input(self):
        cfg = M.BackboneConfig(widths=(4, 8, 16, 32))
        bb = M.Backbone("tdc", cfg)
        frame = np.random.default_rng(1).normal(size=(1, 1, 1, 32, 32))
        x = Tensor(np.broadcast_to(frame, (1, 1, 5, 32, 32)).copy())
        h = T.silu(bb.stem.forward(x, temporal_mode="causal_replicate"))
        for br in bb.stages[0]["block"].branches.values():
            out = tdc.tdc_forward_unified(h, br)
            assert np.abs(out.data).max() < 1e-10

    def test_forward_deterministic(self):
        outs = []
        for _ in range(2):
            bb = M.Backbone("conv3d", M.BackboneConfig(widths=(4, 8, 16, 32)),
                            rng=np.random.default_rng(3))
            outs.append(bb.forward(rand_clip(), bn_mode="infer"))
        for a, b in zip(*outs):
            assert np.array_equal(a.data, b.data)

    def test_divisibility_error(self):
        bb = M.Backbone("tdc", M.BackboneConfig(widths=(4, 8, 16, 32)))
        with pytest.raises(ConfigurationError):
            bb.forward(rand_clip((1, 1, 5, 40, 40)))

    def test_four_stage_invariant(self):
        with pytest.raises(ConfigurationError):
            M.BackboneConfig(widths=(4, 8, 16))


class TestNeckHead:
    @staticmethod
    def feats(n=1, widths=(8, 16, 32), hw=8):
        rng = np.random.default_rng(0)
        return [Tensor(rng.normal(size=(n, c, hw // 2 ** i, hw // 2 ** i)))
                for i, c in enumerate(widths)]

    def test_output_grids_match_inputs(self):
        nh = M.NeckHead((8, 16, 32), 16)
        raws = nh.forward(self.feats())
        assert [r.shape for r in raws] == [(1, 5, 8, 8), (1, 5, 4, 4), (1, 5, 2, 2)]

    def test_zero_head_gives_prior_boxes(self):
        nh = M.NeckHead((8, 16, 32), 16)
        nh.head_out.weight.data[:] = 0
        nh.head_out.bias.data[:] = 0
        raws = nh.forward(self.feats())
        for r in raws:
            assert np.all(r.data == 0)
        dets = M.decode_predictions(raws, conf_threshold=0.4)
        for d in dets[0]:
            assert d.objectness == pytest.approx(0.5)
            lvl = M.STRIDES.index(int(d.box[2] / 2))
            s = M.STRIDES[lvl]
            # centers on the cell grid, extents at the 2-stride prior
            assert (d.box[0] / s) % 1.0 == pytest.approx(0.5)
            assert d.box[3] == pytest.approx(2 * s)

    def test_grad_check(self):
        nh = M.NeckHead((4, 8, 16), 8, rng=np.random.default_rng(2))
        feats = self.feats(widths=(4, 8, 16))
        probe = [np.random.default_rng(9).normal(size=(1, 5, 8 // 2 ** i, 8 // 2 ** i))
                 for i in range(3)]

        def loss_fn():
            raws = nh.forward(feats)
            total = None
            for r, pr in zip(raws, probe):
                s = T.tsum(T.mul(r, pr))
                total = s if total is None else T.add(total, s)
            return total

        worst = T.grad_check(loss_fn, nh.parameters(), step=1e-5, max_entries=6,
                             rng=np.random.default_rng(0))
        assert worst < 1e-6


class TestEncodeDecode:
    def test_roundtrip_random_boxes(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            s = M.STRIDES[rng.integers(0, 3)]
            grid = (8, 8)
            box = (float(rng.uniform(1, s * 8 - 1)), float(rng.uniform(1, s * 8 - 1)),
                   float(rng.uniform(2, 12)), float(rng.uniform(2, 12)))
            i, j, dx, dy, tw, th = M.encode_box(box, s, grid)
            back = M.decode_cell(i, j, dx, dy, tw, th, s)
            assert np.allclose(back, box, atol=1e-6)

    def test_assign_level_nearest(self):
        assert M.assign_level((0, 0, 4, 4)) == 0  # size 4 -> stride 4
        assert M.assign_level((0, 0, 8, 8)) == 1
        assert M.assign_level((0, 0, 30, 30)) == 2
        assert M.assign_level((0, 0, 6, 6)) == 0  # 6 ties 4 vs 8, finer wins


def naive_loss(raw, targets, strides=M.STRIDES):
    """Scalar-loop restatement of the detection loss."""
    import math
    arrays = [r.data for r in raw]
    n_img = arrays[0].shape[0]

    def bce(logit, y):
        return math.log(1 + math.exp(-abs(logit))) + max(logit, 0) - logit * y

    pos = []
    obj_t = [np.zeros((n_img, a.shape[2], a.shape[3])) for a in arrays]
    for n in range(n_img):
        for box in targets[n]:
            size = math.sqrt(box[2] * box[3])
            lvl = min(range(len(strides)), key=lambda l: abs(strides[l] - size))
            s = strides[lvl]
            j = min(max(int(box[0] / s), 0), arrays[lvl].shape[3] - 1)
            i = min(max(int(box[1] / s), 0), arrays[lvl].shape[2] - 1)
            obj_t[lvl][n, i, j] = 1.0
            pos.append((n, lvl, i, j, box))
    tot_cells = sum(a.shape[0] * a.shape[2] * a.shape[3] for a in arrays)
    l_obj = sum(
        bce(arrays[lvl][n, 4, i, j], obj_t[lvl][n, i, j])
        for lvl in range(3) for n in range(n_img)
        for i in range(arrays[lvl].shape[2]) for j in range(arrays[lvl].shape[3])
    ) / tot_cells
    l_reg = l_cls = 0.0
    for n, lvl, i, j, box in pos:
        s = strides[lvl]
        dx, dy, tw, th, ol = arrays[lvl][n, :, i, j]
        px, py = (dx + j + 0.5) * s, (dy + i + 0.5) * s
        pw, ph = math.exp(tw) * 2 * s, math.exp(th) * 2 * s
        from tdconv.metrics import iou
        l_reg += 1 - iou((px, py, pw, ph), box)
        l_cls += bce(ol, 1.0)
    k = len(pos)
    return (l_reg / k if k else 0.0) + l_obj + (l_cls / k if k else 0.0)


class TestDetectionLoss:
    @staticmethod
    def random_raw(n=2, seed=0):
        rng = np.random.default_rng(seed)
        return [Tensor(rng.normal(size=(n, 5, 8 // 2 ** l, 8 // 2 ** l)) * 0.5,
                       requires_grad=True) for l in range(3)]

    def test_perfect_box_zero_reg(self):
        raw = [Tensor(np.zeros((1, 5, 8, 8))), Tensor(np.zeros((1, 5, 4, 4))),
               Tensor(np.zeros((1, 5, 2, 2)))]
        box = (10.0, 12.0, 5.0, 5.0)  # size 5 -> stride-4 level
        i, j, dx, dy, tw, th = M.encode_box(box, 4, (8, 8))
        raw[0].data[0, :4, i, j] = [dx, dy, tw, th]
        lb = M.detection_loss(raw, [[box]])
        assert lb.l_reg.item() == pytest.approx(0.0, abs=1e-12)

    def test_bce_half_is_ln2(self):
        raw = [Tensor(np.zeros((1, 5, 8, 8))), Tensor(np.zeros((1, 5, 4, 4))),
               Tensor(np.zeros((1, 5, 2, 2)))]
        lb = M.detection_loss(raw, [[(6.0, 6.0, 8.0, 8.0)]])
        assert lb.l_cls.item() == pytest.approx(np.log(2), abs=1e-12)

    def test_total_is_sum(self):
        raw = self.random_raw()
        targets = [[(10.0, 12.0, 5.0, 5.0)], [(20.0, 8.0, 4.0, 6.0), (5.0, 25.0, 7.0, 7.0)]]
        lb = M.detection_loss(raw, targets)
        assert lb.total.item() == pytest.approx(
            lb.l_reg.item() + lb.l_obj.item() + lb.l_cls.item(), abs=1e-12)

    def test_matches_naive_oracle(self):
        for seed in range(5):
            raw = self.random_raw(seed=seed)
            rng = np.random.default_rng(seed + 50)
            targets = [
                [(float(rng.uniform(2, 30)), float(rng.uniform(2, 30)),
                  float(rng.uniform(3, 10)), float(rng.uniform(3, 10)))
                 for _ in range(rng.integers(0, 3))]
                for _ in range(2)
            ]
            lb = M.detection_loss(raw, targets)
            assert lb.total.item() == pytest.approx(naive_loss(raw, targets), abs=1e-10)

    def test_no_positives(self):
        raw = self.random_raw()
        lb = M.detection_loss(raw, [[], []])
        assert lb.l_reg.item() == 0.0 and lb.l_cls.item() == 0.0
        assert lb.l_obj.item() > 0

    def test_loss_grad_check(self):
        raw = self.random_raw(n=1, seed=3)
        targets = [[(10.0, 12.0, 5.0, 5.0), (20.0, 20.0, 9.0, 9.0)]]

        def loss_fn():
            return M.detection_loss(raw, targets).total

        worst = T.grad_check(loss_fn, raw, step=1e-5, max_entries=15,
                             rng=np.random.default_rng(0))
        assert worst < 1e-6


class TestDecodePredictions:
    def test_all_suppressed_logits_empty(self):
        raw = [Tensor(np.full((1, 5, 4, 4), -1e9))] * 3
        assert M.decode_predictions(raw) == [[]]

    def test_nms_keeps_highest(self):
        arr = np.full((1, 5, 4, 4), -1e9)
        arr[0, :, 1, 1] = [0.0, 0.0, 0.0, 0.0, np.log(9)]  # conf 0.9
        arr[0, :, 1, 2] = [-1.0, 0.0, 0.0, 0.0, np.log(4)]  # same box, conf 0.8
        raw = [Tensor(arr), Tensor(np.full((1, 5, 2, 2), -1e9)),
               Tensor(np.full((1, 5, 1, 1), -1e9))]
        dets = M.decode_predictions(raw, strides=(4, 8, 16), conf_threshold=0.25)
        assert len(dets[0]) == 1
        assert dets[0][0].objectness == pytest.approx(0.9)

    def test_confidence_sorted(self):
        rng = np.random.default_rng(6)
        raw = [Tensor(rng.normal(size=(1, 5, 8, 8))), Tensor(rng.normal(size=(1, 5, 4, 4))),
               Tensor(rng.normal(size=(1, 5, 2, 2)))]
        dets = M.decode_predictions(raw, conf_threshold=0.1, nms_iou=0.9)
        confs = [d.objectness for d in dets[0]]
        assert confs == sorted(confs, reverse=True)


class TestDetector:
    def test_variant_outputs_and_determinism(self):
        x = rand_clip((2, 1, 5, 32, 32), seed=1)
        for variant in ("baseline3d", "tdcr", "full"):
            raws = []
            for _ in range(2):
                det = M.Detector(tiny_cfg(variant), seed=0)
                raws.append(det.forward(x, bn_mode="infer"))
            assert [r.shape for r in raws[0]] == [(2, 5, 8, 8), (2, 5, 4, 4), (2, 5, 2, 2)]
            for a, b in zip(*raws):
                assert np.array_equal(a.data, b.data)

    def test_full_starts_as_tdc_path(self):
        det = M.Detector(tiny_cfg("full"), seed=0)
        x = rand_clip(seed=2)
        raw_full = det.forward(x, bn_mode="infer")
        feats = det.backbones["tdc"].forward(x, bn_mode="infer")
        raw_tdc = det.neck.forward([det._last_t(f) for f in feats])
        for a, b in zip(raw_full, raw_tdc):
            assert np.array_equal(a.data, b.data)

    def test_fused_equivalence_end_to_end(self):
        x = rand_clip(seed=3)
        for variant in ("tdcr", "full"):
            det = M.Detector(tiny_cfg(variant), seed=1)
            # nontrivial BN stats so fusion actually folds something
            for stage in det.backbones["tdc"].stages:
                for br in stage["block"].branches.values():
                    rng = np.random.default_rng(8)
                    br.bn.running_mu = rng.normal(size=br.bn.running_mu.shape) * 0.1
                    br.bn.running_var = rng.uniform(0.5, 2.0, size=br.bn.running_var.shape)
            before = det.forward(x, bn_mode="infer")
            det.fuse()
            after = det.forward(x, bn_mode="infer")
            for a, b in zip(before, after):
                assert np.abs(a.data - b.data).max() < 1e-6

    def test_checkpoint_roundtrip(self, tmp_path):
        det = M.Detector(tiny_cfg("full"), seed=4)
        path = tmp_path / "model.ckpt"
        M.save_checkpoint(path, det, extra_meta={"note": "test"})
        loaded, meta = M.load_checkpoint(path)
        assert meta["variant"] == "full" and meta["note"] == "test"
        x = rand_clip(seed=5)
        a = det.forward(x, bn_mode="infer")
        b = loaded.forward(x, bn_mode="infer")
        for u, v in zip(a, b):
            assert np.array_equal(u.data, v.data)

    def test_fused_checkpoint_roundtrip(self, tmp_path):
        det = M.Detector(tiny_cfg("tdcr"), seed=4)
        det.fuse()
        path = tmp_path / "fused.ckpt"
        M.save_checkpoint(path, det)
        loaded, meta = M.load_checkpoint(path)
        assert meta["fused"] and loaded.fused
        x = rand_clip(seed=6)
        for u, v in zip(det.forward(x, bn_mode="infer"),
                        loaded.forward(x, bn_mode="infer")):
            assert np.array_equal(u.data, v.data)

    def test_count_params_flops(self):
        from tdconv.metrics import count_params_flops
        det = M.Detector(tiny_cfg("tdcr"), seed=0)
        params, macs = count_params_flops(det, (1, 1, 5, 32, 32))
        learnable = sum(p.size for p in det.parameters())
        # analytic count covers learnable weights (BN stats are not params)
        assert params == learnable
        assert macs > 0
        det.fuse()
        fparams, fmacs = count_params_flops(det, (1, 1, 5, 32, 32))
        assert fparams < params and fmacs < macs


def toy_clips(n=8, size=32, seed=0):
    """Tiny synthetic clip set with one bright moving target per clip."""
    cfg = D.SceneConfig(height=size, width=size, num_frames=n + 4, num_targets=1,
                        num_clutter=0, noise_sigma=0.5, jitter_amplitude=2,
                        size_range=(4.0, 6.0), seed=seed)
    frames, ann = D.generate_sequence(cfg)
    clips = []
    for i in range(4, 4 + n):
        clips.append(D.ClipSample(frames=frames[i - 4:i + 1], boxes=ann[i],
                                  seq_id="toy", frame_index=i))
    return clips


class TestTrainLoop:
    def test_loss_decreases_on_fixed_batch(self):
        from tdconv.optim import Adam
        clips = toy_clips(4)
        cfg = tiny_cfg("tdcr", dtype=np.float64)
        det = M.Detector(cfg, seed=0)
        x, targets = M._stack_clips(clips[:2], np.float64)
        # lr pinned at 3e-4 for this regression fixture: the training default
        # 1e-3 dips non-monotonically around step 5 on this batch
        opt = Adam(det.parameters(), lr=3e-4, weight_decay=1e-4)
        losses = []
        for _ in range(10):
            opt.zero_grad()
            loss = M.detection_loss(det.forward(x, bn_mode="train"), targets).total
            losses.append(loss.item())
            loss.backward()
            opt.step()
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_seed_determinism(self):
        clips = toy_clips(6)
        tcfg = M.TrainConfig(model=tiny_cfg("tdcr"), batch=2,
                             epochs_main=1)
        h1 = M.train_loop(clips, tcfg, seed=0)[1]
        h2 = M.train_loop(clips, tcfg, seed=0)[1]
        assert h1 == h2
        h3 = M.train_loop(clips, tcfg, seed=1)[1]
        assert h1 != h3

    def test_frozen_stages_untouched(self):
        clips = toy_clips(4)
        base = dict(model=tiny_cfg("full"), batch=2, epochs_2d=1, epochs_3d=1)
        m_short, _ = M.train_loop(clips, M.TrainConfig(**base, epochs_main=0), seed=0)
        m_long, _ = M.train_loop(clips, M.TrainConfig(**base, epochs_main=1), seed=0)
        short = m_short.state_arrays()
        long = m_long.state_arrays()
        for key in short:
            if key.startswith(("stf.", "sf.")):
                assert np.array_equal(short[key], long[key]), key
        # and the trained parts did move
        assert any(not np.array_equal(short[k], long[k])
                   for k in short if k.startswith("tdc."))

    def test_nan_aborts(self):
        clips = toy_clips(4)
        clips[0].frames[0] = np.nan
        tcfg = M.TrainConfig(model=tiny_cfg("tdcr"), batch=4, epochs_main=1)
        with pytest.raises(NumericDomainError):
            M.train_loop(clips, tcfg, seed=0)

    def test_evaluate_model_shapes(self):
        clips = toy_clips(4)
        det = M.Detector(tiny_cfg("tdcr"), seed=0)
        dets, gts = M.evaluate_model(det, clips, conf_threshold=0.9)
        assert set(dets) == set(gts) == {("toy", i) for i in range(4, 8)}
        assert all(len(g) == 1 for g in gts.values())
