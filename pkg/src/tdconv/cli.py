"""Command-line surface: gen-data, train, eval, fuse, verify.

Configuration is a flat ``key = value`` file (``#`` comments, dotted keys)
overridden by repeatable ``--set key=value`` flags; every command records
the fully resolved config, with per-key provenance, in a manifest inside
its output directory. Exit codes: 0 success, 1 verification or evaluation
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as ME
from . import model as MO
from . import report, verify
from .tensor import ConfigurationError, NumericDomainError

DEFAULTS = {
    "seed": 0,
    "dtype": "float64",
    "data.height": 128,
    "data.width": 128,
    "data.num_sequences": 4,
    "data.num_frames": 200,
    "data.targets": 2,
    "data.clutter": 3,
    "data.noise": 1.0,
    "data.jitter": 4,
    "data.scr_lo": 5.0,
    "data.scr_hi": 15.0,
    "split.clip_len": 50,
    "split.ratio": 0.8,
    "split.align": True,
    "split.max_shift": 8,
    "model.variant": "full",
    "model.widths": "16,32,64,128",
    "model.kt": 5,
    "model.t": 5,
    "model.heads": 4,
    "model.window_p": 5,
    "model.window_m": 8,
    "model.neck_width": 0,
    "train.batch": 4,
    "train.epochs_2d": 2,
    "train.epochs_3d": 2,
    "train.epochs_main": 4,
    "train.lr": 1e-3,
    "train.weight_decay": 1e-4,
    "train.clip_stride": 1,
    "eval.conf": 0.05,
    "eval.nms": 0.5,
    "eval.iou": 0.5,
}


class UsageError(Exception):
    """Bad invocation or config; maps to exit code 2."""


class VerificationFailure(Exception):
    """A check or evaluation failed; maps to exit code 1."""


def _convert(key, raw):
    if key not in DEFAULTS:
        raise UsageError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise UsageError(f"bad value {raw!r} for config key {key!r}")


def parse_config_file(path):
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        key = key.strip()
        values[key] = _convert(key, raw)
    return values


def resolve_config(args):
    """Defaults <- config file <- flags; tracks where each value came from."""
    values = dict(DEFAULTS)
    provenance = {k: "default" for k in DEFAULTS}
    if getattr(args, "config", None):
        for k, v in parse_config_file(args.config).items():
            values[k], provenance[k] = v, "file"
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, raw = item.split("=", 1)
        values[k.strip()] = _convert(k.strip(), raw)
        provenance[k.strip()] = "flag"
    if getattr(args, "seed", None) is not None:
        values["seed"], provenance["seed"] = args.seed, "flag"
    if getattr(args, "f32", False):
        values["dtype"], provenance["dtype"] = "float32", "flag"
    return values, provenance


def write_manifest(out_dir, command, values, provenance):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": values,
        "provenance": provenance,
        "version": 1,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _dtype(values):
    return np.float32 if values["dtype"] == "float32" else np.float64


def model_config(values):
    widths = tuple(int(x) for x in str(values["model.widths"]).split(","))
    if len(widths) != 4:
        raise UsageError(f"model.widths needs 4 entries, got {values['model.widths']!r}")
    return MO.DetectorConfig(
        variant=values["model.variant"],
        widths=widths,
        kt=values["model.kt"],
        t=values["model.t"],
        n_heads=values["model.heads"],
        window_p=values["model.window_p"],
        window_m=values["model.window_m"],
        neck_width=values["model.neck_width"],
        dtype=_dtype(values),
    )


def _load_split(values, data_dir):
    if not Path(data_dir).is_dir():
        raise UsageError(f"dataset path {data_dir} does not exist")
    seqs = D.load_dataset(data_dir)
    train, val = D.dataset_split(
        seqs, clip_len=values["split.clip_len"],
        ratio=values["split.ratio"], seed=values["seed"])
    if values["split.align"]:
        D.attach_shifts(train + val, max_shift=values["split.max_shift"])
    return train, val


# -- gen-data -----------------------------------------------------------------


def cmd_gen_data(args):
    values, provenance = resolve_config(args)
    if args.targets is not None:
        values["data.targets"], provenance["data.targets"] = args.targets, "flag"
    out = Path(args.out_dir)
    if out.is_dir() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in range(values["data.num_sequences"]):
        cfg = D.SceneConfig(
            height=values["data.height"], width=values["data.width"],
            num_frames=values["data.num_frames"],
            num_targets=values["data.targets"],
            num_clutter=values["data.clutter"],
            noise_sigma=values["data.noise"],
            jitter_amplitude=values["data.jitter"],
            scr_range=(values["data.scr_lo"], values["data.scr_hi"]),
            seed=values["seed"] * 1000 + s,
        )
        frames, ann = D.generate_sequence(cfg)
        seq_id = f"{s:03d}"
        D.save_sequence(out, seq_id, frames, ann)
        rows.append((seq_id, frames.shape[0], values["data.targets"],
                     sum(len(b) for b in ann)))
    write_manifest(out, "gen-data", values, provenance)
    print(f"{'sequence':<10} {'frames':>8} {'targets':>8} {'boxes':>8}")
    for seq_id, nf, nt, nb in rows:
        print(f"seq_{seq_id:<6} {nf:>8} {nt:>8} {nb:>8}")
    print(f"wrote {len(rows)} sequences to {out}")
    return 0


# -- train --------------------------------------------------------------------

_STAGE_NUMBERS = {"stage1_2d": 1, "stage2_3d": 2, "stage3_main": 3}


def cmd_train(args):
    values, provenance = resolve_config(args)
    mcfg = model_config(values)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    if args.dry_run:
        model = MO.Detector(mcfg, seed=values["seed"])
        visitor = ME.CountVisitor()
        shape = (1, 1, mcfg.t, values["data.height"], values["data.width"])
        model.count_into(visitor, shape)
        print(f"variant {mcfg.variant}, input {shape}")
        print(visitor.table())
        return 0

    train_segs, _val = _load_split(values, args.data)
    clips = list(D.iterate_clips(train_segs, T=mcfg.t))
    tcfg = MO.TrainConfig(
        model=mcfg, batch=values["train.batch"],
        epochs_2d=values["train.epochs_2d"],
        epochs_3d=values["train.epochs_3d"],
        epochs_main=values["train.epochs_main"],
        lr=values["train.lr"], weight_decay=values["train.weight_decay"],
        clip_stride=values["train.clip_stride"],
    )

    model, start_stage = None, 1
    if args.resume:
        model, meta = MO.load_checkpoint(args.resume)
        stage = meta.get("stage")
        if stage not in _STAGE_NUMBERS:
            raise UsageError(f"{args.resume} is not a stage checkpoint")
        if meta["variant"] != mcfg.variant:
            raise UsageError(
                f"checkpoint variant {meta['variant']} != config {mcfg.variant}")
        start_stage = _STAGE_NUMBERS[stage] + 1
        print(f"resuming after {stage} (next stage {start_stage})")

    def on_stage(name, mdl, losses):
        MO.save_checkpoint(run_dir / f"{name}.ckpt", mdl, {"stage": name})
        print(f"{name}: {len(losses)} steps, last loss {losses[-1]:.4f}")

    write_manifest(run_dir, "train", values, provenance)
    try:
        model, history = MO.train_loop(
            clips, tcfg, seed=values["seed"], model=model,
            start_stage=start_stage, stage_callback=on_stage)
    except NumericDomainError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    MO.save_checkpoint(run_dir / "model.ckpt", model, {"stage": "final"})
    with open(run_dir / "history.json", "w") as fh:
        json.dump(history, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if any(history.values()):
        report.loss_history_figure(history, run_dir / "loss_history.png")
    print(f"checkpoint written to {run_dir / 'model.ckpt'}")
    return 0


# -- eval ---------------------------------------------------------------------


def _load_detections(path):
    dets = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        key = (rec["seq"], rec["frame"])
        dets[key] = [((b["x"], b["y"], b["w"], b["h"]), b["score"])
                     for b in rec["boxes"]]
    return dets


def cmd_eval(args):
    values, provenance = resolve_config(args)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _train, val_segs = _load_split(values, args.data)
    mcfg = model_config(values)
    clips = list(D.iterate_clips(val_segs, T=mcfg.t))
    gts = {(s.seq_id, s.frame_index): list(s.boxes) for s in clips}

    if args.detections:
        dets = _load_detections(args.detections)
        missing = set(dets) - set(gts)
        if missing:
            raise UsageError(f"detections reference unknown frames: {sorted(missing)[:3]}")
        dets = {k: dets.get(k, []) for k in gts}
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --detections")
        model, meta = MO.load_checkpoint(args.checkpoint)
        mismatches = [
            k for k, v in (("variant", mcfg.variant), ("kt", mcfg.kt),
                           ("t", mcfg.t), ("widths", list(mcfg.widths)))
            if meta[k] != v
        ]
        if mismatches:
            raise UsageError(
                f"checkpoint does not match config on {mismatches}; "
                "override with --set model.<key>=...")
        dets, gts = MO.evaluate_model(
            model, clips, conf_threshold=values["eval.conf"],
            nms_iou=values["eval.nms"])
        if args.heatmap_dir:
            for i, s in enumerate(clips[: args.heatmap_clips]):
                report.stage_heatmaps(model, s.frames, args.heatmap_dir,
                                      prefix=f"clip{i:03d}")

    try:
        summary, (recall, precision) = ME.evaluation_summary(
            dets, gts, iou_thr=values["eval.iou"])
    except ValueError as exc:
        raise VerificationFailure(f"evaluation failed: {exc}")
    write_manifest(run_dir, "eval", values, provenance)
    report.write_metrics(run_dir, summary)
    report.pr_curve_figure(precision, recall, run_dir / "pr_curve.png",
                           ap=summary["ap50"])
    for key in ("ap50", "precision", "recall", "f1", "conf_threshold"):
        print(f"{key:<16} {summary[key]:.4f}")
    print(f"metrics written to {run_dir}")
    return 0


# -- fuse ---------------------------------------------------------------------


def cmd_fuse(args):
    model, meta = MO.load_checkpoint(args.checkpoint_in)
    if meta.get("fused"):
        print("warning: checkpoint already fused; copying unchanged",
              file=sys.stderr)
        shutil.copyfile(args.checkpoint_in, args.checkpoint_out)
        return 0
    if "tdc" not in model.backbones:
        print("warning: no re-parameterizable layers in this variant; "
              "copying unchanged", file=sys.stderr)
        shutil.copyfile(args.checkpoint_in, args.checkpoint_out)
        return 0

    t = model.cfg.t
    shape = (1, 1, t, 32, 32)
    params_before, macs_before = ME.count_params_flops(model, shape)
    rng = np.random.default_rng(0)
    probes = [rng.normal(size=shape).astype(model.cfg.dtype) for _ in range(5)]
    from .tensor import Tensor, no_grad
    with no_grad():
        before = [
            np.concatenate([lvl.data.ravel() for lvl in
                            model.forward(Tensor(p), bn_mode="infer")])
            for p in probes
        ]
        model.fuse()
        after = [
            np.concatenate([lvl.data.ravel() for lvl in
                            model.forward(Tensor(p), bn_mode="infer")])
            for p in probes
        ]
    diff = max(np.abs(b - a).max() for b, a in zip(before, after))
    tol = 1e-9 if model.cfg.dtype == np.float64 else 1e-3
    params_after, macs_after = ME.count_params_flops(model, shape)
    print(f"{'':<10} {'params':>12} {'MACs':>16}")
    print(f"{'branched':<10} {params_before:>12} {macs_before:>16}")
    print(f"{'fused':<10} {params_after:>12} {macs_after:>16}")
    print(f"probe max abs diff {diff:.3e} (tolerance {tol:.0e})")
    if diff >= tol:
        print("fusion verification FAILED; no output written", file=sys.stderr)
        return 1
    MO.save_checkpoint(args.checkpoint_out, model, {"stage": meta.get("stage")})
    print(f"fused checkpoint written to {args.checkpoint_out}")
    return 0


# -- verify -------------------------------------------------------------------


def cmd_verify(args):
    values, _prov = resolve_config(args)
    names = list(verify.SUITES) if args.suite == "all" else [args.suite]
    rows = verify.run_suites(names, seed=values["seed"])
    width = max(len(r["invariant"]) for r in rows) + 2
    for r in rows:
        state = "pass" if r["pass"] else "FAIL"
        print(f"{state:<6} {r['suite']:<10} {r['invariant']:<{width}} "
              f"measured {r['measured']:.3e}  tol {r['tolerance']:.0e}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump({"rows": rows, "pass": all(r["pass"] for r in rows)},
                      fh, indent=2)
            fh.write("\n")
    failed = [r for r in rows if not r["pass"]]
    print(f"{len(rows) - len(failed)}/{len(rows)} invariants hold")
    return 1 if failed else 0


# -- entry point --------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--f32", action="store_true",
                        help="run in float32 instead of float64")
    common.add_argument("--force", action="store_true",
                        help="allow writing into a non-empty directory")

    parser = argparse.ArgumentParser(prog="tdconv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="write a synthetic benchmark dataset")
    p.add_argument("out_dir")
    p.add_argument("--targets", type=int, help="targets per sequence")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="run staged training")
    p.add_argument("run_dir")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--dry-run", action="store_true",
                   help="print the param/FLOP table and exit")
    p.add_argument("--resume", help="stage checkpoint to resume after")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="score a checkpoint on the validation split")
    p.add_argument("run_dir")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--detections", help="JSONL detections to score instead")
    p.add_argument("--heatmap-dir", help="dump per-stage activation PNGs here")
    p.add_argument("--heatmap-clips", type=int, default=4)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("fuse", parents=[common],
                       help="re-parameterize a checkpoint for inference")
    p.add_argument("checkpoint_in")
    p.add_argument("checkpoint_out")
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("verify", parents=[common], help="run self-check suites")
    p.add_argument("suite", choices=list(verify.SUITES) + ["all"])
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except VerificationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
