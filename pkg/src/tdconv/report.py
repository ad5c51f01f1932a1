"""Evaluation artifacts: metrics files, figures, and activation heatmaps.

Everything here writes to disk and returns the paths it wrote; no state is
kept. Figures use the Agg backend so reports render in headless runs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from . import tensor as T
from .model import normalize_frames


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def write_metrics(out_dir, metrics, stem="metrics"):
    """Write one metrics dict as JSON plus a flat two-column CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    with open(json_path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    csv_path = out_dir / f"{stem}.csv"
    flat = _flatten(metrics)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "value"])
        for k in sorted(flat):
            v = flat[k]
            if isinstance(v, float):
                v = f"{v:.10g}"
            writer.writerow([k, v])
    return json_path, csv_path


def pr_curve_figure(precision, recall, path, ap=None):
    """Precision-recall curve with the interpolated envelope overlaid."""
    precision = np.asarray(precision, dtype=float)
    recall = np.asarray(recall, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(recall, precision, lw=1.5, label="raw")
    if precision.size:
        env = np.maximum.accumulate(precision[::-1])[::-1]
        ax.plot(recall, env, lw=1.0, ls="--", label="envelope")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    title = "precision-recall"
    if ap is not None:
        title += f" (AP50 {ap:.3f})"
    ax.set_title(title)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def loss_history_figure(history, path):
    """Per-stage training loss curves on a shared step axis."""
    fig, ax = plt.subplots(figsize=(6, 4))
    offset = 0
    for name, losses in history.items():
        steps = np.arange(offset, offset + len(losses))
        ax.plot(steps, losses, lw=1.0, label=name)
        offset += len(losses)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def _to_png(arr, path):
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi - lo < 1e-12 else (arr - lo) / (hi - lo)
    Image.fromarray((scaled * 255).astype(np.uint8)).save(path)


def stage_heatmaps(model, clip_frames, out_dir, prefix="clip"):
    """Dump per-stage mean-|activation| maps of a clip as grayscale PNGs.

    Uses the variant's primary temporal backbone and the final temporal
    slice of each exported stage. Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kind = "tdc" if "tdc" in model.backbones else "stf"
    x = normalize_frames(np.asarray(clip_frames, dtype=model.cfg.dtype))
    x = x.transpose(1, 0, 2, 3)[None]  # [T,1,H,W] -> [1,1,T,H,W]
    paths = []
    with T.no_grad():
        feats = model.backbones[kind].forward(T.Tensor(x), bn_mode="infer")
    for lvl, feat in enumerate(feats):
        act = np.abs(feat.data[0, :, -1]).mean(axis=0)  # [H, W]
        path = out_dir / f"{prefix}_stage{lvl + 1}.png"
        _to_png(act, path)
        paths.append(path)
    return paths
