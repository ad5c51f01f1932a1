"""Synthetic moving-small-target sequences, alignment, splits, and disk I/O.

Scenes are rendered on a padded world canvas; camera jitter crops a shifted
H x W window per frame so that global shifts are exact integer translations.
Targets are Gaussian intensity bumps with amplitudes solved to hit a drawn
signal-to-clutter ratio (SCR); annotation boxes cover the 2.5-sigma support.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import ConfigurationError


class GenerationError(RuntimeError):
    """Raised when a scene cannot be realized (e.g. target placement fails)."""


@dataclass
class SceneConfig:
    height: int = 128
    width: int = 128
    num_frames: int = 50
    num_targets: int = 2
    size_range: tuple = (3.0, 9.0)  # annotation box side, pixels
    scr_range: tuple = (5.0, 15.0)
    speed_range: tuple = (0.3, 1.2)  # target px/frame, constant velocity
    target_jitter: float = 0.15  # per-frame positional noise, px
    num_clutter: int = 3  # drifting bright blobs
    clutter_sigma_range: tuple = (3.0, 8.0)
    noise_sigma: float = 1.0
    jitter_amplitude: int = 4  # camera shift bound, integer px
    background_level: float = 80.0
    background_contrast: float = 12.0
    seed: int = 0

    def __post_init__(self):
        if self.size_range[0] < 2:
            raise ConfigurationError("target sizes must be >= 2 px")
        if self.scr_range[0] <= 0 or self.scr_range[1] < self.scr_range[0]:
            raise ConfigurationError(f"SCR range must be positive: {self.scr_range}")
        if self.jitter_amplitude >= min(self.height, self.width) / 8:
            raise ConfigurationError("jitter amplitude must be < min(H,W)/8")
        if self.num_frames < 1 or self.num_targets < 0:
            raise ConfigurationError("need >= 1 frame and >= 0 targets")


@dataclass
class ClipSample:
    """T aligned consecutive frames; boxes annotate the last frame."""

    frames: np.ndarray  # [T, 1, H, W]
    boxes: list  # (x, y, w, h) center format for the final frame
    seq_id: str
    frame_index: int


def _smooth(x, radius, passes=3):
    """Separable box blur repeated; approximates a Gaussian."""
    for _ in range(passes):
        for axis in (0, 1):
            k = 2 * radius + 1
            xp = np.pad(x, [(radius, radius) if a == axis else (0, 0) for a in (0, 1)],
                        mode="edge")
            c = np.cumsum(xp, axis=axis, dtype=np.float64)
            c = np.concatenate([np.zeros_like(np.take(c, [0], axis=axis)), c], axis=axis)
            hi = [slice(None)] * 2
            lo = [slice(None)] * 2
            hi[axis] = slice(k, None)
            lo[axis] = slice(0, -k)
            x = (c[tuple(hi)] - c[tuple(lo)]) / k
    return x


def _procedural_background(shape, level, contrast, rng):
    base = rng.normal(0.0, 1.0, size=shape)
    tex = _smooth(base, radius=6, passes=3)
    std = tex.std()
    if std > 0:
        tex = tex / std
    # mild large-scale gradient so the background is not statistically flat
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    grad = (yy / shape[0] - 0.5) * rng.uniform(-0.5, 0.5) \
        + (xx / shape[1] - 0.5) * rng.uniform(-0.5, 0.5)
    return level + contrast * (tex + grad)


def _render_bump(canvas, cy, cx, sigma, amplitude):
    """Add a Gaussian bump; returns the peak pixel value it contributed."""
    r = int(np.ceil(4 * sigma))
    y0, y1 = max(0, int(cy) - r), min(canvas.shape[0], int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(canvas.shape[1], int(cx) + r + 1)
    if y0 >= y1 or x0 >= x1:
        return 0.0
    yy, xx = np.mgrid[y0:y1, x0:x1]
    bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    canvas[y0:y1, x0:x1] += amplitude * bump
    return amplitude * bump.max()


def measure_scr(frame, box):
    """SCR of a box: |peak - local mean| / local std over a 3x-box ring.

    The local statistics exclude the box itself so the target does not
    contaminate its own background estimate.
    """
    x, y, w, h = box
    H, W = frame.shape
    oy0 = max(0, int(np.floor(y - 1.5 * h)))
    oy1 = min(H, int(np.ceil(y + 1.5 * h)) + 1)
    ox0 = max(0, int(np.floor(x - 1.5 * w)))
    ox1 = min(W, int(np.ceil(x + 1.5 * w)) + 1)
    iy0 = max(0, int(np.floor(y - h / 2)))
    iy1 = min(H, int(np.ceil(y + h / 2)) + 1)
    ix0 = max(0, int(np.floor(x - w / 2)))
    ix1 = min(W, int(np.ceil(x + w / 2)) + 1)
    region = frame[oy0:oy1, ox0:ox1]
    mask = np.ones(region.shape, dtype=bool)
    mask[iy0 - oy0:iy1 - oy0, ix0 - ox0:ix1 - ox0] = False
    ring = region[mask]
    std = ring.std()
    if std < 1e-9:
        return 0.0
    peak = frame[iy0:iy1, ix0:ix1].max()
    return abs(peak - ring.mean()) / std


def _boxes_overlap(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return abs(ax - bx) < (aw + bw) / 2 and abs(ay - by) < (ah + bh) / 2


def generate_sequence(cfg: SceneConfig):
    """Render one sequence. Returns (frames [N,1,H,W] float64, annotations).

    annotations[n] is a list of (x, y, w, h) boxes in that frame's
    coordinates. Deterministic per cfg.seed, bit-exact.
    """
    rng = np.random.default_rng(cfg.seed)
    pad = cfg.jitter_amplitude
    world_h, world_w = cfg.height + 2 * pad, cfg.width + 2 * pad
    background = _procedural_background((world_h, world_w), cfg.background_level,
                                        cfg.background_contrast, rng)

    # camera shift per frame, integer, last frame held at zero so the
    # "current" frame is the alignment reference
    shifts = rng.integers(-pad, pad + 1, size=(cfg.num_frames, 2)) if pad else \
        np.zeros((cfg.num_frames, 2), dtype=int)
    shifts[-1] = 0

    # target trajectories in world coordinates, bouncing inside the region
    # visible under every jitter value
    targets = []
    for _ in range(cfg.num_targets):
        size = rng.uniform(*cfg.size_range)
        sigma = size / 5.0  # box covers 2.5 sigma each side
        lo_y = pad + cfg.jitter_amplitude + size / 2 + 1
        hi_y = pad + cfg.height - cfg.jitter_amplitude - size / 2 - 1
        lo_x = pad + cfg.jitter_amplitude + size / 2 + 1
        hi_x = pad + cfg.width - cfg.jitter_amplitude - size / 2 - 1
        if hi_y <= lo_y or hi_x <= lo_x:
            raise GenerationError("image too small for targets under this jitter")
        speed = rng.uniform(*cfg.speed_range)
        angle = rng.uniform(0, 2 * np.pi)
        vel = np.array([speed * np.sin(angle), speed * np.cos(angle)])
        scr_lo, scr_hi = cfg.scr_range
        margin = 0.15 * (scr_hi - scr_lo)
        scr = rng.uniform(scr_lo + margin, scr_hi - margin)
        placed = False
        for _attempt in range(100):
            pos = np.array([rng.uniform(lo_y, hi_y), rng.uniform(lo_x, hi_x)])
            traj = []
            p, v = pos.copy(), vel.copy()
            for _n in range(cfg.num_frames):
                traj.append(p.copy())
                p = p + v + rng.normal(0, cfg.target_jitter, size=2)
                for axis, (lo, hi) in enumerate(((lo_y, hi_y), (lo_x, hi_x))):
                    if p[axis] < lo:
                        p[axis] = 2 * lo - p[axis]
                        v[axis] = -v[axis]
                    elif p[axis] > hi:
                        p[axis] = 2 * hi - p[axis]
                        v[axis] = -v[axis]
            traj = np.array(traj)
            clash = any(
                _boxes_overlap((traj[n, 1], traj[n, 0], size, size),
                               (o["traj"][n, 1], o["traj"][n, 0], o["size"], o["size"]))
                for o in targets for n in range(cfg.num_frames)
            )
            if not clash:
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place target {len(targets)} without overlap in 100 tries")
        targets.append({"traj": traj, "size": size, "sigma": sigma, "scr": scr})

    # drifting clutter blobs, free to roam anywhere on the canvas
    clutter = []
    for _ in range(cfg.num_clutter):
        clutter.append({
            "pos": np.array([rng.uniform(0, world_h), rng.uniform(0, world_w)]),
            "vel": rng.uniform(-1.5, 1.5, size=2),
            "sigma": rng.uniform(*cfg.clutter_sigma_range),
            "amp": rng.uniform(1.5, 4.0) * cfg.background_contrast,
        })

    frames = np.empty((cfg.num_frames, 1, cfg.height, cfg.width))
    annotations = []
    for n in range(cfg.num_frames):
        canvas = background.copy()
        for blob in clutter:
            cy, cx = blob["pos"] + n * blob["vel"]
            _render_bump(canvas, cy, cx, blob["sigma"], blob["amp"])
        # place targets after clutter so amplitudes account for everything
        # underneath; noise variance is folded into the std estimate
        for tgt in targets:
            cy, cx = tgt["traj"][n]
            size = tgt["size"]
            box_world = (cx, cy, size, size)
            ring_mean_std = _local_stats(canvas, box_world)
            mean, std = ring_mean_std
            std_eff = np.sqrt(std ** 2 + cfg.noise_sigma ** 2)
            # unit bump peak on the pixel grid (center rarely pixel-aligned)
            py, px = int(round(cy)), int(round(cx))
            unit_peak = np.exp(-((py - cy) ** 2 + (px - cx) ** 2) / (2 * tgt["sigma"] ** 2))
            need = tgt["scr"] * std_eff - (canvas[py, px] - mean)
            amp = max(need, 0.5 * tgt["scr"] * std_eff) / unit_peak
            _render_bump(canvas, cy, cx, tgt["sigma"], amp)
        if cfg.noise_sigma > 0:
            canvas = canvas + rng.normal(0, cfg.noise_sigma, size=canvas.shape)
        oy, ox = pad + shifts[n, 0], pad + shifts[n, 1]
        frames[n, 0] = np.clip(canvas[oy:oy + cfg.height, ox:ox + cfg.width], 0, 255)
        boxes = []
        for tgt in targets:
            cy, cx = tgt["traj"][n]
            boxes.append((float(cx - ox), float(cy - oy),
                          float(tgt["size"]), float(tgt["size"])))
        annotations.append(boxes)
    return frames, annotations


def _local_stats(canvas, box):
    """(mean, std) of the 3x-box ring around a box, excluding the box."""
    x, y, w, h = box
    H, W = canvas.shape
    oy0 = max(0, int(np.floor(y - 1.5 * h)))
    oy1 = min(H, int(np.ceil(y + 1.5 * h)) + 1)
    ox0 = max(0, int(np.floor(x - 1.5 * w)))
    ox1 = min(W, int(np.ceil(x + 1.5 * w)) + 1)
    iy0 = max(0, int(np.floor(y - h / 2)))
    iy1 = min(H, int(np.ceil(y + h / 2)) + 1)
    ix0 = max(0, int(np.floor(x - w / 2)))
    ix1 = min(W, int(np.ceil(x + w / 2)) + 1)
    region = canvas[oy0:oy1, ox0:ox1]
    mask = np.ones(region.shape, dtype=bool)
    mask[iy0 - oy0:iy1 - oy0, ix0 - ox0:ix1 - ox0] = False
    ring = region[mask]
    return ring.mean(), ring.std()


# -- background alignment ----------------------------------------------------


def translate_replicate(img, dy, dx):
    """Integer translation; exposed border rows/cols filled by replication."""
    if dy == 0 and dx == 0:
        return img.copy()
    pad = max(abs(dy), abs(dx))
    xp = np.pad(img, pad, mode="edge")
    h, w = img.shape
    return xp[pad + dy:pad + dy + h, pad + dx:pad + dx + w].copy()


@dataclass
class AlignResult:
    frames: np.ndarray  # [T, 1, H, W]
    shifts: list  # (dy, dx) estimated camera shift per frame
    degenerate: list = field(default_factory=list)  # frame indices flagged
    at_boundary: list = field(default_factory=list)  # shift hit search edge


def align_background(frames, max_shift):
    """Align every frame to the last by exhaustive integer-shift NCC.

    A frame's shift s satisfies frame == translate_replicate(ref, s), i.e.
    the camera moved by s between that frame and the reference; alignment
    applies the inverse translation. Constant frames get shift (0, 0) and a
    warning; estimates landing on the search boundary are flagged as
    possibly clamped.
    """
    frames = np.asarray(frames, dtype=np.float64)
    T = frames.shape[0]
    m = int(max_shift)
    ref = frames[-1, 0]
    H, W = ref.shape
    if H <= 2 * m + 2 or W <= 2 * m + 2:
        raise ConfigurationError("max_shift too large for frame size")
    core = ref[m:H - m, m:W - m]
    core_c = core - core.mean()
    core_n = np.sqrt((core_c ** 2).sum())
    out = AlignResult(frames=np.empty_like(frames), shifts=[])
    for t in range(T):
        frame = frames[t, 0]
        if frame.std() < 1e-9 or core_n < 1e-9:
            warnings.warn(f"degenerate frame {t} in alignment, using (0,0)")
            out.degenerate.append(t)
            best = (0, 0)
        else:
            best, best_score = (0, 0), -np.inf
            for dy in range(-m, m + 1):
                for dx in range(-m, m + 1):
                    # candidate: frame[y-dy, x-dx] lines up with ref[y, x]
                    win = frame[m - dy:H - m - dy, m - dx:W - m - dx]
                    wc = win - win.mean()
                    denom = np.sqrt((wc ** 2).sum()) * core_n
                    score = (wc * core_c).sum() / denom if denom > 1e-12 else -np.inf
                    if score > best_score:
                        best_score, best = score, (dy, dx)
            if abs(best[0]) == m or abs(best[1]) == m:
                out.at_boundary.append(t)
        out.shifts.append(best)
        out.frames[t, 0] = translate_replicate(frame, -best[0], -best[1])
    return out


# -- splits and clip iteration -----------------------------------------------


@dataclass
class Segment:
    seq_id: str
    start: int
    frames: np.ndarray  # [clip_len, 1, H, W]
    annotations: list  # boxes per frame
    shifts: list = None  # per-frame camera shift rel. to the segment's last frame

    @property
    def segment_id(self):
        return f"{self.seq_id}:{self.start}"


def dataset_split(sequences, clip_len=50, ratio=0.8, seed=0):
    """Cut sequences into clip_len segments, shuffle, split train/val.

    ``sequences`` is a list of (seq_id, frames, annotations). Tails shorter
    than clip_len are dropped. Segments never straddle the split.
    """
    if not sequences:
        raise ConfigurationError("dataset_split needs at least one sequence")
    segments = []
    for seq_id, frames, annotations in sequences:
        n = frames.shape[0]
        for start in range(0, n - clip_len + 1, clip_len):
            segments.append(Segment(
                seq_id=seq_id, start=start,
                frames=frames[start:start + clip_len],
                annotations=annotations[start:start + clip_len],
            ))
    if not segments:
        raise ConfigurationError(f"no sequence reaches clip_len={clip_len}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(segments))
    n_train = int(len(segments) * ratio)
    train = [segments[i] for i in order[:n_train]]
    val = [segments[i] for i in order[n_train:]]
    return train, val


def attach_shifts(segments, max_shift=8):
    """Estimate each segment's per-frame camera shifts in one pass.

    Shifts are relative to the segment's last frame; iterate_clips composes
    them into per-clip relative shifts, so one NCC sweep per segment aligns
    every clip cut from it.
    """
    for seg in segments:
        seg.shifts = align_background(seg.frames, max_shift).shifts
    return segments


def iterate_clips(split, T):
    """Sliding T-frame window over each segment, one clip per frame.

    The first T-1 clips of a segment replicate the segment's earliest frame
    as history, matching inference on a freshly started stream. Segments
    carrying shifts (see attach_shifts) emit history frames aligned to the
    clip's current frame; the current frame itself is never resampled.
    """
    for seg in split:
        n = seg.frames.shape[0]
        if T > n:
            raise ConfigurationError(f"clip length {T} exceeds segment length {n}")
        for i in range(n):
            idx = [max(0, i - (T - 1) + k) for k in range(T)]
            if seg.shifts is None:
                frames = seg.frames[idx]
            else:
                si = seg.shifts[i]
                frames = np.empty((T,) + seg.frames.shape[1:], seg.frames.dtype)
                for k, u in enumerate(idx):
                    # frame_u == translate(scene_i, s_u - s_i); undo it
                    rel = (seg.shifts[u][0] - si[0], seg.shifts[u][1] - si[1])
                    frames[k, 0] = translate_replicate(seg.frames[u, 0],
                                                       -rel[0], -rel[1])
            yield ClipSample(
                frames=frames,
                boxes=list(seg.annotations[i]),
                seq_id=seg.segment_id,
                frame_index=seg.start + i,
            )


# -- on-disk layout ----------------------------------------------------------
#
# seq_<id>/frames/000000.png (8-bit grayscale) + seq_<id>/annotations.jsonl,
# one record per frame: {"frame": n, "boxes": [{"x":..,"y":..,"w":..,"h":..}]}


def save_sequence(root, seq_id, frames, annotations):
    root = Path(root)
    seq_dir = root / f"seq_{seq_id}"
    (seq_dir / "frames").mkdir(parents=True, exist_ok=True)
    for n in range(frames.shape[0]):
        img = np.clip(np.rint(frames[n, 0]), 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(seq_dir / "frames" / f"{n:06d}.png")
    with open(seq_dir / "annotations.jsonl", "w") as fh:
        for n, boxes in enumerate(annotations):
            rec = {"frame": n,
                   "boxes": [{"x": x, "y": y, "w": w, "h": h} for x, y, w, h in boxes]}
            fh.write(json.dumps(rec) + "\n")
    return seq_dir


def load_sequence(seq_dir):
    """Read one sequence directory; accepts 8-bit or 16-bit grayscale PNGs."""
    seq_dir = Path(seq_dir)
    paths = sorted((seq_dir / "frames").glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no frames under {seq_dir}")
    imgs = []
    for p in paths:
        arr = np.asarray(Image.open(p))
        if arr.ndim != 2:
            raise ConfigurationError(f"{p} is not single-channel grayscale")
        if arr.dtype == np.uint16:
            arr = arr.astype(np.float64) / 257.0  # map 16-bit range onto 0..255
        else:
            arr = arr.astype(np.float64)
        imgs.append(arr)
    frames = np.stack(imgs)[:, None, :, :]
    annotations = [[] for _ in paths]
    ann_path = seq_dir / "annotations.jsonl"
    if ann_path.exists():
        with open(ann_path) as fh:
            for line in fh:
                rec = json.loads(line)
                annotations[rec["frame"]] = [
                    (b["x"], b["y"], b["w"], b["h"]) for b in rec["boxes"]]
    return frames, annotations


def load_dataset(root):
    """All seq_* directories under root as (seq_id, frames, annotations)."""
    root = Path(root)
    out = []
    for seq_dir in sorted(root.glob("seq_*")):
        seq_id = seq_dir.name[len("seq_"):]
        frames, annotations = load_sequence(seq_dir)
        out.append((seq_id, frames, annotations))
    if not out:
        raise FileNotFoundError(f"no seq_* directories under {root}")
    return out
