"""Sequence I/O, dataset statistics, pair sampling and the synthetic generator.

Sequences live on disk as ``<id>/frames/000000.ppm`` (binary P6) plus
``<id>/groundtruth.csv`` (one ``frame,cx,cy,side`` line per frame under a
``#aftn-bb v1`` header). The generator renders a textured square target
wandering over a low-frequency background, with distractors and occasional
occluders, fully determined by the seed.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import FRAME, FrameImage, SquareBox, context_window, crop_resize, encode_target, to_search_coords
from .numerics import ConfigError

ANNOTATION_HEADER = "#aftn-bb v1"


class AnnotationError(ValueError):
    """Annotation file violates the format."""


class SequenceError(ValueError):
    """Sequence directory is internally inconsistent."""


# -- PPM frames ---------------------------------------------------------------

def write_ppm(path, pixels):
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape[0], pixels.shape[1]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(pixels.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise SequenceError(f"{path}: not a binary PPM")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise SequenceError(f"{path}: unsupported maxval {maxval}")
    n = w * h * 3
    data = blob[pos : pos + n]
    if len(data) != n:
        raise SequenceError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


# -- annotations --------------------------------------------------------------

def write_annotations(boxes, path):
    lines = [ANNOTATION_HEADER]
    for i, b in enumerate(boxes):
        lines.append(f"{i},{b.cx:.6f},{b.cy:.6f},{b.side:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def parse_annotations(path):
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != ANNOTATION_HEADER:
        raise AnnotationError(f"{path}:1: missing '{ANNOTATION_HEADER}' header")
    boxes = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise AnnotationError(f"{path}:{ln}: expected 4 fields, got {len(parts)}")
        try:
            idx = int(parts[0])
            cx, cy, side = (float(p) for p in parts[1:])
        except ValueError as exc:
            raise AnnotationError(f"{path}:{ln}: {exc}") from None
        if idx != len(boxes):
            raise AnnotationError(
                f"{path}:{ln}: frame_index {idx} out of order (expected {len(boxes)})"
            )
        if side <= 0:
            raise AnnotationError(f"{path}:{ln}: non-positive side {side}")
        boxes.append(SquareBox(cx, cy, side, FRAME))
    return boxes


# -- sequence records ---------------------------------------------------------

class SequenceRecord:
    """Ordered frames (on disk or in memory) with one ground-truth box each."""

    def __init__(self, seq_id, annotations, frame_paths=None, frames=None, fps=30.0):
        if (frame_paths is None) == (frames is None):
            raise SequenceError("provide either frame paths or in-memory frames")
        n = len(frame_paths) if frames is None else len(frames)
        if len(annotations) != n:
            raise SequenceError(
                f"{seq_id}: {n} frames but {len(annotations)} annotations"
            )
        self.id = seq_id
        self.annotations = list(annotations)
        self.fps = float(fps)
        self._paths = list(frame_paths) if frame_paths is not None else None
        self._frames = list(frames) if frames is not None else None

    def __len__(self):
        return len(self.annotations)

    def frame(self, i):
        if self._frames is not None:
            return FrameImage(self._frames[i])
        return FrameImage(read_ppm(self._paths[i]))

    def preload(self):
        """Pull all frames into memory (so tracking loops do no file I/O)."""
        if self._frames is None:
            self._frames = [read_ppm(p) for p in self._paths]
            self._paths = None
        return self

    def release(self):
        # Only meaningful for disk-backed records that were preloaded.
        pass


def load_sequence(seq_dir):
    seq_dir = Path(seq_dir)
    frames_dir = seq_dir / "frames"
    if not frames_dir.is_dir():
        raise SequenceError(f"{seq_dir}: missing frames/ directory")
    paths = sorted(frames_dir.glob("*.ppm"))
    if not paths:
        raise SequenceError(f"{seq_dir}: no frames found")
    boxes = parse_annotations(seq_dir / "groundtruth.csv")
    return SequenceRecord(seq_dir.name, boxes, frame_paths=paths)


def write_manifest(path, seq_dirs):
    path = Path(path)
    base = path.parent
    lines = [os.path.relpath(Path(d), base) for d in seq_dirs]
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path):
    path = Path(path)
    records = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            records.append(load_sequence(path.parent / line))
    if not records:
        raise SequenceError(f"{path}: empty manifest")
    return records


# -- dataset statistics -------------------------------------------------------

def dataset_mean(records):
    """Per-channel mean over every pixel of every frame in the split."""
    if not records:
        raise SequenceError("dataset_mean of an empty split")
    total = np.zeros(3)
    count = 0
    for rec in records:
        for i in range(len(rec)):
            px = rec.frame(i).pixels
            total += px.reshape(-1, 3).sum(axis=0, dtype=np.float64)
            count += px.shape[0] * px.shape[1]
    return total / count


# -- training pairs -----------------------------------------------------------

@dataclass
class TrainingPair:
    prev_patch: object
    curr_patch: object
    target: np.ndarray


def sample_pairs(records, batch_size=50, rng=None, mean_rgb=(0.0, 0.0, 0.0),
                 input_size=224, need_prev=True):
    """Uniformly sample (previous, current) frame pairs across the split.

    The crop window for both patches comes from the previous frame's ground
    truth; the target is the current frame's box encoded in search coordinates.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if rng is None:
        rng = np.random.default_rng()
    mean_rgb = np.asarray(mean_rgb, dtype=np.float64)
    counts = []
    for rec in records:
        if len(rec) < 2:
            raise SequenceError(f"{rec.id}: needs at least 2 frames for pair sampling")
        counts.append(len(rec) - 1)
    offsets = np.cumsum([0] + counts)
    total = offsets[-1]
    picks = rng.integers(0, total, size=batch_size)
    pairs = []
    for pick in picks:
        si = int(np.searchsorted(offsets, pick, side="right")) - 1
        t = int(pick - offsets[si]) + 1
        rec = records[si]
        prev_gt = rec.annotations[t - 1]
        curr_frame = rec.frame(t)
        window = context_window(prev_gt, curr_frame.width, curr_frame.height)
        curr_patch = crop_resize(curr_frame, window, mean_rgb, input_size)
        prev_patch = None
        if need_prev:
            prev_patch = crop_resize(rec.frame(t - 1), window, mean_rgb, input_size)
        target = encode_target(to_search_coords(rec.annotations[t], window, input_size), input_size)
        pairs.append(TrainingPair(prev_patch, curr_patch, target))
    return pairs


# -- synthetic generator ------------------------------------------------------

@dataclass
class SynthConfig:
    frame_w: int = 320
    frame_h: int = 240
    mean_length: float = 95.6
    length_jitter: float = 0.3
    side_min: float = 24.0
    side_max: float = 64.0
    motion_std: float = 2.0
    damping: float = 0.9
    scale_drift_std: float = 0.01
    gain_drift_std: float = 0.02
    distractors: int = 2
    occluder_prob: float = 0.02
    fps: float = 30.0
    seed: int = 0

    def __post_init__(self):
        for name in ("motion_std", "scale_drift_std", "gain_drift_std", "occluder_prob"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 <= self.length_jitter < 1:
            raise ConfigError("length_jitter must lie in [0, 1)")
        if self.side_min < 8 or self.side_max < self.side_min:
            raise ConfigError("need 8 <= side_min <= side_max")


def sequence_rng(config, index):
    # Independent stream per sequence: seed xor index.
    return np.random.default_rng(np.random.SeedSequence((config.seed ^ index) & (2**64 - 1)))


def sample_length(rng, config):
    lo = config.mean_length * (1.0 - config.length_jitter)
    hi = config.mean_length * (1.0 + config.length_jitter)
    return max(2, int(round(rng.uniform(lo, hi))))


def _reflect(p, lo, hi):
    if hi <= lo:
        return (lo + hi) / 2.0, 1.0
    flip = 1.0
    # Small per-frame steps: one bounce is enough.
    if p < lo:
        p = 2 * lo - p
        flip = -1.0
    elif p > hi:
        p = 2 * hi - p
        flip = -1.0
    return p, flip


def _smooth_noise(rng, h, w, lo, hi, cells=(4, 5)):
    """Low-frequency background: coarse noise bilinearly upsampled."""
    gh, gw = cells
    grid = rng.uniform(lo, hi, size=(gh, gw, 3))
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, gh - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, gw - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11)


class _Blob:
    """One moving textured square (the target, or a distractor)."""

    def __init__(self, rng, config, base_color, with_eyes):
        self.cx = rng.uniform(config.side_max, config.frame_w - config.side_max)
        self.cy = rng.uniform(config.side_max, config.frame_h - config.side_max)
        self.side = rng.uniform(config.side_min, config.side_max)
        self.vx = rng.normal(0.0, config.motion_std)
        self.vy = rng.normal(0.0, config.motion_std)
        self.base = base_color
        self.phase = rng.uniform(0.0, 1.0, size=2)
        self.with_eyes = with_eyes

    def step(self, rng, config):
        self.vx = self.vx * config.damping + rng.normal(0.0, config.motion_std)
        self.vy = self.vy * config.damping + rng.normal(0.0, config.motion_std)
        self.side *= np.exp(rng.normal(0.0, config.scale_drift_std))
        self.side = float(np.clip(self.side, config.side_min * 0.75,
                                  min(config.frame_w, config.frame_h) / 2.0))
        half = self.side / 2.0
        self.cx, fx = _reflect(self.cx + self.vx, half, config.frame_w - half)
        self.cy, fy = _reflect(self.cy + self.vy, half, config.frame_h - half)
        self.vx *= fx
        self.vy *= fy

    def drawn_rect(self):
        """Pixel-aligned rect actually rendered; also the ground truth."""
        si = max(8, int(round(self.side)))
        left = int(round(self.cx - si / 2.0))
        top = int(round(self.cy - si / 2.0))
        return left, top, si

    def paint(self, canvas):
        left, top, si = self.drawn_rect()
        h, w = canvas.shape[0], canvas.shape[1]
        x0, x1 = max(left, 0), min(left + si, w)
        y0, y1 = max(top, 0), min(top + si, h)
        if x0 >= x1 or y0 >= y1:
            return
        u = (np.arange(x0, x1) + 0.5 - left) / si
        v = (np.arange(y0, y1) + 0.5 - top) / si
        uu = u[None, :]
        vv = v[:, None]
        checker = ((np.floor(uu * 4 + self.phase[0] * 2) + np.floor(vv * 4 + self.phase[1] * 2)) % 2)
        shade = 0.55 + 0.45 * np.clip(np.minimum.reduce([uu + 0 * vv, 1 - uu + 0 * vv,
                                                          vv + 0 * uu, 1 - vv + 0 * uu]) * 6, 0, 1)
        tex = self.base[None, None, :] * (0.72 + 0.28 * checker)[:, :, None] * shade[:, :, None]
        if self.with_eyes:
            for ex in (0.32, 0.68):
                d2 = ((uu - ex) ** 2 + (vv - 0.35) ** 2) / (0.11**2)
                tex *= (1.0 - 0.92 * np.exp(-d2))[:, :, None]
        canvas[y0:y1, x0:x1] = tex


def render_sequence(config, index):
    """All frames, ground-truth boxes and drawn target rects for one sequence."""
    rng = sequence_rng(config, index)
    length = sample_length(rng, config)
    bg = _smooth_noise(rng, config.frame_h, config.frame_w, 70.0, 140.0)
    target = _Blob(rng, config, rng.uniform(190.0, 250.0, size=3), with_eyes=True)
    dis = [
        _Blob(rng, config, rng.uniform(110.0, 180.0, size=3), with_eyes=False)
        for _ in range(config.distractors)
    ]
    gain = 1.0

    frames = []
    boxes = []
    rects = []
    for t in range(length):
        if t > 0:
            for b in dis:
                b.step(rng, config)
            target.step(rng, config)
            gain *= np.exp(rng.normal(0.0, config.gain_drift_std))
            gain = float(np.clip(gain, 0.55, 1.6))
        canvas = bg.copy()
        for b in dis:
            b.paint(canvas)
        target.paint(canvas)
        left, top, si = target.drawn_rect()
        if rng.random() < config.occluder_prob:
            ow = max(2, int(round(si * rng.uniform(0.3, 0.6))))
            oh = max(2, int(round(si * rng.uniform(0.3, 0.6))))
            ox = int(round(left + rng.uniform(0, si - 1)))
            oy = int(round(top + rng.uniform(0, si - 1)))
            color = rng.uniform(40.0, 110.0, size=3)
            canvas[max(oy, 0) : oy + oh, max(ox, 0) : ox + ow] = color
        frames.append(np.clip(canvas * gain, 0.0, 255.0).astype(np.uint8))
        boxes.append(SquareBox(left + si / 2.0, top + si / 2.0, float(si), FRAME))
        rects.append((left, top, si))
    return frames, boxes, rects


def gen_synthetic(config, n_sequences, out_dir):
    """Write ``n_sequences`` rendered sequences under out_dir; returns their dirs."""
    if n_sequences < 1:
        raise ConfigError("need at least one sequence")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seq_dirs = []
    for idx in range(n_sequences):
        frames, boxes, _ = render_sequence(config, idx)
        seq_dir = out_dir / f"seq{idx:04d}"
        frames_dir = seq_dir / "frames"
        frames_dir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(frames):
            write_ppm(frames_dir / f"{i:06d}.ppm", frame)
        write_annotations(boxes, seq_dir / "groundtruth.csv")
        seq_dirs.append(seq_dir)
    return seq_dirs
