"""Offline training driver, online tracking loop, scoring and curve export.

Accuracy is the exact area under the true-positive-vs-overlap-threshold step
curve, which equals mean overlap; robustness is one minus the average failure
rate across the reinitialization-threshold grid. The threshold sweep reuses
rollout segments: trajectories only diverge at failures, and every failure
restarts from the same ground-truth state, so distinct (start, frame) pairs
are predicted once and shared across all thresholds.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SequenceError, dataset_mean, sample_pairs
from .geometry import context_window, crop_resize, decode_output, region_overlap, to_frame_coords
from .network import derived_rng, save_model
from .numerics import ConfigError, NumericError, OptimConfig, Tensor, adam_step, l1_loss

REALTIME_REFERENCE_FPS = 25.0


def threshold_grid(step=0.01):
    n = int(round(1.0 / step))
    return np.linspace(0.0, 1.0, n + 1)


@dataclass
class TrainReport:
    epoch_losses: list
    step_losses: list
    epoch_seconds: list
    model_path: str
    seed: int
    config: dict = field(default_factory=dict)


@dataclass
class TrackRun:
    boxes: list
    overlaps: np.ndarray
    failures: list
    reinit_threshold: float
    predict_seconds: float
    frame_weights: list = field(default_factory=list)


@dataclass
class Curve:
    thresholds: np.ndarray
    values: np.ndarray


@dataclass
class Scores:
    accuracy: float
    robustness: float
    overall: float
    fps: float


@dataclass
class WeightRow:
    stream: str
    level: int
    mean: float
    q25: float
    q50: float
    q75: float


@dataclass
class WeightReport:
    rows: list


# -- trackers -----------------------------------------------------------------

class ModelTracker:
    """Crop-resize-feed-read cycle around a trained model in eval mode."""

    def __init__(self, model, mean_rgb=None):
        self.model = model
        self.mean = np.asarray(model.mean_rgb if mean_rgb is None else mean_rgb, dtype=np.float64)
        self.size = model.input_size
        self.last_weights = None

    def predict(self, seq, t, prev_box):
        curr = seq.frame(t)
        window = context_window(prev_box, curr.width, curr.height)
        curr_p = crop_resize(curr, window, self.mean, self.size).chw()[None]
        prev_p = None
        if self.model.two_stream:
            prev_p = crop_resize(seq.frame(t - 1), window, self.mean, self.size).chw()[None]
        res = self.model.forward(prev_p, curr_p, "eval")
        self.last_weights = res.weights
        return to_frame_coords(decode_output(res.out.data[0], self.size), window, self.size)


class OracleTracker:
    """Ground-truth stub; scores (1, 1, 1) by construction."""

    last_weights = None

    def predict(self, seq, t, prev_box):
        return seq.annotations[t]


class StayPutTracker:
    """Degenerate baseline that repeats its previous box."""

    last_weights = None

    def predict(self, seq, t, prev_box):
        return prev_box


def _is_failure(overlap, r):
    # r == 0 reinitializes only on total loss; r > 0 on falling strictly below.
    return overlap == 0.0 if r == 0.0 else overlap < r


def track_sequence(tracker, seq, reinit_threshold=0.0, collect_weights=False):
    """Track one sequence; frame 0 initializes, every later frame is scored."""
    n = len(seq)
    if n < 2:
        raise SequenceError(f"{seq.id}: need at least 2 frames to track")
    r = float(reinit_threshold)
    prev_box = seq.annotations[0]
    boxes = []
    overlaps = np.empty(n - 1)
    failures = []
    weights = []
    spent = 0.0
    for t in range(1, n):
        tic = time.perf_counter()
        pred = tracker.predict(seq, t, prev_box)
        spent += time.perf_counter() - tic
        if collect_weights and tracker.last_weights is not None:
            weights.append(tracker.last_weights)
        boxes.append(pred)
        ov = region_overlap(pred, seq.annotations[t])
        overlaps[t - 1] = ov
        if _is_failure(ov, r):
            failures.append(t)
            prev_box = seq.annotations[t]
        else:
            prev_box = pred
    return TrackRun(boxes, overlaps, failures, r, spent, weights)


class _Segment:
    __slots__ = ("prev_box", "next_t", "overlaps")

    def __init__(self, start_box, start_t):
        self.prev_box = start_box
        self.next_t = start_t + 1
        self.overlaps = {}


class SequenceRuns:
    """Shared rollout segments; replays any reinit threshold without re-predicting."""

    def __init__(self, tracker, seq):
        self.tracker = tracker
        self.seq = seq
        self.n = len(seq)
        if self.n < 2:
            raise SequenceError(f"{seq.id}: need at least 2 frames to track")
        self._segments = {}

    def _overlap(self, t0, t):
        seg = self._segments.get(t0)
        if seg is None:
            seg = _Segment(self.seq.annotations[t0], t0)
            self._segments[t0] = seg
        while seg.next_t <= t:
            ft = seg.next_t
            pred = self.tracker.predict(self.seq, ft, seg.prev_box)
            seg.overlaps[ft] = region_overlap(pred, self.seq.annotations[ft])
            seg.prev_box = pred
            seg.next_t = ft + 1
        return seg.overlaps[t]

    def run(self, r):
        """Overlaps and failure frames of a full tracking run at threshold r."""
        t0 = 0
        overlaps = np.empty(self.n - 1)
        failures = []
        for t in range(1, self.n):
            ov = self._overlap(t0, t)
            overlaps[t - 1] = ov
            if _is_failure(ov, r):
                failures.append(t)
                t0 = t
        return overlaps, failures


# -- scores -------------------------------------------------------------------

def _pooled_overlaps(thing):
    if isinstance(thing, TrackRun):
        return thing.overlaps
    return np.asarray(thing, dtype=np.float64)


def accuracy_score(run):
    """Exact area under the TP step curve, which equals mean overlap."""
    if isinstance(run, TrackRun) and run.reinit_threshold != 0.0:
        raise ConfigError("accuracy needs a run tracked with reinit threshold 0")
    ov = _pooled_overlaps(run)
    if ov.size == 0:
        raise ConfigError("accuracy of an empty run")
    return float(np.mean(ov))


def tp_rot_curve(run, thresholds=None):
    """Fraction of frames with overlap strictly above each threshold."""
    ov = _pooled_overlaps(run)
    if ov.size == 0:
        raise ConfigError("curve of an empty run")
    thr = threshold_grid() if thresholds is None else np.asarray(thresholds)
    values = np.array([np.mean(ov > t) for t in thr])
    return Curve(thr, values)


def fr_rt_curve(tracker, seqs, thresholds=None):
    if not seqs:
        raise ConfigError("failure-rate curve over an empty set")
    thr = threshold_grid() if thresholds is None else np.asarray(thresholds)
    caches = [SequenceRuns(tracker, s) for s in seqs]
    scored = sum(c.n - 1 for c in caches)
    values = np.empty(len(thr))
    for i, r in enumerate(thr):
        fails = sum(len(c.run(float(r))[1]) for c in caches)
        values[i] = fails / scored
    return Curve(thr, values)


def robustness_score(tracker, seqs, thresholds=None):
    """One minus the mean failure rate over the threshold grid."""
    curve = fr_rt_curve(tracker, seqs, thresholds)
    return 1.0 - float(np.mean(curve.values))


@dataclass
class EvalResult:
    scores: Scores
    tp_curve: Curve
    fr_curve: Curve


def evaluate_tracker(tracker, seqs, thresholds=None, measure_fps=True):
    """Full protocol: accuracy at r=0, robustness over the grid, overall, FPS."""
    if not seqs:
        raise ConfigError("evaluation over an empty set")
    thr = threshold_grid() if thresholds is None else np.asarray(thresholds)
    for s in seqs:
        s.preload()
    caches = [SequenceRuns(tracker, s) for s in seqs]
    scored = sum(c.n - 1 for c in caches)

    pooled = np.concatenate([c.run(0.0)[0] for c in caches])
    acc = float(np.mean(pooled))
    tp = Curve(thr, np.array([np.mean(pooled > t) for t in thr]))

    fr_values = np.empty(len(thr))
    for i, r in enumerate(thr):
        fails = sum(len(c.run(float(r))[1]) for c in caches)
        fr_values[i] = fails / scored
    fr = Curve(thr, fr_values)
    rob = 1.0 - float(np.mean(fr_values))

    fps = 0.0
    if measure_fps:
        spent = 0.0
        for s in seqs:
            spent += track_sequence(tracker, s, 0.0).predict_seconds
        fps = scored / spent if spent > 0 else float("inf")

    scores = Scores(acc, rob, (acc + rob) / 2.0, fps)
    return EvalResult(scores, tp, fr)


def overall_and_fps(tracker, seqs, thresholds=None):
    return evaluate_tracker(tracker, seqs, thresholds).scores


# -- training -----------------------------------------------------------------

def train(model, split, optim=None, epochs=10, batch=50, seed=0, model_path=None,
          config_echo=None, log=None):
    """Offline training: sample pairs, forward, L1 loss, backward, Adam step.

    Deterministic for a fixed seed; raises NumericError with the failing step
    index if the loss or any parameter goes non-finite.
    """
    if not split:
        raise SequenceError("training split is empty")
    if epochs < 1 or batch < 1:
        raise ConfigError("epochs and batch must be >= 1")
    optim = optim or OptimConfig()
    sample_rng = derived_rng(seed, "sampling")
    drop_rng = derived_rng(seed, "dropout")
    params = model.trainable_params()
    for s in split:
        s.preload()
    mean = dataset_mean(split)
    model.mean_rgb[...] = mean

    n_pairs = sum(len(s) - 1 for s in split)
    steps_per_epoch = max(1, n_pairs // batch)
    size = model.input_size
    need_prev = model.two_stream

    epoch_losses = []
    epoch_seconds = []
    step_losses = []
    step = 0
    for epoch in range(epochs):
        tic = time.perf_counter()
        losses = []
        for _ in range(steps_per_epoch):
            pairs = sample_pairs(split, batch, sample_rng, mean, size, need_prev=need_prev)
            curr = np.stack([p.curr_patch.chw() for p in pairs])
            prev = np.stack([p.prev_patch.chw() for p in pairs]) if need_prev else None
            targets = np.stack([p.target for p in pairs])
            try:
                res = model.forward(prev, curr, "train", drop_rng)
                loss, loss_back = l1_loss(res.out, Tensor(targets))
                loss_back()
                res.backward()
                adam_step(params, optim)
            except NumericError as exc:
                raise NumericError(f"training aborted at step {step}: {exc}") from exc
            losses.append(loss)
            step_losses.append(loss)
            step += 1
        epoch_losses.append(float(np.mean(losses)))
        epoch_seconds.append(time.perf_counter() - tic)
        if log:
            log(f"epoch={epoch + 1} loss={epoch_losses[-1]:.6f} seconds={epoch_seconds[-1]:.1f}")

    if model_path:
        save_model(model, model_path)
    return TrainReport(epoch_losses, step_losses, epoch_seconds,
                       str(model_path) if model_path else "", seed, config_echo or {})


# -- attention inspection -------------------------------------------------------

def weight_report(model, seq, mean_rgb=None):
    """Distribution of recorded channel weights per level and stream for one run."""
    if not model.has_attention:
        raise ConfigError(f"variant {model.variant!r} records no attention weights")
    tracker = ModelTracker(model, mean_rgb)
    run = track_sequence(tracker, seq.preload(), 0.0, collect_weights=True)
    if not run.frame_weights:
        raise ConfigError("no attention weights recorded")
    streams = run.frame_weights[0].streams.keys()
    rows = []
    for stream in streams:
        for level in range(5):
            vals = np.concatenate(
                [fw.streams[stream][level].ravel() for fw in run.frame_weights]
            )
            q25, q50, q75 = np.percentile(vals, [25, 50, 75])
            rows.append(WeightRow(stream, level + 1, float(np.mean(vals)),
                                  float(q25), float(q50), float(q75)))
    return WeightReport(rows)


# -- export -------------------------------------------------------------------

def export_curves(curves, scores, out_dir):
    """Write CSV + SVG per curve and a scores.json; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, curve in curves.items():
        csv_path = out_dir / f"{name}.csv"
        lines = ["threshold,value"]
        for t, v in zip(curve.thresholds, curve.values):
            lines.append(f"{float(t)!r},{float(v)!r}")
        csv_path.write_text("\n".join(lines) + "\n")
        written.append(csv_path)
        svg_path = out_dir / f"{name}.svg"
        svg_path.write_text(curve_svg(curve, name))
        written.append(svg_path)
    if scores is not None:
        scores_path = out_dir / "scores.json"
        payload = {
            "accuracy": scores.accuracy,
            "robustness": scores.robustness,
            "overall": scores.overall,
            "fps": scores.fps,
            "realtime_reference_fps": REALTIME_REFERENCE_FPS,
        }
        scores_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        written.append(scores_path)
    return written


def import_curve(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "threshold,value":
        raise ConfigError(f"{path}: not a curve CSV")
    thr = []
    vals = []
    for line in lines[1:]:
        if not line.strip():
            continue
        t, v = line.split(",")
        thr.append(float(t))
        vals.append(float(v))
    return Curve(np.array(thr), np.array(vals))


def curve_svg(curve, title):
    """Standalone SVG of one curve on the unit square."""
    W, H = 520, 400
    L, T, R, B = 60.0, 30.0, 500.0, 360.0

    def px(x):
        return L + x * (R - L)

    def py(y):
        return B - y * (B - T)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<rect x="{L:.2f}" y="{T:.2f}" width="{R - L:.2f}" height="{B - T:.2f}" '
        f'fill="none" stroke="black"/>',
    ]
    for k in range(6):
        v = k / 5.0
        parts.append(
            f'<line x1="{px(v):.2f}" y1="{B:.2f}" x2="{px(v):.2f}" y2="{B + 5:.2f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{px(v):.2f}" y="{B + 18:.2f}" font-size="11" text-anchor="middle">{v:.1f}</text>'
        )
        parts.append(
            f'<line x1="{L - 5:.2f}" y1="{py(v):.2f}" x2="{L:.2f}" y2="{py(v):.2f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{L - 8:.2f}" y="{py(v) + 4:.2f}" font-size="11" text-anchor="end">{v:.1f}</text>'
        )
    pts = " ".join(
        f"{px(float(t)):.2f},{py(float(v)):.2f}"
        for t, v in zip(curve.thresholds, curve.values)
    )
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#c0392b" stroke-width="1.5"/>')
    parts.append(
        f'<text x="{(L + R) / 2:.2f}" y="{T - 10:.2f}" font-size="13" text-anchor="middle">{title}</text>'
    )
    parts.append(
        f'<text x="{(L + R) / 2:.2f}" y="{B + 36:.2f}" font-size="12" text-anchor="middle">threshold</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
