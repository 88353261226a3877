"""Command-line entry point: gen / train / eval / track / bench / plot.

Configuration is a JSON file with sections (fen, head, optim, train, data,
eval, variant); unspecified keys take the documented defaults and the
effective config is echoed into every output directory. Exit codes:
0 success, 2 usage or config error, 3 numeric failure, 4 I/O error.
"""

import argparse
import copy
import json
import os
import sys
import time
from pathlib import Path

from . import _kernels
from .data import (
    SynthConfig,
    gen_synthetic,
    load_manifest,
    load_sequence,
    write_annotations,
    write_manifest,
)
from .network import FenConfig, TrackerModel, VARIANTS, load_model
from .numerics import ConfigError, NumericError, OptimConfig
from .trackeval import (
    REALTIME_REFERENCE_FPS,
    ModelTracker,
    OracleTracker,
    curve_svg,
    evaluate_tracker,
    export_curves,
    import_curve,
    threshold_grid,
    track_sequence,
    train,
)

_DEFAULTS = {
    "variant": "aftn",
    "fen": {"channels": [4, 8, 16, 16, 16], "input_size": 224, "frozen": True},
    "head": {"fuse_kernels": 32, "fc_units": 128},
    "optim": {
        "learning_rate": 1e-5,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "weight_decay": 1e-3,
    },
    "train": {"epochs": 10, "batch": 50, "seed": 0},
    "data": {
        "frame_w": 320,
        "frame_h": 240,
        "mean_length": 95.6,
        "length_jitter": 0.3,
        "side_min": 24.0,
        "side_max": 64.0,
        "motion_std": 2.0,
        "damping": 0.9,
        "scale_drift_std": 0.01,
        "gain_drift_std": 0.02,
        "distractors": 2,
        "occluder_prob": 0.02,
        "fps": 30.0,
        "seed": 0,
    },
    "eval": {"threshold_step": 0.01},
}


def _log(msg):
    print(msg, file=sys.stderr)


def load_config(path=None):
    cfg = copy.deepcopy(_DEFAULTS)
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for section, value in user.items():
        if section == "variant":
            if value not in VARIANTS:
                raise ConfigError(f"unknown variant {value!r}")
            cfg["variant"] = value
            continue
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key, v in value.items():
            if key not in cfg[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            cfg[section][key] = v
    return cfg


def _echo_config(cfg, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n"
    )


def _build_model(cfg, variant, seed):
    fen = FenConfig(
        cfg["fen"]["channels"], cfg["fen"]["input_size"], bool(cfg["fen"]["frozen"])
    )
    return TrackerModel(variant, fen, cfg["head"]["fuse_kernels"], cfg["head"]["fc_units"], seed)


def cmd_gen(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["data"]["seed"] = args.seed
    synth = SynthConfig(**cfg["data"])
    out = Path(args.out)
    _log(f"generating {args.n} sequences into {out} (seed {synth.seed})")
    seq_dirs = gen_synthetic(synth, args.n, out)
    manifest = out / "manifest.txt"
    write_manifest(manifest, seq_dirs)
    _echo_config(cfg, out)
    print(f"manifest={manifest}")
    print(f"sequences={len(seq_dirs)}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    if args.variant:
        cfg["variant"] = args.variant
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    seed = cfg["train"]["seed"]
    split = load_manifest(args.data)
    model = _build_model(cfg, cfg["variant"], seed)
    optim = OptimConfig(**cfg["optim"])
    _log(f"training {cfg['variant']} on {len(split)} sequences")
    report = train(
        model,
        split,
        optim,
        epochs=cfg["train"]["epochs"],
        batch=cfg["train"]["batch"],
        seed=seed,
        model_path=args.out,
        config_echo=cfg,
        log=_log,
    )
    _echo_config(cfg, Path(args.out).parent)
    for i, (loss, secs) in enumerate(zip(report.epoch_losses, report.epoch_seconds), start=1):
        print(f"epoch={i} loss={loss!r} seconds={secs:.2f}")
    print(f"model={args.out}")
    return 0


def cmd_eval(args):
    cfg = load_config(args.config)
    if args.oracle:
        tracker = OracleTracker()
    else:
        if not args.model:
            raise ConfigError("eval needs --model (or --oracle)")
        model = load_model(args.model)
        if args.variant and args.variant != model.variant:
            raise ConfigError(
                f"--variant {args.variant} does not match model variant {model.variant}"
            )
        tracker = ModelTracker(model)
    seqs = load_manifest(args.data)
    thr = threshold_grid(cfg["eval"]["threshold_step"])
    _log(f"evaluating on {len(seqs)} sequences, {len(thr)} thresholds")
    result = evaluate_tracker(tracker, seqs, thr)
    export_curves({"tp_rot": result.tp_curve, "fr_rt": result.fr_curve}, result.scores, args.out)
    _echo_config(cfg, args.out)
    s = result.scores
    print(f"accuracy={s.accuracy!r}")
    print(f"robustness={s.robustness!r}")
    print(f"overall={s.overall!r}")
    print(f"fps={s.fps:.2f}")
    return 0


def cmd_track(args):
    model = load_model(args.model)
    seq = load_sequence(args.sequence).preload()
    run = track_sequence(ModelTracker(model), seq, 0.0)
    boxes = [seq.annotations[0]] + run.boxes
    write_annotations(boxes, args.out)
    print(f"annotations={args.out}")
    print(f"frames={len(boxes)}")
    return 0


def cmd_bench(args):
    model = load_model(args.model)
    tracker = ModelTracker(model)
    seqs = load_manifest(args.data)
    scored = 0
    spent = 0.0
    for seq in seqs:
        seq.preload()
        run = track_sequence(tracker, seq, 0.0)
        scored += len(run.overlaps)
        spent += run.predict_seconds
    fps = scored / spent if spent > 0 else float("inf")
    print(f"fps={fps:.2f}")
    print(f"realtime_reference_fps={REALTIME_REFERENCE_FPS}")
    return 0


def cmd_plot(args):
    run_dir = Path(args.run)
    found = False
    for name in ("tp_rot", "fr_rt"):
        csv = run_dir / f"{name}.csv"
        if csv.exists():
            curve = import_curve(csv)
            (run_dir / f"{name}.svg").write_text(curve_svg(curve, name))
            print(f"svg={run_dir / (name + '.svg')}")
            found = True
    if not found:
        raise ConfigError(f"{run_dir}: no curve CSV files found")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="aftn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a tracker offline")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a tracker on an evaluation set")
    p.add_argument("--config")
    p.add_argument("--model")
    p.add_argument("--data", required=True, help="evaluation manifest")
    p.add_argument("--out", required=True, help="output directory for curves/scores")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--oracle", action="store_true", help="use the ground-truth stub")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("track", help="track one sequence and write annotations")
    p.add_argument("--model", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("bench", help="measure tracking throughput")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plot", help="regenerate SVG plots from stored CSV curves")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    threads = os.environ.get("AFTN_THREADS")
    if threads:
        try:
            _kernels.set_thread_cap(int(threads))
        except ValueError:
            print(f"ignoring invalid AFTN_THREADS={threads!r}", file=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
