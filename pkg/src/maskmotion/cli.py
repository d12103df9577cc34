"""Operator command line: gen / train / predict / track / report.

Configuration precedence is built-in defaults < config file < command-line
flags. Config files are flat `key = value` text with `#` comments; keys use
the snake_case names echoed by each command. Every command writes exactly
one run_manifest.json into its output directory, recording the resolved
configuration, seed, git description, outputs, and wall clock.
"""

from __future__ import annotations

import argparse
import json
import shutil
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from maskmotion.masks import (
    FrameMask,
    MaskSequence,
    ProbMask,
    binarize,
    read_sequences,
    resize_with_padding,
    undo_resize_array,
    write_sequences,
)
from maskmotion.model import NetConfig, load_checkpoint, make_motion_model, predict_mask
from maskmotion.report import ReportError, build_report
from maskmotion.synth import PRESETS, load_dataset, make_benchmark_suite, write_ppm
from maskmotion.track import TrackerConfig, track_dataset, write_metrics_json, write_track_file
from maskmotion.train import TrainConfig, run_training

EXIT_CODES = {"usage": 2, "io": 3, "format": 4, "config": 5, "internal": 1}


class CLIError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def parse_config_file(path) -> dict[str, str]:
    """Flat key = value lines; '#' starts a comment; blank lines ignored."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CLIError("io", f"cannot read config file {path}: {exc}") from exc
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError("config", f"{path}:{line_no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def _coerce(key: str, raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise CLIError("config", f"key {key!r}: {raw!r} is not a boolean")
    caster = type(default) if default is not None else str
    try:
        if caster is int:
            return int(raw)
        if caster is float:
            return float(raw)
        return raw
    except ValueError:
        raise CLIError("config", f"key {key!r}: cannot parse {raw!r} as {caster.__name__}") from None


def resolve_config(defaults: dict, config_path, cli_values: dict) -> dict:
    """defaults < config file < explicit CLI flags; unknown keys rejected."""
    resolved = dict(defaults)
    if config_path:
        for key, raw in parse_config_file(config_path).items():
            if key not in defaults:
                raise CLIError("config", f"unknown config key {key!r}")
            resolved[key] = _coerce(key, raw, defaults[key])
    for key, value in cli_values.items():
        if value is not None:
            if key not in defaults:
                raise CLIError("config", f"unknown override {key!r}")
            resolved[key] = value
    return resolved


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        pass
    return "unknown"


def write_manifest(out_dir, command: str, config: dict, outputs: list[str],
                   started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "git_describe": git_describe(),
        "outputs": outputs,
        "wall_clock_seconds": round(time.monotonic() - started, 3),
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    with open(Path(out_dir) / "run_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def echo_config(command: str, config: dict) -> None:
    print(f"{command}: resolved config")
    for key in sorted(config):
        print(f"  {key} = {config[key]}")


# --- gen ---------------------------------------------------------------


GEN_DEFAULTS = {
    "preset": "translation",
    "count": 10,
    "seed": 0,
    "canvas_side": 64,
    "num_frames": 16,
    "sample_stride": 1,
    "equal_colors": False,
}


def cmd_gen(args) -> int:
    started = time.monotonic()
    cli_values = {k: getattr(args, k) for k in GEN_DEFAULTS}
    config = resolve_config(GEN_DEFAULTS, args.config, cli_values)
    if config["preset"] not in PRESETS:
        raise CLIError("usage", f"unknown preset {config['preset']!r}; choose from {PRESETS}")
    out = Path(args.out)
    payload = [out / "manifest.json", out / "scenes"]
    if any(p.exists() for p in payload):
        if not args.force:
            raise CLIError("usage",
                           f"{out} already holds a dataset; pass --force to regenerate")
        for p in payload:
            if p.is_dir():
                shutil.rmtree(p)
            elif p.exists():
                p.unlink()
    echo_config("gen", config)
    make_benchmark_suite(
        config["preset"], config["count"], config["seed"], out,
        canvas=(config["canvas_side"], config["canvas_side"]),
        num_frames=config["num_frames"],
        sample_stride=config["sample_stride"],
        equal_colors=config["equal_colors"],
    )
    write_manifest(out, "gen", config, ["manifest.json", "scenes/"], started)
    print(f"gen: wrote {config['count']} {config['preset']} scene(s) to {out}")
    return 0


# --- train -------------------------------------------------------------


TRAIN_DEFAULTS = {
    "iterations": 2000,
    "batch_size": 8,
    "learning_rate": 5e-5,
    "seed": 0,
    "input_side": 64,
    "latent_l": 256,
    "memory_c": 100,
    "channels": "16,32,64",
    "lstm_layers": 3,
    "image_refine": "none",
    "n_min": 2,
    "n_max": 5,
    "isolation_check": False,
    "log_every": 100,
}


def _parse_channels(raw: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in raw.split(","))
    except ValueError:
        raise CLIError("config", f"channels must be three comma-separated ints, got {raw!r}") from None
    if len(parts) != 3:
        raise CLIError("config", f"channels must be three comma-separated ints, got {raw!r}")
    return parts


def cmd_train(args) -> int:
    started = time.monotonic()
    cli_values = {k: getattr(args, k) for k in TRAIN_DEFAULTS}
    config = resolve_config(TRAIN_DEFAULTS, args.config, cli_values)
    dataset_dir = Path(args.dataset)
    if not dataset_dir.is_dir():
        raise CLIError("usage", f"dataset directory not found: {dataset_dir}")
    echo_config("train", config)
    try:
        dataset = load_dataset(dataset_dir)
    except (OSError, ValueError, KeyError) as exc:
        raise CLIError("io", f"cannot load dataset {dataset_dir}: {exc}") from exc
    try:
        net_config = NetConfig(
            input_side=config["input_side"],
            latent_l=config["latent_l"],
            memory_c=config["memory_c"],
            encoder_channels=_parse_channels(config["channels"]),
            lstm_layers=config["lstm_layers"],
            use_image_refine=config["image_refine"] != "none",
            image_encoder_mode=config["image_refine"],
        )
        train_config = TrainConfig(
            learning_rate=config["learning_rate"],
            batch_size=config["batch_size"],
            iterations=config["iterations"],
            n_range=(config["n_min"], config["n_max"]),
            seed=config["seed"],
        )
    except ValueError as exc:
        raise CLIError("config", str(exc)) from exc
    out = Path(args.out)
    result = run_training(dataset, net_config, train_config, out,
                          isolation_check=config["isolation_check"],
                          log_every=config["log_every"])
    write_manifest(out, "train", config, ["checkpoint.ckpt", "loss_curve.csv"], started)
    print(f"train: final step2 loss {result['final_step2_loss']:.4f}; "
          f"checkpoint at {result['checkpoint']}")
    return 0


# --- predict -----------------------------------------------------------


PREDICT_DEFAULTS = {
    "seed": 0,
    "max_history": 5,
    "threshold": 0.5,
}


def cmd_predict(args) -> int:
    started = time.monotonic()
    cli_values = {k: getattr(args, k) for k in PREDICT_DEFAULTS}
    config = resolve_config(PREDICT_DEFAULTS, args.config, cli_values)
    try:
        net = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise CLIError("io", f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    try:
        sequences = read_sequences(args.sequence)
    except OSError as exc:
        raise CLIError("io", f"cannot read sequence file {args.sequence}: {exc}") from exc
    except ValueError as exc:
        raise CLIError("format", str(exc)) from exc
    if not sequences:
        raise CLIError("format", f"{args.sequence}: no sequences found")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    side = net.config.input_side
    outputs = []
    predicted_seqs = []
    for seq in sequences:
        history = seq.window(max(0, len(seq) - config["max_history"]), len(seq))
        resized = [resize_with_padding(f, side) for f in history.frames]
        tf = resized[0][1]
        net_seq = MaskSequence(seq.instance_id, tuple(m for m, _ in resized),
                               history.frame_indices)
        prob = predict_mask(net, net_seq, mode="infer")
        prob_back = ProbMask(np.clip(undo_resize_array(prob.probs, tf), 0.0, 1.0))
        predicted = binarize(prob_back, config["threshold"])
        next_index = seq.frame_indices[-1] + 1
        predicted_seqs.append(MaskSequence(
            seq.instance_id,
            seq.frames + (predicted,),
            seq.frame_indices + (next_index,),
        ))
        if args.viz:
            overlay = np.zeros((seq.height, seq.width, 3))
            overlay[..., 0] = seq.frames[-1].bits * 0.5
            overlay[..., 1] = predicted.bits.astype(float)
            viz_path = out / f"overlay_{seq.instance_id}_{next_index:06d}.ppm"
            write_ppm(viz_path, overlay)
            outputs.append(viz_path.name)
    pred_path = out / "prediction.txt"
    write_sequences(pred_path, predicted_seqs)
    outputs.insert(0, "prediction.txt")
    write_manifest(out, "predict", config, outputs, started)
    print(f"predict: wrote {pred_path} ({len(predicted_seqs)} sequence(s))")
    return 0


# --- track -------------------------------------------------------------


TRACK_DEFAULTS = {
    "scorer": "appearance",
    "split": "val",
    "weight": 1.0,
    "top_k": 0,             # 0 disables the cutoff
    "match_threshold": 0.2,
    "persistence": 10,
    "embed_noise": 0.05,
    "seed": 0,
    "limit": 0,             # 0 means every scene in the split
    "sample_stride": 0,     # informational; 0 = read from dataset manifest
}


def cmd_track(args) -> int:
    started = time.monotonic()
    cli_values = {k: getattr(args, k) for k in TRACK_DEFAULTS}
    config = resolve_config(TRACK_DEFAULTS, args.config, cli_values)
    if config["scorer"] not in ("appearance", "+motion", "+kalman"):
        raise CLIError("usage", f"scorer must be appearance, +motion or +kalman, "
                                f"got {config['scorer']!r}")
    if config["scorer"] == "+motion" and not args.checkpoint:
        raise CLIError("usage", "scorer '+motion' needs --checkpoint")
    dataset_dir = Path(args.dataset)
    try:
        dataset = load_dataset(dataset_dir)
    except (OSError, ValueError, KeyError) as exc:
        raise CLIError("io", f"cannot load dataset {dataset_dir}: {exc}") from exc
    predictor = None
    if config["scorer"] == "+motion":
        try:
            predictor = make_motion_model(load_checkpoint(args.checkpoint))
        except OSError as exc:
            raise CLIError("io", f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    if config["sample_stride"] == 0:
        config["sample_stride"] = int(dataset.manifest.get("sample_stride", 1))
    tracker_config = TrackerConfig(
        scorer=config["scorer"],
        motion_weight=config["weight"],
        top_k=config["top_k"] or None,
        match_threshold=config["match_threshold"],
        persistence_budget=config["persistence"],
        embed_noise=config["embed_noise"],
        detection_seed=config["seed"],
    )
    echo_config("track", config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = track_dataset(dataset, tracker_config, predictor,
                           split=config["split"], limit=config["limit"] or None)
    write_metrics_json(out / "metrics.json", result["metrics"])
    tracks_dir = out / "tracks"
    tracks_dir.mkdir(exist_ok=True)
    outputs = ["metrics.json"]
    for scene, assignments in result["results"]:
        track_path = tracks_dir / f"{scene.scene_id}.txt"
        write_track_file(track_path, scene, assignments)
        outputs.append(f"tracks/{track_path.name}")
    write_manifest(out, "track", config, outputs, started)
    m = result["metrics"]
    print(f"track: {config['scorer']} on {len(result['results'])} scene(s): "
          f"IDSw {m['IDSw']}, IDF1 {m['IDF1']:.4f}, MOTSA {m['MOTSA']:.4f}")
    return 0


# --- report ------------------------------------------------------------


def cmd_report(args) -> int:
    started = time.monotonic()
    out = Path(args.out)
    try:
        written = build_report(args.run_dirs, out)
    except ReportError as exc:
        raise CLIError("io", str(exc)) from exc
    write_manifest(out, "report", {"run_dirs": [str(d) for d in args.run_dirs], "seed": None},
                   [str(p.name) for p in written.values() if isinstance(p, Path)], started)
    print(f"report: table at {written['table_txt']}")
    for key in ("loss_curves", "idsw_bars", "idsw_vs_stride", "iou_vs_stride"):
        if key in written:
            print(f"report: figure {written[key]}")
    return 0


# --- entry point ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskmotion",
        description="mask-sequence motion prediction: data, training, tracking, reports")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic benchmark dataset")
    p_gen.add_argument("--preset", choices=PRESETS, default=None)
    p_gen.add_argument("--count", type=int, default=None)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--canvas-side", type=int, default=None)
    p_gen.add_argument("--num-frames", type=int, default=None)
    p_gen.add_argument("--sample-stride", type=int, default=None)
    p_gen.add_argument("--equal-colors", action="store_const", const=True, default=None)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--force", action="store_true")
    p_gen.add_argument("--config", default=None)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train the motion predictor")
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--iterations", type=int, default=None)
    p_train.add_argument("--batch-size", type=int, default=None)
    p_train.add_argument("--learning-rate", type=float, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--input-side", type=int, default=None)
    p_train.add_argument("--latent-l", type=int, default=None)
    p_train.add_argument("--memory-c", type=int, default=None)
    p_train.add_argument("--channels", default=None, help="three conv widths, e.g. 16,32,64")
    p_train.add_argument("--lstm-layers", type=int, default=None)
    p_train.add_argument("--image-refine", choices=("none", "trained", "fixed"), default=None)
    p_train.add_argument("--n-min", type=int, default=None)
    p_train.add_argument("--n-max", type=int, default=None)
    p_train.add_argument("--isolation-check", action="store_const", const=True, default=None)
    p_train.add_argument("--log-every", type=int, default=None)
    p_train.add_argument("--config", default=None)
    p_train.set_defaults(func=cmd_train)

    p_pred = sub.add_parser("predict", help="predict the next mask for stored sequences")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--sequence", required=True)
    p_pred.add_argument("--out", required=True)
    p_pred.add_argument("--viz", action="store_true")
    p_pred.add_argument("--seed", type=int, default=None)
    p_pred.add_argument("--max-history", type=int, default=None)
    p_pred.add_argument("--threshold", type=float, default=None)
    p_pred.add_argument("--config", default=None)
    p_pred.set_defaults(func=cmd_predict)

    p_track = sub.add_parser("track", help="run the tracking harness over a dataset")
    p_track.add_argument("--dataset", required=True)
    p_track.add_argument("--out", required=True)
    p_track.add_argument("--scorer", default=None)
    p_track.add_argument("--checkpoint", default=None)
    p_track.add_argument("--split", default=None)
    p_track.add_argument("--weight", type=float, default=None)
    p_track.add_argument("--top-k", type=int, default=None)
    p_track.add_argument("--match-threshold", type=float, default=None)
    p_track.add_argument("--persistence", type=int, default=None)
    p_track.add_argument("--embed-noise", type=float, default=None)
    p_track.add_argument("--seed", type=int, default=None)
    p_track.add_argument("--limit", type=int, default=None)
    p_track.add_argument("--sample-stride", type=int, default=None)
    p_track.add_argument("--config", default=None)
    p_track.set_defaults(func=cmd_track)

    p_rep = sub.add_parser("report", help="compare runs: table + figures")
    p_rep.add_argument("run_dirs", nargs="+")
    p_rep.add_argument("--out", required=True)
    p_rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except (ValueError, RuntimeError) as exc:
        print(f"error:internal: {exc}", file=sys.stderr)
        return EXIT_CODES["internal"]
    except FileNotFoundError as exc:
        print(f"error:io: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]


if __name__ == "__main__":
    sys.exit(main())
