"""Command-line front end: synth / train / eval / gradcheck / report.

All configuration flows through one JSON file of flat dotted keys (see
training.PRESETS for the full key set); command-line overrides win over
the file, and the DSANET_SEED environment variable wins over both.

Exit codes are a stable scripting contract:
    0  success
    2  usage, config, or validation problem
    3  file I/O problem
    4  numerical failure (non-finite loss or activation)
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import detection as detection_mod
from . import diffcore
from . import inference as inference_mod
from . import metrics as metrics_mod
from . import training
from .datamodel import SynthSpec, load_manifest, synthesize_dataset
from .errors import (
    IoError,
    IoFailure,
    NumericalError,
    SchemaViolation,
    ValidationError,
)
from .model import DSANet

_SPEC_KEYS = (
    "n_videos",
    "frames_per_video",
    "dim",
    "n_classes",
    "anomaly_ratio",
    "cluster_separation",
    "noise_scale",
    "seed",
)


def _read_json(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise SchemaViolation(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise SchemaViolation(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise SchemaViolation(f"{path}: top level must be an object")
    return doc


def _env_seed() -> int | None:
    raw = os.environ.get("DSANET_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as e:
        raise SchemaViolation(f"DSANET_SEED must be an integer, got {raw!r}") from e


def _parse_set_overrides(pairs: list[str]) -> dict[str, object]:
    out: dict[str, object] = {}
    for pair in pairs:
        if "=" not in pair:
            raise SchemaViolation(f"--set expects KEY=VALUE, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw  # bare strings allowed, e.g. --set preset=desk
    return out


def _load_config(args) -> dict[str, object]:
    overrides: dict[str, object] = {}
    if getattr(args, "config", None):
        overrides.update(_read_json(args.config))
    if getattr(args, "set", None):
        overrides.update(_parse_set_overrides(args.set))
    if getattr(args, "lambda_", None) is not None:
        overrides["train.lambda"] = args.lambda_
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    conf = training.resolve_config(overrides)
    env = _env_seed()
    if env is not None:
        conf["seed"] = env
    return conf


# --- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    doc = _read_json(args.spec)
    unknown = set(doc) - set(_SPEC_KEYS)
    if unknown:
        raise SchemaViolation(f"unknown synth spec keys: {sorted(unknown)}")
    missing = set(_SPEC_KEYS) - set(doc)
    if missing:
        raise SchemaViolation(f"synth spec missing keys: {sorted(missing)}")
    env = _env_seed()
    if env is not None:
        doc["seed"] = env
    spec = SynthSpec(
        n_videos=int(doc["n_videos"]),
        frames_per_video=int(doc["frames_per_video"]),
        dim=int(doc["dim"]),
        n_classes=int(doc["n_classes"]),
        anomaly_ratio=float(doc["anomaly_ratio"]),
        cluster_separation=float(doc["cluster_separation"]),
        noise_scale=float(doc["noise_scale"]),
        seed=int(doc["seed"]),
    )
    manifest = synthesize_dataset(spec, args.out)
    print(f"wrote {len(manifest.videos)} videos to {args.out}")
    return 0


def cmd_train(args) -> int:
    conf = _load_config(args)
    manifest = load_manifest(Path(args.data) / "manifest.json")
    model, reports = training.train(manifest, conf, out_dir=args.out)
    final = reports[-1]
    print(
        f"trained {final.epoch} epochs, {final.step} steps; "
        f"final L_total={final.L_total:.4f}"
    )
    print(f"checkpoints and losses.jsonl in {args.out}")
    return 0


def cmd_eval(args) -> int:
    conf = _load_config(args)
    beta = float(args.beta) if args.beta is not None else float(conf["infer.beta"])
    if beta <= 0:
        from .errors import BetaOutOfRange

        raise BetaOutOfRange(f"beta must be > 0, got {beta}")
    manifest = load_manifest(Path(args.data) / "manifest.json")
    if not manifest.videos:
        raise SchemaViolation("dataset has no videos")
    dim = manifest.videos[0].dim
    model_cfg = training.build_model_config(conf, dim, manifest.classes)
    model = DSANet(model_cfg, int(conf["seed"]))  # type: ignore[arg-type]
    model.load(args.checkpoint)
    result, per_video = inference_mod.evaluate_dataset(
        model,
        manifest,
        beta=beta,
        threshold=float(conf["infer.threshold"]),  # type: ignore[arg-type]
        min_len=int(conf["infer.min_len"]),  # type: ignore[arg-type]
    )
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {out_dir}: {e}") from e
    (out_dir / "eval_result.json").write_text(result.to_json())
    metrics_mod.write_map_table_csv(result.map_at_iou, result.avg_map, out_dir / "map_table.csv")
    if args.dump_tracks:
        tracks = out_dir / "tracks"
        tracks.mkdir(exist_ok=True)
        for vid, ev in per_video.items():
            track = detection_mod.ScoreTrack(vid, diffcore.constant(ev.s_det))
            detection_mod.export_scores_csv(track, tracks / f"{vid}_sdet.csv")
            inference_mod.export_fine_csv(ev.fine, tracks / f"{vid}_fine.csv")
            inference_mod.export_proposals_json(ev.proposals, tracks / f"{vid}_proposals.json")
    print(f"auc={result.auc:.4f} ap={result.ap:.4f} avg_map={result.avg_map:.4f}")
    print(f"results in {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    conf = _load_config(args)
    report = training.gradcheck(conf)
    print(report.summary())
    return 0 if report.passed else 4


def _read_scores_csv(path: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise SchemaViolation(f"scores file not found: {path}")
    lines = p.read_text().strip().splitlines()
    if not lines or not lines[0].startswith("frame_index,score"):
        raise SchemaViolation(f"{path}: expected 'frame_index,score' header")
    scores = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 2:
            raise SchemaViolation(f"{path}: malformed row {ln!r}")
        try:
            scores.append(float(parts[1]))
        except ValueError as e:
            raise SchemaViolation(f"{path}: malformed score in {ln!r}") from e
    if not scores:
        raise SchemaViolation(f"{path}: no score rows")
    return np.asarray(scores)


def render_score_svg(scores: np.ndarray, segments: list[tuple[int, int, int]]) -> str:
    """Deterministic SVG: one polyline over frames, one shaded rect per
    ground-truth anomaly span."""
    width, height, pad = 800.0, 200.0, 20.0
    n = len(scores)
    span_w = width - 2 * pad
    span_h = height - 2 * pad

    def x_at(i: float) -> float:
        return pad + (i / max(n - 1, 1)) * span_w

    def y_at(s: float) -> float:
        return height - pad - s * span_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.0f} {height:.0f}">',
    ]
    for start, end, _cat in segments:
        x0 = x_at(start)
        x1 = x_at(min(end + 1, n - 1)) if n > 1 else width - pad
        parts.append(
            f'<rect x="{x0:.2f}" y="{pad:.2f}" width="{x1 - x0:.2f}" height="{span_h:.2f}" '
            f'fill="#e06666" fill-opacity="0.35"/>'
        )
    pts = " ".join(f"{x_at(i):.2f},{y_at(float(s)):.2f}" for i, s in enumerate(scores))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f4e99" stroke-width="1.5"/>')
    parts.append(
        f'<line x1="{pad:.2f}" y1="{height - pad:.2f}" x2="{width - pad:.2f}" '
        f'y2="{height - pad:.2f}" stroke="#444444" stroke-width="1"/>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(args) -> int:
    scores = _read_scores_csv(args.scores)
    manifest = load_manifest(args.gt)
    if args.video_id is not None:
        matches = [r for r in manifest.videos if r.video_id == args.video_id]
        if not matches:
            raise SchemaViolation(f"video id {args.video_id!r} not in manifest")
        record = matches[0]
    elif len(manifest.videos) == 1:
        record = manifest.videos[0]
    else:
        raise SchemaViolation("manifest has several videos; pass --video-id")
    svg = render_score_svg(scores, record.gt_segments)
    try:
        Path(args.out).write_text(svg)
    except OSError as e:
        raise IoFailure(f"cannot write {args.out}: {e}") from e
    print(f"wrote {args.out}")
    return 0


# --- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsanet",
        description="Weakly-supervised video anomaly detection, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="synth spec JSON")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="run config JSON (flat dotted keys)")
    p.add_argument("--data", required=True, help="dataset directory (with manifest.json)")
    p.add_argument("--out", required=True, help="output directory for checkpoints + logs")
    p.add_argument("--lambda", dest="lambda_", type=float, help="alignment loss weight override")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beta", type=float, help="belief-modulation temperature ratio")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="run config JSON (must match training)")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--dump-tracks", action="store_true", help="write per-video CSV/JSON tracks")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="render a score-track SVG")
    p.add_argument("--scores", required=True, help="CSV of frame_index,score")
    p.add_argument("--gt", required=True, help="manifest JSON with ground truth")
    p.add_argument("--out", required=True, help="output SVG path")
    p.add_argument("--video-id", help="which manifest video the scores belong to")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.fn(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except IoError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
