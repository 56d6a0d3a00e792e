"""Command-line entry point for reproducible runs.

Subcommands: gen-data, train-backbone, train-warper, propagate, aggregate,
eval, ablate, inspect-offsets, grad-check.  Configuration comes from flags
plus an optional key=value text file (flags win).  Every run directory gets
a JSON config snapshot, the seed, and a metrics CSV, which together suffice
to reproduce the run bit-exactly at --threads 1.

Exit codes: 0 success, 1 runtime failure (single machine-parsable line on
stderr), 2 usage errors, 3 invalid configuration (names the offending key).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import evaluate
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluate import (BenchmarkSpec, ablate_dilations, dense_motion_field,
                       eval_aggregation, eval_single_frame,
                       offset_motion_regression, propagate_video,
                       run_propagation_benchmark, write_reports_jsonl)
from .gradsuite import run_gradient_suite
from .heatmaps import pck_evaluate
from .netpbm import flow_to_color, write_pgm, write_ppm
from .synth import MotionParams, default_skeleton, load_dataset, save_dataset, \
    split_dataset
from .train import (TrainConfig, backbone_from_checkpoint, train_backbone,
                    train_warper, warper_from_checkpoint)
from .util import ContractError


class ConfigKeyError(ValueError):
    def __init__(self, key: str):
        super().__init__(f"unknown or invalid config key {key!r}")
        self.key = key


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heatwarp",
        description="Temporal heatmap warping for sparsely labeled videos.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--out", required=out_required,
                       help="run directory for outputs")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1,
                       help="BLAS thread cap; 1 guarantees bit-reproducibility")
        p.add_argument("--config", default=None,
                       help="key=value file; flags override file values")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--videos", type=int, default=50)
    p.add_argument("--frames", type=int, default=29)
    p.add_argument("--label-every", type=int, default=7)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--occlusion-prob", type=float, default=0.0)

    p = sub.add_parser("train-backbone", help="train the pose backbone")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--width-channels", type=int, default=32)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--augment", type=int, default=1, choices=(0, 1))
    p.add_argument("--precision", default="float32",
                   choices=("float32", "float64"))

    p = sub.add_parser("train-warper", help="train the warping head")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--backbone", required=True, help="backbone checkpoint")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--delta-range", type=int, default=3)
    p.add_argument("--dilations", type=_int_list, default=(3, 6, 12, 18, 24))
    p.add_argument("--residual-blocks", type=int, default=4)
    p.add_argument("--residual-width", type=int, default=32)
    p.add_argument("--freeze-backbone", type=int, default=0, choices=(0, 1))
    p.add_argument("--augment", type=int, default=1, choices=(0, 1))
    p.add_argument("--precision", default="float32",
                   choices=("float32", "float64"))

    p = sub.add_parser("propagate",
                       help="propagate labels to unlabeled neighbor frames")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--radius", type=int, default=3)
    p.add_argument("--min-confidence", type=float, default=0.05)

    p = sub.add_parser("aggregate",
                       help="pose predictions via temporal aggregation")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--deltas", type=_int_list, default=(-3, -2, -1, 0, 1, 2, 3))

    p = sub.add_parser("eval", help="run the propagation benchmark")
    common(p)
    p.add_argument("--videos", type=int, default=50)
    p.add_argument("--seeds", type=_int_list, default=(0, 1, 2))
    p.add_argument("--workers", type=int, default=2)

    p = sub.add_parser("ablate", help="dilation-configuration ablation")
    common(p)
    p.add_argument("--videos", type=int, default=50)
    p.add_argument("--seeds", type=_int_list, default=(0, 1, 2))
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--configurations", default="3;3,6;3,6,12;3,6,12,18;3,6,12,18,24",
                   help="semicolon-separated dilation lists")

    p = sub.add_parser("inspect-offsets",
                       help="linear probe from offsets to joint motion")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--delta-range", type=int, default=3)

    p = sub.add_parser("grad-check", help="run the gradient-check suite")
    common(p, out_required=False)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]):
    """Merge key=value file entries as subcommand defaults (flags override)."""
    if "--config" not in argv:
        return
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        return      # argparse reports the missing value
    path = Path(argv[idx + 1])
    if not path.exists():
        raise ConfigKeyError(str(path))
    if len(argv) == 0 or argv[0].startswith("-"):
        return
    subparser = _subparser_for(parser, argv[0])
    actions = {a.dest: a for a in subparser._actions}
    values = {}
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigKeyError(f"{path}:{line_no}")
        key, _, raw = line.partition("=")
        dest = key.strip().replace("-", "_")
        if dest not in actions or dest in ("help", "config"):
            raise ConfigKeyError(key.strip())
        action = actions[dest]
        try:
            values[dest] = action.type(raw.strip()) if action.type else raw.strip()
        except (TypeError, ValueError):
            raise ConfigKeyError(key.strip())
    subparser.set_defaults(**values)


def _subparser_for(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            if name in action.choices:
                return action.choices[name]
    raise ConfigKeyError(name)


def _snapshot(args, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {k: (list(v) if isinstance(v, tuple) else v)
               for k, v in vars(args).items() if k != "command"}
    payload["command"] = args.command
    (out_dir / "config.json").write_text(json.dumps(payload, sort_keys=True,
                                                    indent=2) + "\n")


def _write_metrics_csv(path: Path, rows) -> None:
    lines = ["metric,value"]
    lines += [f"{name},{value!r}" for name, value in rows]
    path.write_text("\n".join(lines) + "\n")


def _write_history_csv(path: Path, history) -> None:
    if not history:
        path.write_text("epoch\n")
        return
    keys = sorted({k for record in history for k in record})
    lines = [",".join(keys)]
    for record in history:
        lines.append(",".join(repr(record.get(k, "")) for k in keys))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    _snapshot(args, out)
    motion = MotionParams(occlusion_probability=args.occlusion_prob)
    (videos,) = split_dataset(args.videos, (1.0,), args.seed,
                              default_skeleton(), motion, args.frames,
                              args.height, args.width, args.label_every)
    save_dataset(videos, out, args.label_every, args.seed)
    print(f"wrote {len(videos)} videos under {out}")
    return 0


def _training_config(args, **overrides) -> TrainConfig:
    base = dict(base_lr=args.lr, epochs=args.epochs, batch_size=args.batch,
                seed=args.seed, augment=bool(args.augment),
                precision=args.precision)
    base.update(overrides)
    return TrainConfig(**base)


def _cmd_train_backbone(args) -> int:
    out = Path(args.out)
    _snapshot(args, out)
    videos, manifest = load_dataset(args.data)
    config = _training_config(args, joints=manifest["joints"],
                              backbone_width=args.width_channels,
                              backbone_depth=args.depth)
    ckpt = train_backbone(videos, config)
    save_checkpoint(ckpt, out / "backbone.pwck")
    _write_history_csv(out / "metrics.csv", ckpt.history)
    print(f"final train loss {ckpt.history[-1]['train_loss']:.6f}; "
          f"checkpoint at {out / 'backbone.pwck'}")
    return 0


def _cmd_train_warper(args) -> int:
    out = Path(args.out)
    _snapshot(args, out)
    videos, manifest = load_dataset(args.data)
    backbone_ckpt = load_checkpoint(args.backbone)
    backbone_cfg = TrainConfig.from_dict(backbone_ckpt.config)
    config = _training_config(
        args, joints=manifest["joints"], delta_range=args.delta_range,
        dilations=tuple(args.dilations),
        residual_blocks=args.residual_blocks,
        residual_width=args.residual_width,
        freeze_backbone=bool(args.freeze_backbone),
        backbone_width=backbone_cfg.backbone_width,
        backbone_depth=backbone_cfg.backbone_depth)
    ckpt = train_warper(videos, backbone_ckpt, config)
    save_checkpoint(ckpt, out / "warper.pwck")
    _write_history_csv(out / "metrics.csv", ckpt.history)
    print(f"final train loss {ckpt.history[-1]['train_loss']:.6f}; "
          f"checkpoint at {out / 'warper.pwck'}")
    return 0


def _cmd_propagate(args) -> int:
    out = Path(args.out)
    _snapshot(args, out)
    videos, manifest = load_dataset(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    config = TrainConfig.from_dict(ckpt.config)
    backbone_params = backbone_from_checkpoint(ckpt)
    warper_params = warper_from_checkpoint(ckpt)
    predictions, truths = [], []
    for vi, video in enumerate(videos):
        vdir = out / f"video_{vi:04d}"
        vdir.mkdir(parents=True, exist_ok=True)
        lines = []
        for target, (pose, source) in sorted(propagate_video(
                video, backbone_params, warper_params, args.radius,
                config.sigma, args.min_confidence).items()):
            for j in range(pose.joint_count):
                lines.append(
                    f"{target},{j},{float(pose.xy[j, 0])!r},"
                    f"{float(pose.xy[j, 1])!r},{int(pose.visible[j])},"
                    f"{float(pose.confidence[j])!r}")
            predictions.append(pose)
            truths.append(video.gt_pose(target))
        (vdir / "pseudo_labels.csv").write_text("\n".join(lines) + "\n")
    pck = pck_evaluate(predictions, truths, evaluate.PCK_THRESHOLD,
                       videos[0].reference_scale)
    _write_metrics_csv(out / "metrics.csv",
                       [("propagated_frames", len(predictions)),
                        ("mean_pck", pck.mean)])
    print(f"propagated {len(predictions)} frames; mean PCK {pck.mean:.4f}")
    return 0


def _cmd_aggregate(args) -> int:
    out = Path(args.out)
    _snapshot(args, out)
    videos, manifest = load_dataset(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    config = TrainConfig.from_dict(ckpt.config)
    backbone_params = backbone_from_checkpoint(ckpt)
    warper_params = warper_from_checkpoint(ckpt)
    agg = eval_aggregation(videos, backbone_params, warper_params,
                           args.deltas, min_confidence=config.min_confidence)
    single = eval_single_frame(videos, backbone_params,
                               min_confidence=config.min_confidence)
    _write_metrics_csv(out / "metrics.csv",
                       [("aggregated_pck", agg.mean),
                        ("single_frame_pck", single.mean)])
    print(f"aggregated PCK {agg.mean:.4f} vs single-frame {single.mean:.4f}")
    return 0


def _cmd_eval(args) -> int:
    out = Path(args.out)
    _snapshot(args, out)
    spec = BenchmarkSpec(n_videos=args.videos, seeds=tuple(args.seeds))
    report, rows = run_propagation_benchmark(spec, workers=args.workers)
    write_reports_jsonl([report], out / "report.jsonl")
    csv_rows = []
    for row in rows:
        for key in ("warper", "blockmatch", "copy"):
            csv_rows.append(("propagation", key, row["seed"], "mean_pck",
                             row[key]))
    evaluate.write_pck_csv(csv_rows, out / "metrics.csv")
    for seed, row in zip(spec.seeds, rows):
        save_checkpoint(row["checkpoint"], out / f"warper_seed{seed}.pwck")
    print(f"warper {report.conditions['warper']:.4f} > "
          f"blockmatch {report.conditions['blockmatch']:.4f} > "
          f"copy {report.conditions['copy']:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    out = Path(args.out)
    _snapshot(args, out)
    configurations = [_int_list(part)
                      for part in args.configurations.split(";") if part]
    spec = BenchmarkSpec(n_videos=args.videos, seeds=tuple(args.seeds))
    report = ablate_dilations(spec, configurations, workers=args.workers)
    write_reports_jsonl([report], out / "report.jsonl")
    csv_rows = []
    for key, entry in report.conditions.items():
        for seed, value in zip(spec.seeds, entry["per_seed"]):
            csv_rows.append(("dilation-ablation", key, seed, "mean_pck", value))
    evaluate.write_pck_csv(csv_rows, out / "metrics.csv")
    for key, entry in report.conditions.items():
        print(f"dilations {key}: mean PCK {entry['mean']:.4f}")
    return 0


def _cmd_inspect_offsets(args) -> int:
    out = Path(args.out)
    _snapshot(args, out)
    videos, manifest = load_dataset(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    backbone_params = backbone_from_checkpoint(ckpt)
    warper_params = warper_from_checkpoint(ckpt)
    split = max(1, len(videos) // 2)
    result = offset_motion_regression(videos[:split], videos[split:],
                                      backbone_params, warper_params,
                                      args.delta_range)
    video = videos[-1]
    t = video.manual_indices()[0]
    t_source = min(t + args.delta_range, video.frame_count - 1)
    flow, magnitude = dense_motion_field(video, t, t_source, backbone_params,
                                         warper_params, result)
    write_ppm(out / "predicted_motion.ppm", flow_to_color(flow))
    peak = float(magnitude.max()) or 1.0
    write_pgm(out / "offset_magnitude.pgm", magnitude / peak)
    flow_lines = ["y,x,dy,dx"]
    height, width = magnitude.shape
    for y in range(height):
        for x in range(width):
            flow_lines.append(f"{y},{x},{float(flow[0, y, x])!r},"
                              f"{float(flow[1, y, x])!r}")
    (out / "predicted_motion.csv").write_text("\n".join(flow_lines) + "\n")
    _write_metrics_csv(out / "metrics.csv", [
        ("mean_endpoint_error", result.mean_endpoint_error),
        ("zero_predictor_error", result.zero_predictor_error),
        ("feature_dim", result.feature_dim),
        ("ridge_fallback", int(result.ridge_fallback)),
        ("train_samples", result.train_samples),
        ("test_samples", result.test_samples),
    ])
    print(f"endpoint error {result.mean_endpoint_error:.4f} vs zero predictor "
          f"{result.zero_predictor_error:.4f}")
    return 0


def _cmd_grad_check(args) -> int:
    reports = run_gradient_suite(args.seed, args.tolerance)
    for report in reports:
        print(report)
    if args.out:
        out = Path(args.out)
        _snapshot(args, out)
        _write_metrics_csv(out / "metrics.csv",
                           [(r.op_name, r.max_rel_error) for r in reports])
    return 0 if all(r.passed for r in reports) else 1


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train-backbone": _cmd_train_backbone,
    "train-warper": _cmd_train_warper,
    "propagate": _cmd_propagate,
    "aggregate": _cmd_aggregate,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "inspect-offsets": _cmd_inspect_offsets,
    "grad-check": _cmd_grad_check,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        _apply_config_file(parser, argv)
    except ConfigKeyError as exc:
        print(f"error: invalid config: {exc.key}", file=sys.stderr)
        return 3
    args = parser.parse_args(argv)
    if getattr(args, "threads", None):
        try:
            from threadpoolctl import threadpool_limits
            threadpool_limits(args.threads)
        except ImportError:
            pass
    try:
        return _HANDLERS[args.command](args)
    except (ContractError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
