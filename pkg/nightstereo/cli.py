"""Command line: `python -m nightstereo generate|run|eval ...`.

Exit codes: 0 success, 1 an `eval --check` gate failed, 2 operational error.
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import load_dotenv

from nightstereo.config import LOG_LEVEL_ENV, RunConfig, load_config, save_effective_config, worker_count
from nightstereo.errors import MissingInput, NightStereoError, NoOverlap
from nightstereo.geometry import Trajectory, load_poses
from nightstereo.imaging import load_pnm, resize_bilinear
from nightstereo.maps import DepthMap, load_depth_pgm, load_labels_pgm, read_scale_sidecar, resize_depth
from nightstereo.orchestrator import run_pipeline
from nightstereo.reports import MetricsReport, mean_report, write_metrics_csv
from nightstereo.scenegen import Dataset, generate_sequence, open_dataset
from nightstereo.segment import pixel_accuracy, resize_labels
from nightstereo.stereo import depth_error, depth_reduction, lidar_sample
from nightstereo.vo import default_waypoints, endpoint_error, keypoint_delta, waypoint_translation_error

logger = logging.getLogger(__name__)

EVAL_KINDS = ("keypoints", "depth", "seg", "vo")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nightstereo", description="Low-light stereo perception pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="render a synthetic stereo dataset")
    gen.add_argument("--config", help="run config JSON")
    gen.add_argument("--out", help="dataset directory (overrides config.dataset)")
    gen.add_argument("--seed", type=int)

    run = sub.add_parser("run", help="stream a dataset through the pipeline")
    run.add_argument("--config", help="run config JSON")
    run.add_argument("--condition", choices=("day", "night", "enhanced"))
    run.add_argument("--dataset", help="dataset directory (overrides config.dataset)")
    run.add_argument("--out", help="sink directory (overrides config.output)")

    ev = sub.add_parser("eval", help="compare conditions against ground truth")
    ev.add_argument("kind", choices=EVAL_KINDS)
    ev.add_argument("--config", help="run config JSON")
    ev.add_argument("--gt", help="dataset directory with ground truth")
    ev.add_argument("--day", help="day sink directory (vo)")
    ev.add_argument("--night", help="night sink directory")
    ev.add_argument("--enhanced", help="enhanced sink directory")
    ev.add_argument("--out", help="directory for the metrics CSV")
    ev.add_argument("--check", action="store_true", help="exit 1 unless enhanced beats night")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(config: RunConfig) -> Path:
    gen = config.generate
    out = generate_sequence(gen.scene, gen.trajectory, gen.calibration, config.dataset, seed=config.seed,
                            night=gen.night_params(config.seed), workers=worker_count())
    save_effective_config(config, out)
    print(out / "manifest.json")
    return out


def cmd_run(config: RunConfig) -> Path:
    out = Path(config.output)
    report = run_pipeline(None, config.dataset, config.condition, out, config, workers=worker_count())
    save_effective_config(config, out)
    latency = out / "latency.csv"
    print(f"{latency} ({report.frames} frames, {report.throughput:.2f} fps)")
    return latency


def _require(value: Optional[str], flag: str, kind: str) -> Path:
    if not value:
        raise MissingInput(f"eval {kind} needs {flag}")
    path = Path(value)
    if not path.exists():
        raise MissingInput(f"{flag} {path} does not exist")
    return path


def _frames_in(directory: Path, suffix: str) -> List[int]:
    if not directory.is_dir():
        raise MissingInput(f"{directory} is not a directory")
    return sorted(int(p.stem) for p in directory.glob(f"*{suffix}") if p.stem.isdigit())


def eval_keypoints(gt: Dataset, enhanced_sink: Path, config: RunConfig) -> List[MetricsReport]:
    rows = []
    for frame in _frames_in(enhanced_sink / "enhanced", ".ppm"):
        enhanced = load_pnm(enhanced_sink / "enhanced" / f"{frame:06d}.ppm")
        night = resize_bilinear(gt.image("night", "left", frame), enhanced.width, enhanced.height)
        rows.append(MetricsReport(f"{frame:06d}", keypoint_delta(night, enhanced, config.vo).values))
    return rows


def _load_sink_depth(sink: Path, frame: int) -> DepthMap:
    scale = read_scale_sidecar(sink / "depth")["scale"]
    return load_depth_pgm(sink / "depth" / f"{frame:06d}.pgm", scale)


def eval_depth(gt: Dataset, sinks: Dict[str, Path]) -> List[MetricsReport]:
    first = next(iter(sinks.values()))
    rows = []
    for frame in _frames_in(first / "depth", ".pgm"):
        values = {}
        for condition, sink in sinks.items():
            pred = _load_sink_depth(sink, frame)
            truth = resize_depth(gt.gt_depth(frame), pred.width, pred.height)
            try:
                dense = depth_error(pred, truth).values
            except NoOverlap:
                logger.warning("frame %d: %s depth has no valid pixel on ground truth", frame, condition)
                dense = {"mae": float("nan"), "abs_rel": float("nan"), "valid_fraction": 0.0}
            for key in ("mae", "abs_rel", "valid_fraction"):
                values[f"{condition}_{key}"] = dense[key]
            sparse = lidar_sample(truth)
            if (sparse.valid & pred.valid).any():
                values[f"{condition}_lidar_abs_rel"] = depth_error(pred, sparse)["abs_rel"]
        rows.append(MetricsReport(f"{frame:06d}", values))
    return rows


def eval_seg(gt: Dataset, sinks: Dict[str, Path]) -> List[MetricsReport]:
    first = next(iter(sinks.values()))
    rows = []
    for frame in _frames_in(first / "seg", ".pgm"):
        values = {}
        for condition, sink in sinks.items():
            pred = load_labels_pgm(sink / "seg" / f"{frame:06d}.pgm")
            truth = resize_labels(gt.gt_labels(frame), pred.width, pred.height)
            values[condition] = pixel_accuracy(pred, truth)
        rows.append(MetricsReport(f"{frame:06d}", values))
    return rows


def _poses_file(path: Path) -> Path:
    if path.is_file():
        return path
    for candidate in (path / "poses.txt", path / "gt" / "poses.txt"):
        if candidate.is_file():
            return candidate
    raise MissingInput(f"no poses.txt under {path}")


def eval_vo(gt_path: Path, sinks: Dict[str, Path]) -> List[MetricsReport]:
    gt: Trajectory = load_poses(_poses_file(gt_path))
    waypoints = default_waypoints(len(gt))
    rows = []
    for condition, sink in sinks.items():
        est = load_poses(_poses_file(sink))
        values = dict(waypoint_translation_error(est, gt, waypoints).values)
        values.update(endpoint_error(est, gt).values)
        rows.append(MetricsReport(condition, values))
    return rows


def _summary(kind: str, rows: List[MetricsReport]) -> MetricsReport:
    summary = mean_report("summary", rows)
    values = summary.values
    if kind == "seg" and "night" in values and "enhanced" in values:
        values["delta"] = values["enhanced"] - values["night"]
    if kind == "depth" and "night_abs_rel" in values and "enhanced_abs_rel" in values:
        values["reduction_pct"] = depth_reduction(MetricsReport("night", {"abs_rel": values["night_abs_rel"]}),
                                                  MetricsReport("enhanced", {"abs_rel": values["enhanced_abs_rel"]}))
    return summary


def gate_passes(kind: str, summary: Optional[MetricsReport], rows: List[MetricsReport]) -> bool:
    """True when the enhanced condition beats night for `kind`."""
    if kind == "vo":
        by_name = {r.name: r for r in rows}
        if "night" not in by_name or "enhanced" not in by_name:
            raise MissingInput("eval vo --check needs --night and --enhanced")
        return by_name["enhanced"]["mean_error"] < by_name["night"]["mean_error"]
    keys = {"keypoints": ("enhanced", "night", 1), "seg": ("enhanced", "night", 1),
            "depth": ("enhanced_abs_rel", "night_abs_rel", -1)}[kind]
    enhanced, night, sign = keys
    if enhanced not in summary or night not in summary:
        raise MissingInput(f"eval {kind} --check needs both night and enhanced inputs")
    return sign * (summary[enhanced] - summary[night]) > 0


def cmd_eval(kind: str, args, config: RunConfig) -> int:
    sinks = {name: _require(getattr(args, name), f"--{name}", kind)
             for name in ("day", "night", "enhanced") if getattr(args, name)}
    if kind == "keypoints":
        gt = open_dataset(_require(args.gt, "--gt", kind))
        rows = eval_keypoints(gt, _require(args.enhanced, "--enhanced", kind), config)
    elif kind == "vo":
        if not sinks:
            raise MissingInput("eval vo needs at least one of --day, --night, --enhanced")
        rows = eval_vo(_require(args.gt, "--gt", kind), sinks)
    else:
        sinks.pop("day", None)
        if not sinks:
            raise MissingInput(f"eval {kind} needs --night and/or --enhanced")
        gt = open_dataset(_require(args.gt, "--gt", kind))
        rows = eval_depth(gt, sinks) if kind == "depth" else eval_seg(gt, sinks)
    if not rows:
        raise MissingInput(f"eval {kind}: no frames found in the given inputs")

    # vo rows are already one summary per condition
    summary = None if kind == "vo" else _summary(kind, rows)
    out = Path(args.out or config.output)
    save_effective_config(config, out)
    csv_path = out / f"eval_{kind}.csv"
    write_metrics_csv(csv_path, rows if summary is None else rows + [summary])
    print(csv_path)
    if args.check and not gate_passes(kind, summary, rows):
        logger.warning("eval %s: enhanced condition is not better than night", kind)
        return 1
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(
        level=os.getenv(LOG_LEVEL_ENV, "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            config = load_config(args.config, dataset=args.out, seed=args.seed)
            cmd_generate(config)
        elif args.command == "run":
            config = load_config(args.config, condition=args.condition, dataset=args.dataset, output=args.out)
            cmd_run(config)
        else:
            config = load_config(args.config, output=args.out)
            return cmd_eval(args.kind, args, config)
    except NightStereoError as e:
        print(f"{e.name}: {e}", file=sys.stderr)
        return 2
    return 0
