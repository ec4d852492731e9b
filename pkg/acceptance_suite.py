# nightstereo acceptance suite
# Seeded synthetic scenes, night vs enhanced vs day, end to end.

import argparse
import logging
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
from dotenv import load_dotenv

from nightstereo.cli import eval_depth, eval_keypoints, eval_seg
from nightstereo.config import RunConfig, worker_count
from nightstereo.geometry import CalibrationSet, Pose
from nightstereo.orchestrator import run_pipeline
from nightstereo.reports import MetricsReport, mean_report, write_metrics_csv
from nightstereo.scenegen import (
    BoxSpec,
    SceneSpec,
    TrajectorySpec,
    build_scene,
    generate_sequence,
    open_dataset,
    render_stereo,
)
from nightstereo.stereo import StereoParams, depth_reduction, estimate_depth
from nightstereo.vo import default_waypoints, endpoint_error, run_vo, waypoint_translation_error

load_dotenv()

logger = logging.getLogger("acceptance")

DEPTH_REDUCTION_MIN = 10.0  # percent
KEYPOINT_RATIO_MIN = 1.2
SEG_DELTA_MIN = 0.005
VO_ENHANCED_VS_DAY_MAX = 1.5
VO_DAY_ENDPOINT_MAX = 0.02
THROUGHPUT_MIN_FPS = 2.0
PLANE_DISPARITY_MAX = 0.25  # px
PLANE_DEPTH_MAX = 0.01  # fraction of Z


def _check(name: str, ok: bool, detail: str) -> MetricsReport:
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return MetricsReport(name, {"passed": ok})


def run_plane_oracle():
    """Fronto-parallel textured wall at Z = 6.712 m seen by the 600 px rig: 60 px disparity everywhere."""
    calib = CalibrationSet(fx=600.0, fy=600.0, cx=299.5, cy=199.5, baseline=0.6712, width=600, height=400)
    z = 6.712
    wall = BoxSpec(min=(-50.0, -30.0, z), max=(50.0, 1.6, 9.0))
    scene = build_scene(SceneSpec(boxes=[wall], n_vehicles=0, n_buildings=0, n_signs=0), seed=3)
    left, right, gt, _ = render_stereo(scene, calib, Pose())
    disp, depth = estimate_depth(left, right, calib, StereoParams(dmax=64), workers=worker_count())
    on_wall = (np.abs(gt.values - z) < 1e-9) & depth.valid
    expected = calib.fx * calib.baseline / z
    disparity_error = float(np.abs(disp.values[on_wall] - expected).mean())
    depth_error = float(np.abs(depth.values[on_wall] - z).mean()) / z
    return [_check("plane oracle", disparity_error < PLANE_DISPARITY_MAX and depth_error < PLANE_DEPTH_MAX,
                   f"mean disparity error {disparity_error:.3f} px, depth error {100 * depth_error:.2f}% "
                   f"over {int(on_wall.sum())} px")]


def run_enhancement_suite(workdir: Path, scenes: int, frames: int):
    """Depth, keypoint and segmentation direction over `scenes` seeded scenes."""
    depth_rows, keypoint_rows, seg_rows = [], [], []
    for seed in range(scenes):
        dataset = workdir / f"scene_{seed:02d}"
        generate_sequence(SceneSpec(), TrajectorySpec(frames=frames), CalibrationSet(),
                          dataset, seed=seed, workers=worker_count())
        sinks = {}
        for condition in ("night", "enhanced"):
            config = RunConfig(dataset=str(dataset), condition=condition, seed=seed)
            sinks[condition] = workdir / f"run_{seed:02d}_{condition}"
            run_pipeline(None, dataset, condition, sinks[condition], config, workers=worker_count(), callback=None)
        gt = open_dataset(dataset)
        depth_rows += eval_depth(gt, sinks)
        seg_rows += eval_seg(gt, sinks)
        keypoint_rows += eval_keypoints(gt, sinks["enhanced"], RunConfig())
        logger.info("scene %d done", seed)

    write_metrics_csv(workdir / "suite_depth.csv", depth_rows)
    write_metrics_csv(workdir / "suite_seg.csv", seg_rows)
    write_metrics_csv(workdir / "suite_keypoints.csv", keypoint_rows)
    depth = mean_report("depth", depth_rows)
    seg = mean_report("seg", seg_rows)
    keypoints = mean_report("keypoints", keypoint_rows)

    reduction = depth_reduction(MetricsReport("night", {"abs_rel": depth["night_abs_rel"]}),
                                MetricsReport("enhanced", {"abs_rel": depth["enhanced_abs_rel"]}))
    ratio = keypoints["enhanced"] / max(keypoints["night"], 1e-9)
    seg_delta = seg["enhanced"] - seg["night"]
    return [
        _check("depth", reduction >= DEPTH_REDUCTION_MIN,
               f"abs_rel night {depth['night_abs_rel']:.4f} enhanced {depth['enhanced_abs_rel']:.4f} "
               f"reduction {reduction:.1f}%"),
        _check("keypoints", ratio >= KEYPOINT_RATIO_MIN,
               f"night {keypoints['night']:.1f} enhanced {keypoints['enhanced']:.1f} ratio {ratio:.2f}"),
        _check("segmentation", seg_delta >= SEG_DELTA_MIN,
               f"night {seg['night']:.4f} enhanced {seg['enhanced']:.4f} delta {100 * seg_delta:+.2f} pp"),
    ]


def run_vo_suite(workdir: Path, frames: int):
    """Night is worst, enhanced stays near day, day drifts little on a closed loop."""
    dataset = workdir / "loop"
    generate_sequence(SceneSpec(), TrajectorySpec(frames=frames, closed=True), CalibrationSet(), dataset,
                      seed=100, workers=worker_count())
    gt = open_dataset(dataset).poses()
    waypoints = default_waypoints(len(gt))
    rows = []
    for condition in ("day", "night", "enhanced"):
        est = run_vo(dataset, condition)
        values = dict(waypoint_translation_error(est, gt, waypoints).values)
        values.update(endpoint_error(est, gt).values)
        rows.append(MetricsReport(condition, values))
    write_metrics_csv(workdir / "suite_vo.csv", rows)
    day, night, enhanced = (r["mean_error"] for r in rows)
    return [
        _check("vo ordering", night > enhanced and enhanced <= VO_ENHANCED_VS_DAY_MAX * max(day, 1e-9),
               f"mean waypoint error day {day:.3f} m night {night:.3f} m enhanced {enhanced:.3f} m"),
        _check("vo day drift", rows[0]["ratio"] < VO_DAY_ENDPOINT_MAX,
               f"day endpoint error {100 * rows[0]['ratio']:.2f}% of path"),
    ]


def run_throughput(workdir: Path, frames: int):
    dataset = workdir / "throughput"
    generate_sequence(SceneSpec(), TrajectorySpec(frames=frames), CalibrationSet(), dataset, seed=7,
                      workers=worker_count())
    config = RunConfig(dataset=str(dataset), condition="enhanced")
    report = run_pipeline(None, dataset, "enhanced", workdir / "throughput_run", config,
                          workers=worker_count(), callback=None)
    return [_check("throughput", report.throughput >= THROUGHPUT_MIN_FPS,
                   f"{report.throughput:.2f} fps over {report.frames} frames")]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="nightstereo acceptance experiments")
    parser.add_argument("--workdir", help="keep datasets and runs here (default: a temp dir)")
    parser.add_argument("--scenes", type=int, default=10)
    parser.add_argument("--frames", type=int, default=3, help="frames per enhancement scene")
    parser.add_argument("--loop-frames", type=int, default=200)
    parser.add_argument("--only", choices=("plane", "enhancement", "vo", "throughput"))
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    with tempfile.TemporaryDirectory() as tmp:
        workdir = Path(args.workdir or tmp)
        workdir.mkdir(parents=True, exist_ok=True)
        results = []
        for name, experiment in (
            ("plane", run_plane_oracle),
            ("enhancement", lambda: run_enhancement_suite(workdir, args.scenes, args.frames)),
            ("vo", lambda: run_vo_suite(workdir, args.loop_frames)),
            ("throughput", lambda: run_throughput(workdir, 10)),
        ):
            if args.only and args.only != name:
                continue
            start = time.perf_counter()
            results += experiment()
            print(f"      {name} took {time.perf_counter() - start:.1f} s")
        write_metrics_csv(workdir / "acceptance.csv", results)
    return 0 if all(r["passed"] for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
