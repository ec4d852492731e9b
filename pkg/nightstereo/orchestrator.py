"""Runs a pipeline graph over a dataset and writes its sink topics.

The coordinator thread owns the bus, the synchronizer and every file
write; node work runs on a thread pool as soon as a frame's inputs for that
node exist. Stateful nodes (visual odometry) see frames strictly in order.
"""
import graphlib
import logging
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, List, Optional, Set

from nightstereo.config import RunConfig
from nightstereo.dataflow import (
    LEFT_TOPIC,
    RIGHT_TOPIC,
    ApproximateTimeSynchronizer,
    GraphSpec,
    LatencyReport,
    MessageBus,
    NodeStats,
    StampedMessage,
    default_graph,
    trigger_source,
)
from nightstereo.enhance import enhance, weights_for
from nightstereo.errors import ConfigError, CycleInGraph, IoFailure, NoOverlap, UnregisteredNode
from nightstereo.geometry import Pose, Trajectory, save_poses
from nightstereo.imaging import resize_bilinear, save_pnm
from nightstereo.maps import (
    resize_depth,
    save_depth_pgm,
    save_disparity_pgm,
    save_labels_pgm,
    write_scale_sidecar,
)
from nightstereo.reports import MetricsReport, write_metrics_csv
from nightstereo.scenegen import Dataset, open_dataset
from nightstereo.segment import fit_centroids, load_model, pixel_accuracy, resize_labels, segment_stub
from nightstereo.stereo import depth_error, estimate_depth
from nightstereo.vo import StereoOdometry

logger = logging.getLogger(__name__)

Callback = Callable[[str, str, str], None]

DEPTH_SCALE = 0.002
DISPARITY_SCALE = 1.0 / 256.0
SOURCE_KINDS = ("trigger", "sync")


def log_callback(node: str, status: str, message: str) -> None:
    level = logging.ERROR if status == "error" else logging.INFO
    logger.log(level, "[%s] %s: %s", node, status, message)


@dataclass
class Node:
    name: str
    inputs: List[str]
    outputs: List[str]
    process: Callable[[int, Dict[str, object]], Dict[str, object]]
    sequential: bool = False


@dataclass
class PipelineContext:
    config: RunConfig
    dataset: Dataset
    condition: str

    @property
    def calibration(self):
        return self.dataset.calibration.scaled(self.config.dataflow.width, self.config.dataflow.height)

    @cached_property
    def segment_model(self):
        cfg = self.config.segment
        return load_model(cfg.model_file) if cfg.model_file else fit_centroids(self.dataset.path, cfg.max_frames)


# ---------------------------------------------------------------------------
# node factories
# ---------------------------------------------------------------------------

def create_resize_node(spec, ctx: PipelineContext) -> Node:
    width, height = ctx.config.dataflow.width, ctx.config.dataflow.height

    def process(frame, inputs):
        return {out: resize_bilinear(inputs[src], width, height) for src, out in zip(spec.inputs, spec.outputs)}
    return Node(spec.name, spec.inputs, spec.outputs, process)


def create_segment_node(spec, ctx: PipelineContext) -> Node:
    model = ctx.segment_model

    def process(frame, inputs):
        return {out: segment_stub(inputs[src], model) for src, out in zip(spec.inputs, spec.outputs)}
    return Node(spec.name, spec.inputs, spec.outputs, process)


def create_enhance_node(spec, ctx: PipelineContext) -> Node:
    params = ctx.config.enhance
    weights = weights_for(params)
    images, segs = spec.inputs[:2], spec.inputs[2:]

    def process(frame, inputs):
        out = {}
        for i, topic in enumerate(spec.outputs):
            seg = inputs[segs[i]] if i < len(segs) else None
            out[topic] = enhance(inputs[images[i]], seg, weights, params)
        return out
    return Node(spec.name, spec.inputs, spec.outputs, process)


def create_stereo_node(spec, ctx: PipelineContext) -> Node:
    params = ctx.config.stereo
    calib = ctx.calibration

    def process(frame, inputs):
        disparity, depth = estimate_depth(inputs[spec.inputs[0]], inputs[spec.inputs[1]], calib, params)
        return dict(zip(spec.outputs, (disparity, depth)))
    return Node(spec.name, spec.inputs, spec.outputs, process)


def create_vo_node(spec, ctx: PipelineContext) -> Node:
    odometry = StereoOdometry(ctx.calibration, ctx.config.vo)

    def process(frame, inputs):
        return {spec.outputs[0]: odometry.step(frame, inputs[spec.inputs[0]], inputs[spec.inputs[1]])}
    return Node(spec.name, spec.inputs, spec.outputs, process, sequential=True)


def create_metrics_node(spec, ctx: PipelineContext) -> Node:
    def process(frame, inputs):
        values = {}
        depth = inputs.get("depth")
        if depth is not None:
            gt_depth = resize_depth(ctx.dataset.gt_depth(frame), depth.width, depth.height)
            try:
                values.update(depth_error(depth, gt_depth).values)
            except NoOverlap:
                values.update({"mae": float("nan"), "abs_rel": float("nan"), "valid_fraction": 0.0})
        seg = inputs.get("seg/left")
        if seg is not None:
            gt_labels = resize_labels(ctx.dataset.gt_labels(frame), seg.width, seg.height)
            values["pixel_accuracy"] = pixel_accuracy(seg, gt_labels)
        return {spec.outputs[0]: MetricsReport(f"{frame:06d}", values)}
    return Node(spec.name, spec.inputs, spec.outputs, process)


NODE_KINDS: Dict[str, Callable[..., Node]] = {
    "resize": create_resize_node,
    "segment": create_segment_node,
    "enhance": create_enhance_node,
    "stereo": create_stereo_node,
    "vo": create_vo_node,
    "metrics": create_metrics_node,
}


# ---------------------------------------------------------------------------
# graph validation
# ---------------------------------------------------------------------------

def validate_graph(graph: GraphSpec) -> List[str]:
    """Topological order of the processing nodes; sources first are implied."""
    producers: Dict[str, str] = {}
    for spec in graph.nodes:
        if spec.kind not in NODE_KINDS and spec.kind not in SOURCE_KINDS:
            raise UnregisteredNode(f"node {spec.name!r} has unregistered kind {spec.kind!r}")
        for topic in spec.outputs:
            if topic in producers:
                raise ConfigError(f"topic {topic!r} produced by both {producers[topic]!r} and {spec.name!r}")
            producers[topic] = spec.name
    kinds = [spec.kind for spec in graph.nodes]
    if kinds.count("trigger") != 1 or kinds.count("sync") != 1:
        raise ConfigError("a graph needs exactly one trigger and one sync node")

    sorter = graphlib.TopologicalSorter()
    for spec in graph.nodes:
        deps = set()
        for topic in spec.inputs:
            if topic not in producers:
                raise ConfigError(f"node {spec.name!r} reads {topic!r}, which nothing produces")
            deps.add(producers[topic])
        sorter.add(spec.name, *sorted(deps))
    for topic in graph.sinks:
        if topic not in producers:
            raise ConfigError(f"sink topic {topic!r} is never produced")
    try:
        order = list(sorter.static_order())
    except graphlib.CycleError as e:
        raise CycleInGraph(f"pipeline graph has a cycle: {' -> '.join(e.args[1])}") from e
    return [name for name in order if graph.node(name).kind not in SOURCE_KINDS]


def init_nodes(graph: GraphSpec, ctx: PipelineContext, callback: Optional[Callback] = None) -> List[Node]:
    order = validate_graph(graph)
    nodes = []
    for name in order:
        spec = graph.node(name)
        if callback:
            callback(name, "initializing", f"Initializing {spec.kind} node...")
        nodes.append(NODE_KINDS[spec.kind](spec, ctx))
    return nodes


# ---------------------------------------------------------------------------
# sinks
# ---------------------------------------------------------------------------

class SinkWriter:
    """Single writer for every persisted topic of a run."""

    def __init__(self, sink_dir, topics: List[str]):
        self.root = Path(sink_dir)
        self.topics = list(topics)
        self.poses: Dict[int, Pose] = {}
        self.metrics: Dict[int, MetricsReport] = {}
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            for topic in self.topics:
                directory = self._directory(topic)
                if directory is not None:
                    directory.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise IoFailure(self.root, e.strerror) from e
        if "disparity" in self.topics:
            write_scale_sidecar(self.root / "disparity", DISPARITY_SCALE, 1, "px")
        if "depth" in self.topics:
            write_scale_sidecar(self.root / "depth", DEPTH_SCALE, 0, "m")

    def _directory(self, topic: str) -> Optional[Path]:
        if topic in ("pose", "metrics"):
            return None
        return self.root / topic.split("/")[0] if topic.endswith("/left") else self.root / topic.replace("/", "_")

    def write(self, topic: str, frame: int, payload) -> None:
        if topic == "pose":
            self.poses[frame] = payload
            return
        if topic == "metrics":
            self.metrics[frame] = payload
            return
        directory = self._directory(topic)
        if topic == "disparity":
            save_disparity_pgm(directory / f"{frame:06d}.pgm", payload, DISPARITY_SCALE)
        elif topic == "depth":
            save_depth_pgm(directory / f"{frame:06d}.pgm", payload, DEPTH_SCALE)
        elif topic.startswith("seg/"):
            save_labels_pgm(directory / f"{frame:06d}.pgm", payload)
        else:
            save_pnm(payload, directory / f"{frame:06d}.ppm")

    def close(self) -> None:
        if self.poses or "pose" in self.topics:
            frames = sorted(self.poses)
            save_poses(self.root / "poses.txt", Trajectory(frames, [self.poses[f] for f in frames]))
        if self.metrics or "metrics" in self.topics:
            write_metrics_csv(self.root / "metrics.csv", [self.metrics[f] for f in sorted(self.metrics)])


# ---------------------------------------------------------------------------
# scheduler
# ---------------------------------------------------------------------------

@dataclass
class _FrameState:
    frame: int
    stamp: int
    admitted: float
    values: Dict[str, object] = field(default_factory=dict)
    submitted: Set[str] = field(default_factory=set)
    done: Set[str] = field(default_factory=set)


def _timed(node: Node, frame: int, inputs: Dict[str, object]):
    start = time.perf_counter()
    outputs = node.process(frame, inputs)
    return outputs, (time.perf_counter() - start) * 1000.0


def _synced_frames(ctx: PipelineContext, bus: MessageBus, report: LatencyReport):
    """Trigger -> bus -> synchronizer; yields (frame, stamp, left image, right image) in stamp order."""
    cfg = ctx.config.dataflow
    source = "day" if ctx.condition == "day" else "night"
    sync = ApproximateTimeSynchronizer(cfg.effective_slop())
    subs = [bus.subscribe(topic, cfg.queue_depth) for topic in (LEFT_TOPIC, RIGHT_TOPIC)]
    dropped = 0
    for left, right in trigger_source(ctx.dataset.path, source, cfg.fps, cfg.jitter_ns, cfg.drop_prob, ctx.config.seed):
        start = time.perf_counter()
        for msg in (left, right):
            if msg is None:
                dropped += 1
            else:
                bus.publish(msg.topic, msg)
        released = []
        for side, sub in enumerate(subs):
            for msg in sub.drain():
                released.extend(sync.add(side, msg))
        report.record("sync", (time.perf_counter() - start) * 1000.0)
        for l_msg, r_msg in released:
            yield l_msg.seq, min(l_msg.stamp, r_msg.stamp), l_msg.payload, r_msg.payload
    for l_msg, r_msg in sync.flush():
        yield l_msg.seq, min(l_msg.stamp, r_msg.stamp), l_msg.payload, r_msg.payload
    report.add_drops("sync", dropped + sync.discarded + sum(s.drops for s in subs))


def run_pipeline(graph: Optional[GraphSpec], dataset, condition: str, sink_dir,
                 config: Optional[RunConfig] = None, workers: int = 1,
                 callback: Optional[Callback] = log_callback) -> LatencyReport:
    """Stream a dataset through the graph, persist its sink topics, return timing."""
    if condition not in ("day", "night", "enhanced"):
        raise ValueError(f"unknown condition {condition!r}")
    config = config or RunConfig(condition=condition)
    graph = graph or config.dataflow.graph or default_graph(condition)
    if callback:
        callback("System", "started", f"Initializing {condition} pipeline...")
    try:
        ctx = PipelineContext(config, dataset if isinstance(dataset, Dataset) else open_dataset(dataset), condition)
        nodes = init_nodes(graph, ctx, callback)
        report = LatencyReport()
        report.nodes["sync"] = NodeStats()
        for node in nodes:
            report.nodes[node.name] = NodeStats()
        writer = SinkWriter(sink_dir, graph.sinks)
        bus = MessageBus()
        for spec in graph.nodes:
            for topic in spec.outputs:
                bus.declare(topic)
        sinks = {topic: bus.subscribe(topic, config.dataflow.queue_depth) for topic in graph.sinks}
        raw_topics = next(spec for spec in graph.nodes if spec.kind == "sync").outputs
        if callback:
            callback("System", "progress", "Streaming frames...")
        wall_start = time.perf_counter()
        frames = _synced_frames(ctx, bus, report)
        _schedule(max(config.dataflow.max_inflight, 1), frames, raw_topics, nodes, bus, sinks, writer, report,
                  workers, callback)
        report.wall_seconds = time.perf_counter() - wall_start
        writer.close()
        report.to_csv(Path(sink_dir) / "latency.csv")
    except Exception as e:
        if callback:
            callback("System", "error", f"Error occurred: {e}")
        raise
    if callback:
        callback("System", "completed", f"{report.frames} frames at {report.throughput:.2f} fps")
    return report


def _schedule(max_inflight, frames, raw_topics, nodes, bus, sinks, writer, report, workers, callback) -> None:
    active: Dict[int, _FrameState] = {}
    running = {}
    counters: Dict[str, int] = {}
    exhausted = False

    def publish(state: _FrameState, topic: str, payload) -> None:
        counters[topic] = counters.get(topic, -1) + 1
        bus.publish(topic, StampedMessage(topic, state.stamp, "none", counters[topic], payload))
        sub = sinks.get(topic)
        if sub is not None:
            # drained on every publish, so the queue only ever holds this frame's message
            for msg in sub.drain():
                writer.write(topic, state.frame, msg.payload)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        while True:
            while not exhausted and len(active) < max_inflight:
                item = next(frames, None)
                if item is None:
                    exhausted = True
                    break
                frame, stamp, left, right = item
                active[frame] = _FrameState(frame, stamp, time.perf_counter(),
                                            dict(zip(raw_topics, (left, right))))

            for frame in sorted(active):
                state = active[frame]
                for node in nodes:
                    if node.name in state.submitted or any(t not in state.values for t in node.inputs):
                        continue
                    if node.sequential and any(node.name not in active[f].done for f in active if f < frame):
                        continue
                    inputs = {t: state.values[t] for t in node.inputs}
                    state.submitted.add(node.name)
                    running[pool.submit(_timed, node, frame, inputs)] = (frame, node)

            if not running:
                if active:
                    raise RuntimeError(f"pipeline stalled with frames {sorted(active)} unfinished")
                if exhausted:
                    break
                continue

            done, _ = wait(list(running), return_when=FIRST_COMPLETED)
            for future in sorted(done, key=lambda f: (running[f][0], running[f][1].name)):
                frame, node = running.pop(future)
                try:
                    outputs, ms = future.result()
                except Exception as e:
                    if callback:
                        callback(node.name, "error", f"frame {frame}: {e}")
                    for other in running:
                        other.cancel()
                    raise
                report.record(node.name, ms)
                state = active[frame]
                state.values.update(outputs)
                state.done.add(node.name)
                for topic, payload in outputs.items():
                    publish(state, topic, payload)
                if len(state.done) == len(nodes):
                    report.end_to_end.record((time.perf_counter() - state.admitted) * 1000.0)
                    report.frames += 1
                    del active[frame]
                    if callback:
                        callback("System", "progress", f"frame {frame} done")
