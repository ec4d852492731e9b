"""In-process message bus, triggered stereo source, approximate-time pairing, latency bookkeeping."""
import csv
import heapq
import logging
import math
import os
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from nightstereo.errors import IoFailure, NonMonotonicInput, UnknownTopic
from nightstereo.scenegen import open_dataset

logger = logging.getLogger(__name__)

LEFT_TOPIC = "camera/left"
RIGHT_TOPIC = "camera/right"
FRAME_IDS = ("left", "right", "none")


@dataclass(frozen=True, eq=False)
class StampedMessage:
    topic: str
    stamp: int  # ns
    frame_id: str
    seq: int
    payload: Any = None

    def __post_init__(self):
        if self.frame_id not in FRAME_IDS:
            raise ValueError(f"frame_id must be one of {FRAME_IDS}, got {self.frame_id!r}")


class Subscription:
    """Bounded FIFO that drops the oldest message on overflow."""

    def __init__(self, topic: str, queue_depth: int):
        if queue_depth < 1:
            raise ValueError(f"queue_depth must be >= 1, got {queue_depth}")
        self.topic = topic
        self.queue_depth = queue_depth
        self.drops = 0
        self._queue: deque = deque()
        self._lock = threading.Lock()

    def _deliver(self, msg: StampedMessage) -> None:
        with self._lock:
            if len(self._queue) == self.queue_depth:
                self._queue.popleft()
                self.drops += 1
            self._queue.append(msg)

    def pop(self) -> Optional[StampedMessage]:
        with self._lock:
            return self._queue.popleft() if self._queue else None

    def drain(self) -> List[StampedMessage]:
        with self._lock:
            items = list(self._queue)
            self._queue.clear()
            return items

    def __len__(self) -> int:
        with self._lock:
            return len(self._queue)

    def __iter__(self) -> Iterator[StampedMessage]:
        while True:
            msg = self.pop()
            if msg is None:
                return
            yield msg


class MessageBus:
    def __init__(self):
        self._subscribers: Dict[str, List[Subscription]] = {}
        self._last_seq: Dict[Tuple[str, str], int] = {}
        self._lock = threading.Lock()

    def declare(self, topic: str) -> None:
        with self._lock:
            self._subscribers.setdefault(topic, [])

    @property
    def topics(self) -> List[str]:
        with self._lock:
            return sorted(self._subscribers)

    def subscribe(self, topic: str, queue_depth: int = 8) -> Subscription:
        subscription = Subscription(topic, queue_depth)
        with self._lock:
            if topic not in self._subscribers:
                raise UnknownTopic(f"topic {topic!r} was never declared")
            self._subscribers[topic].append(subscription)
        return subscription

    def publish(self, topic: str, msg: StampedMessage) -> None:
        """Fan a message out to every subscriber of `topic`, declaring it if needed."""
        key = (topic, msg.frame_id)
        with self._lock:
            last = self._last_seq.get(key)
            if last is not None and msg.seq <= last:
                raise NonMonotonicInput(f"seq {msg.seq} on {topic}/{msg.frame_id} does not follow {last}")
            self._last_seq[key] = msg.seq
            subscribers = list(self._subscribers.setdefault(topic, []))
        for subscription in subscribers:
            subscription._deliver(msg)


# ---------------------------------------------------------------------------
# triggered stereo source
# ---------------------------------------------------------------------------

TriggerPair = Tuple[Optional[StampedMessage], Optional[StampedMessage]]


def trigger_source(dataset_dir, condition: str = "day", fps: float = 10.0, jitter_ns: int = 0,
                   drop_prob: float = 0.0, seed: int = 0) -> Iterator[TriggerPair]:
    """Yield (left, right) messages per trigger; a dropped side is None.

    Both sides share the nominal stamp round(k * 1e9 / fps), then each gets
    independent uniform jitter. Jitter stays below half the period so each
    side's stamps keep increasing.
    """
    if fps <= 0:
        raise ValueError(f"fps must be > 0, got {fps}")
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError(f"drop_prob must be in [0, 1), got {drop_prob}")
    if condition not in ("day", "night"):
        raise ValueError(f"trigger source condition must be day or night, got {condition!r}")
    period = 1e9 / fps
    if jitter_ns < 0 or 2 * jitter_ns >= period:
        raise ValueError(f"jitter {jitter_ns} ns must be >= 0 and below half the {period:.0f} ns period")
    dataset = open_dataset(dataset_dir)
    rng = np.random.default_rng(seed)
    for k in dataset.frames:
        nominal = int(round(k * period))
        jitter = rng.integers(-jitter_ns, jitter_ns + 1, size=2)
        dropped = rng.random(2) < drop_prob
        out = []
        for side, (topic, j, drop) in enumerate(zip((LEFT_TOPIC, RIGHT_TOPIC), jitter, dropped)):
            if drop:
                out.append(None)
                continue
            name = "left" if side == 0 else "right"
            out.append(StampedMessage(topic, nominal + int(j), name, k, dataset.image(condition, name, k)))
        yield out[0], out[1]


# ---------------------------------------------------------------------------
# approximate-time synchronizer
# ---------------------------------------------------------------------------

def optimal_pairing(left: List[int], right: List[int], slop: float) -> List[Tuple[int, int]]:
    """Index pairs of a max-cardinality, min-total-|dt| matching of two sorted stamp lists.

    Some optimal matching never crosses, so a dynamic program over both
    sequences in order finds one.
    """
    n, m = len(left), len(right)
    # score = (pairs, -total |dt|), compared lexicographically
    best = [[(0, 0)] * (m + 1) for _ in range(n + 1)]
    move = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            options = [(best[i - 1][j], 1), (best[i][j - 1], 2)]
            dt = abs(left[i - 1] - right[j - 1])
            if dt <= slop:
                count, cost = best[i - 1][j - 1]
                options.append(((count + 1, cost - dt), 3))
            score, choice = max(options, key=lambda o: o[0])
            best[i][j] = score
            move[i][j] = choice
    pairs = []
    i, j = n, m
    while i > 0 and j > 0:
        choice = move[i][j]
        if choice == 3:
            pairs.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif choice == 1:
            i -= 1
        else:
            j -= 1
    return pairs[::-1]


class ApproximateTimeSynchronizer:
    """Two-queue stereo pairing with a slop bound.

    Messages are buffered until no later message on either side could still
    pair with them; each closed group is then matched optimally and its
    unpaired messages are discarded.
    """

    def __init__(self, slop_ns: float, callback: Optional[Callable[[StampedMessage, StampedMessage], None]] = None):
        if slop_ns < 0:
            raise ValueError(f"slop must be >= 0, got {slop_ns}")
        self.slop = slop_ns
        self.callback = callback
        self.pairs = 0
        self.discarded = 0
        self._pending: Tuple[List[StampedMessage], List[StampedMessage]] = ([], [])
        self._last = [-math.inf, -math.inf]

    def register_callback(self, callback: Callable[[StampedMessage, StampedMessage], None]) -> None:
        self.callback = callback

    def add(self, side: int, msg: StampedMessage) -> List[Tuple[StampedMessage, StampedMessage]]:
        """Queue a message on side 0 (left) or 1 (right) and return the pairs it releases."""
        if msg.stamp <= self._last[side]:
            raise NonMonotonicInput(f"stamp {msg.stamp} does not follow {self._last[side]} on side {side}")
        self._last[side] = msg.stamp
        self._pending[side].append(msg)
        return self._release(min(self._last) - self.slop)

    def flush(self) -> List[Tuple[StampedMessage, StampedMessage]]:
        return self._release(math.inf)

    def _release(self, safe_until: float) -> List[Tuple[StampedMessage, StampedMessage]]:
        events = sorted([(m.stamp, 0, m) for m in self._pending[0]] + [(m.stamp, 1, m) for m in self._pending[1]],
                        key=lambda e: (e[0], e[1]))
        if not events:
            return []
        # longest prefix that is closed: separated from the rest by more than slop and out of reach of the future
        cut = 0
        for i in range(1, len(events) + 1):
            head_max = events[i - 1][0]
            separated = i == len(events) or events[i][0] - head_max > self.slop
            if separated and head_max <= safe_until:
                cut = i
            elif head_max > safe_until:
                break
        if cut == 0:
            return []
        closed = events[:cut]
        left = [e[2] for e in closed if e[1] == 0]
        right = [e[2] for e in closed if e[1] == 1]
        self._pending = (self._pending[0][len(left):], self._pending[1][len(right):])
        matches = optimal_pairing([m.stamp for m in left], [m.stamp for m in right], self.slop)
        released = [(left[i], right[j]) for i, j in matches]
        self.pairs += len(released)
        self.discarded += len(left) + len(right) - 2 * len(released)
        if self.callback is not None:
            for pair in released:
                self.callback(*pair)
        return released


def sync_approx_time(left: Iterable[StampedMessage], right: Iterable[StampedMessage], slop_ns: float,
                     synchronizer: Optional[ApproximateTimeSynchronizer] = None
                     ) -> Iterator[Tuple[StampedMessage, StampedMessage]]:
    """Pair two stamp-ordered streams; arrival order is the merged stamp order."""
    sync = synchronizer or ApproximateTimeSynchronizer(slop_ns)
    tagged_left = ((m.stamp, 0, m) for m in left)
    tagged_right = ((m.stamp, 1, m) for m in right)
    for _, side, msg in heapq.merge(tagged_left, tagged_right, key=lambda e: (e[0], e[1])):
        yield from sync.add(side, msg)
    yield from sync.flush()


# ---------------------------------------------------------------------------
# latency bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class NodeStats:
    count: int = 0
    total_ms: float = 0.0
    max_ms: float = 0.0
    drops: int = 0

    @property
    def mean_ms(self) -> float:
        return self.total_ms / self.count if self.count else 0.0

    def record(self, ms: float) -> None:
        self.count += 1
        self.total_ms += ms
        self.max_ms = max(self.max_ms, ms)


@dataclass
class LatencyReport:
    """Per-node processing times plus end-to-end latency and throughput."""
    nodes: Dict[str, NodeStats] = field(default_factory=dict)
    end_to_end: NodeStats = field(default_factory=NodeStats)
    frames: int = 0
    wall_seconds: float = 0.0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, node: str, ms: float) -> None:
        with self._lock:
            self.nodes.setdefault(node, NodeStats()).record(ms)

    def add_drops(self, node: str, count: int) -> None:
        with self._lock:
            self.nodes.setdefault(node, NodeStats()).drops += count

    @property
    def throughput(self) -> float:
        return self.frames / self.wall_seconds if self.wall_seconds > 0 else 0.0

    @property
    def total_drops(self) -> int:
        return sum(stats.drops for stats in self.nodes.values())

    def rows(self) -> List[List[str]]:
        rows = []
        for name, stats in self.nodes.items():
            fps = stats.count / self.wall_seconds if self.wall_seconds > 0 else 0.0
            rows.append([name, f"{stats.mean_ms:.3f}", f"{stats.max_ms:.3f}", f"{fps:.3f}", str(stats.drops)])
        rows.append(["end_to_end", f"{self.end_to_end.mean_ms:.3f}", f"{self.end_to_end.max_ms:.3f}",
                     f"{self.throughput:.3f}", str(self.total_drops)])
        return rows

    def to_csv(self, path: Union[str, os.PathLike]) -> None:
        try:
            with open(path, "w", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["node", "mean_ms", "max_ms", "fps", "drops"])
                writer.writerows(self.rows())
        except OSError as e:
            raise IoFailure(path, e.strerror) from e


# ---------------------------------------------------------------------------
# graph spec
# ---------------------------------------------------------------------------

class NodeSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    kind: str
    inputs: List[str] = Field(default_factory=list)
    outputs: List[str] = Field(default_factory=list)


class GraphSpec(BaseModel):
    """Pipeline wiring: nodes connected by topic names, plus the topics persisted to the sink dir."""
    model_config = ConfigDict(extra="forbid")

    nodes: List[NodeSpec]
    sinks: List[str] = Field(default_factory=list)

    def node(self, name: str) -> NodeSpec:
        for spec in self.nodes:
            if spec.name == name:
                return spec
        raise KeyError(name)


def default_graph(condition: str = "day") -> GraphSpec:
    """trigger -> sync -> resize -> {segment, enhance} -> {stereo, vo, metrics}.

    In the enhanced condition the raw-image labels only serve as the
    enhancement prior (`prior/*`); `seg/*` is recomputed on the enhanced pair.
    """
    enhanced = condition == "enhanced"
    source = "enhanced" if enhanced else "image"
    pair = [f"{source}/left", f"{source}/right"]
    prior = "prior" if enhanced else "seg"
    segment = [NodeSpec(name="segment", kind="segment", inputs=pair, outputs=["seg/left", "seg/right"])]
    if enhanced:
        segment.insert(0, NodeSpec(name="prior", kind="segment", inputs=["image/left", "image/right"],
                                   outputs=["prior/left", "prior/right"]))
    return GraphSpec(
        nodes=[
            NodeSpec(name="trigger", kind="trigger", outputs=[LEFT_TOPIC, RIGHT_TOPIC]),
            NodeSpec(name="sync", kind="sync", inputs=[LEFT_TOPIC, RIGHT_TOPIC], outputs=["raw/left", "raw/right"]),
            NodeSpec(name="resize", kind="resize", inputs=["raw/left", "raw/right"],
                     outputs=["image/left", "image/right"]),
            *segment,
            NodeSpec(name="enhance", kind="enhance",
                     inputs=["image/left", "image/right", f"{prior}/left", f"{prior}/right"],
                     outputs=["enhanced/left", "enhanced/right"]),
            NodeSpec(name="stereo", kind="stereo", inputs=pair, outputs=["disparity", "depth"]),
            NodeSpec(name="vo", kind="vo", inputs=pair, outputs=["pose"]),
            NodeSpec(name="metrics", kind="metrics", inputs=["depth", "seg/left"], outputs=["metrics"]),
        ],
        sinks=["enhanced/left", "disparity", "depth", "seg/left", "pose", "metrics"],
    )
