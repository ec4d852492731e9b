"""Run configuration: one pydantic model per stage, loaded from JSON."""
import json
import logging
import os
from pathlib import Path
from typing import Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from nightstereo.dataflow import GraphSpec
from nightstereo.enhance import EnhanceParams
from nightstereo.errors import ConfigError, IoFailure
from nightstereo.geometry import CalibrationSet
from nightstereo.scenegen import DegradeParams, SceneSpec, TrajectorySpec
from nightstereo.stereo import StereoParams
from nightstereo.vo import VoParams

logger = logging.getLogger(__name__)

EFFECTIVE_CONFIG = "effective_config.json"
THREADS_ENV = "NIGHTSTEREO_THREADS"
LOG_LEVEL_ENV = "NIGHTSTEREO_LOG_LEVEL"

Condition = Literal["day", "night", "enhanced"]


class SegmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_frames: int = Field(default=20, ge=1, description="day frames sampled to fit centroids")
    model_file: Optional[str] = Field(default=None, description="pre-fitted centroid model (JSON)")


class DataflowConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fps: float = Field(default=10.0, gt=0.0)
    jitter_ns: int = Field(default=0, ge=0)
    drop_prob: float = Field(default=0.0, ge=0.0, lt=1.0)
    slop_ns: Optional[int] = Field(default=None, description="defaults to half the frame period")
    queue_depth: int = Field(default=8, ge=1)
    width: int = Field(default=600, ge=1)
    height: int = Field(default=400, ge=1)
    max_inflight: int = Field(default=4, ge=1, description="frames admitted before earlier ones finish")
    graph: Optional[GraphSpec] = None

    def effective_slop(self) -> int:
        return self.slop_ns if self.slop_ns is not None else int(round(0.5e9 / self.fps))


class GenerateConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scene: SceneSpec = Field(default_factory=SceneSpec)
    trajectory: TrajectorySpec = Field(default_factory=TrajectorySpec)
    calibration: CalibrationSet = Field(default_factory=CalibrationSet)
    night_preset: Literal["night", "dusk"] = "night"
    night: Optional[DegradeParams] = Field(default=None, description="overrides night_preset")

    def night_params(self, seed: int) -> DegradeParams:
        if self.night is not None:
            return self.night
        return DegradeParams.dusk(seed) if self.night_preset == "dusk" else DegradeParams.night(seed)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: str = "data/synthetic"
    condition: Condition = "day"
    output: str = "runs/day"
    seed: int = 0
    generate: GenerateConfig = Field(default_factory=GenerateConfig)
    enhance: EnhanceParams = Field(default_factory=EnhanceParams)
    stereo: StereoParams = Field(default_factory=StereoParams)
    vo: VoParams = Field(default_factory=VoParams)
    segment: SegmentConfig = Field(default_factory=SegmentConfig)
    dataflow: DataflowConfig = Field(default_factory=DataflowConfig)


def load_config(path: Optional[Union[str, os.PathLike]] = None, **overrides) -> RunConfig:
    """Read a JSON run config (or the defaults) and apply top-level overrides that are not None."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as e:
            raise IoFailure(path, e.strerror) from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def save_effective_config(config: RunConfig, directory: Union[str, os.PathLike]) -> Path:
    """Persist every setting, defaults included, next to a command's outputs."""
    path = Path(directory) / EFFECTIVE_CONFIG
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(config.model_dump_json(indent=2) + "\n")
    except OSError as e:
        raise IoFailure(path, e.strerror) from e
    return path


def worker_count() -> int:
    """NIGHTSTEREO_THREADS, else the CPU count. Never part of the persisted config."""
    load_dotenv()
    value = os.getenv(THREADS_ENV)
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            logger.warning("ignoring non-integer %s=%r", THREADS_ENV, value)
    return os.cpu_count() or 1
