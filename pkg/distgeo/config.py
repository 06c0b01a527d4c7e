from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, Literal, Optional, Sequence, Union

import orjson
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .diffusion import DiffusionConfig
from .errors import ConfigError
from .metrics import MetricsConfig
from .minisets import MinisetConfig
from .patches import GraphConfig, PatchConfig
from .solver import SolverConfig
from .stitching import StitchConfig
from .synthetic import OraclePredictorConfig, SpotConfig, SyntheticConfig

# sections carrying their own seed; --seed sets all of them
SEEDED = ("synthetic", "oracle", "minisets", "patch", "solver", "metrics")


class EmbedConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    h: int = Field(32, ge=1)
    normalize: bool = True


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    synthetic: SyntheticConfig = SyntheticConfig()
    spots: SpotConfig = SpotConfig()
    oracle: OraclePredictorConfig = OraclePredictorConfig()
    minisets: MinisetConfig = MinisetConfig()
    embed: EmbedConfig = EmbedConfig()
    graph: GraphConfig = GraphConfig()
    patch: PatchConfig = PatchConfig()
    diffusion: DiffusionConfig = DiffusionConfig()
    stitch: StitchConfig = StitchConfig()
    solver: SolverConfig = SolverConfig()
    metrics: MetricsConfig = MetricsConfig()
    predictor: Literal["oracle", "analytic"] = "oracle"
    weighting: Literal["weighted", "uniform"] = "weighted"
    threads: int = Field(1, ge=1)
    input_dir: Optional[str] = None
    output_dir: str = "run"

    def seeds(self) -> Dict[str, int]:
        return {name: getattr(self, name).seed for name in SEEDED}


def _parse_value(raw: str) -> Any:
    try:
        return orjson.loads(raw)
    except orjson.JSONDecodeError:
        return raw


def _set_dotted(doc: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = doc
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"cannot set {key}: {part} is not a section")
        node = child
    node[parts[-1]] = value


def load_config(
    path: Union[str, Path, None] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> PipelineConfig:
    """
    Defaults, then the JSON document at `path`, then `key.sub=value` overrides
    (values parsed as JSON when possible), then `seed` applied to every seeded section.
    """
    doc: Dict[str, Any] = {}
    if path is not None:
        try:
            doc = orjson.loads(Path(path).read_bytes())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except orjson.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")

    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        _set_dotted(doc, key.strip(), _parse_value(raw.strip()))

    if seed is not None:
        for section in SEEDED:
            _set_dotted(doc, f"{section}.seed", seed)

    try:
        return PipelineConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def dump_config(cfg: PipelineConfig) -> Dict[str, Any]:
    return cfg.model_dump(mode="json")
