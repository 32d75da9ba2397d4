"""
Run configuration models
"""

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

from pydantic import BaseModel, Field, model_validator

from models.data import SyntheticConfig
from models.errors import ConfigValidationError
from models.task import GroupingConfig, InversionConfig
from models.training import AGConfig, EvalConfig, TrainConfig
from models.zoo import ZooConfig


class DatasetConfig(SyntheticConfig):
    """Synthetic benchmark settings, or a directory-of-images dataset"""
    kind: Literal["synthetic", "folder"] = "synthetic"
    root: Optional[str] = None
    split_file: Optional[str] = None


class SweepConfig(BaseModel):
    """Pool-size and group-count sweeps"""
    pool_sizes: List[int] = Field(default_factory=lambda: [3, 6, 9, 12])
    group_counts: List[int] = Field(default_factory=lambda: [1, 2, 3, 4])


class RunConfig(BaseModel):
    """One experiment: every section plus the root seed"""
    seed: int
    output_dir: str = "runs/desk"
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    zoo: ZooConfig = Field(default_factory=ZooConfig)
    inversion: InversionConfig = Field(default_factory=InversionConfig)
    grouping: GroupingConfig = Field(default_factory=GroupingConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ag: AGConfig = Field(default_factory=AGConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @model_validator(mode="after")
    def _paths_exist(self) -> "RunConfig":
        paths = {"grouping.probe_path": self.grouping.probe_path}
        if self.dataset.kind == "folder":
            if not self.dataset.root or not self.dataset.split_file:
                raise ValueError("folder datasets need dataset.root and dataset.split_file")
            paths.update({"dataset.root": self.dataset.root, "dataset.split_file": self.dataset.split_file})
        for key, value in paths.items():
            if value is not None and not Path(value).exists():
                raise ValueError(f"{key} = {value!r} does not exist")
        return self


def parse_override(item: str) -> tuple:
    """`section.key=value` -> (["section", "key"], value); value parsed as a TOML scalar when possible."""
    if "=" not in item:
        raise ConfigValidationError(f"override {item!r} is not of the form section.key=value")
    key, raw = item.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigValidationError(f"override {item!r} has an empty key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return path, value


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for item in overrides:
        path, value = parse_override(item)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigValidationError(f"override {item!r} descends into a scalar")
        node[path[-1]] = value
    return raw


def load_raw_config(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigValidationError(f"config file {path} not found")
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigValidationError(f"config file {path} is not valid TOML: {e}") from e
