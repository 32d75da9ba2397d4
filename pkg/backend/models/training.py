"""
Meta-training and evaluation models
"""

from typing import List, Optional
import numpy as np
from pydantic import BaseModel, Field, field_validator

from models.data import EpisodeSpec
from models.network import ArchSpec


class TrainConfig(BaseModel):
    """Meta-training settings"""
    beta: float = 1e-3
    m: int = 4
    epochs: int = 100
    meta_lr: float = 1e-3
    inner_lr: float = 1e-2
    outer_lr: float = 1e-3
    inner_steps: int = 5
    second_order: bool = True
    bank_capacity: int = 20
    replay: EpisodeSpec = Field(default_factory=lambda: EpisodeSpec(N=5, K=1, U=5))
    regularization_on: bool = True
    grouping_on: bool = True
    igr_wrap_replay: bool = False
    temperature: float = 1.0
    meta_way: int = 5
    filters: int = 16
    blocks: int = 2
    checkpoint_every: int = 25

    @field_validator("beta")
    @classmethod
    def _beta(cls, v: float) -> float:
        if v < 0:
            raise ValueError("beta must be >= 0")
        return v

    @field_validator("m", "bank_capacity", "meta_way")
    @classmethod
    def _positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v


class DiagnosticsRow(BaseModel):
    """One completed epoch"""
    epoch: int
    regularizer: float
    mean_cosine: float
    kd_loss: float
    replay_loss: Optional[float] = None
    group: Optional[int] = None
    record_ids: List[str] = Field(default_factory=list)


class Diagnostics(BaseModel):
    """Per-epoch training traces"""
    rows: List[DiagnosticsRow] = Field(default_factory=list)

    def column(self, name: str) -> List[Optional[float]]:
        return [getattr(r, name) for r in self.rows]


class EvalConfig(BaseModel):
    """Meta-test settings"""
    episode: EpisodeSpec = Field(default_factory=lambda: EpisodeSpec(N=5, K=5, U=15))
    num_episodes: int = 120
    adapt_steps: int = 10
    inner_lr: float = 1e-2
    split: str = "meta-test"
    workers: Optional[int] = None


class EvalReport(BaseModel):
    """Episodic accuracy with a 95% confidence half-width"""
    mean_accuracy: float
    ci95: float
    accuracies: List[float]
    num_episodes: int
    spec: EpisodeSpec
    seed: int

    @classmethod
    def from_accuracies(cls, accuracies: List[float], spec: EpisodeSpec, seed: int) -> "EvalReport":
        """ci95 = 1.96 * std / sqrt(n), population std."""
        acc = np.asarray(accuracies, dtype=np.float64)
        n = len(acc)
        mean = float(acc.mean()) if n else 0.0
        ci95 = float(1.96 * acc.std() / np.sqrt(n)) if n else 0.0
        return cls(
            mean_accuracy=mean,
            ci95=ci95,
            accuracies=[float(a) for a in acc],
            num_episodes=n,
            spec=spec,
            seed=seed,
        )


class AGConfig(BaseModel):
    """Accuracy-gain experiment settings"""
    overlaps: List[float] = Field(default_factory=lambda: [0.0, 0.2, 0.4, 1.0])
    per_bucket: int = 5
    epochs: int = 30
    support_per_class: int = 3


class CheckpointManifest(BaseModel):
    """`manifest.json` of a meta-model checkpoint"""
    arch: ArchSpec
    epoch: int
    num_params: int
    blob_sha256: str
