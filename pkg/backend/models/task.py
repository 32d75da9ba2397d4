"""
Pseudo-task, task-embedding and grouping models
"""

from typing import Dict, List, Literal, Optional, Tuple
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from models.errors import RejectedInputError


class InversionConfig(BaseModel):
    """Task recovery settings"""
    steps: int = 200
    lr: float = 1e-3
    per_class: int = 6
    latent_dim: int = 256
    nf: int = 16
    dump_images: bool = False


class LatentBatch(BaseModel):
    """B x latent_dim codes drawn from a standard normal"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    codes: np.ndarray

    @classmethod
    def sample(cls, batch: int, latent_dim: int, seed: int) -> "LatentBatch":
        rng = np.random.default_rng(seed)
        return cls(codes=rng.standard_normal((batch, latent_dim)).astype(np.float32))


class PseudoTask(BaseModel):
    """Synthetic labeled batch recovered from one teacher"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    images: np.ndarray
    labels: np.ndarray  # teacher-local
    source_id: str
    loss_trace: List[Dict[str, float]] = Field(default_factory=list)

    @property
    def class_keys(self) -> List[Tuple[str, int]]:
        return [(self.source_id, int(y)) for y in self.labels]

    def images_of(self, label: int) -> np.ndarray:
        return self.images[self.labels == label]


class TaskEmbedding(BaseModel):
    """Diagonal FIM of one task under the frozen probe"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    fim_diag: np.ndarray
    task_id: str = ""

    def __init__(self, **data):
        super().__init__(**data)
        self.check()

    def check(self) -> "TaskEmbedding":
        if np.any(self.fim_diag < 0):
            raise RejectedInputError(f"embedding {self.task_id} has negative entries")
        return self


class GroupAssignment(BaseModel):
    """record id -> group index"""
    group_of: Dict[str, int]
    c: int

    def members(self, group: int) -> List[str]:
        return [rid for rid, g in self.group_of.items() if g == group]

    def groups(self) -> List[List[str]]:
        return [self.members(g) for g in range(self.c)]

    def labels(self, ids: List[str]) -> np.ndarray:
        return np.asarray([self.group_of[i] for i in ids], dtype=np.int64)


GroupingStrategy = Literal["dissimilar", "similar", "random"]


class GroupingConfig(BaseModel):
    """Task-embedding and clustering settings"""
    c: int = 3
    strategy: GroupingStrategy = "dissimilar"
    probe_path: Optional[str] = None
    probe_classes: int = 8
    probe_samples: int = 60
    head_iterations: int = 100
    head_lr: float = 0.05
    head_ridge: float = 1e-3
