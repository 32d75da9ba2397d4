"""
Pre-trained model pool models
"""

from typing import Dict, List, Literal, Optional
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from models.errors import RejectedInputError
from models.network import ArchSpec


class PretrainHyper(BaseModel):
    """Supervised pre-training settings"""
    lr: float = 0.01
    epochs: int = 15
    batch: int = 64
    val_fraction: float = 0.2


class PretrainedModelRecord(BaseModel):
    """One frozen teacher"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    id: str
    arch: ArchSpec
    params: np.ndarray  # canonical float32 vector incl. BN running stats
    classes: List[int]
    domain: str
    val_accuracy: float
    seed: int

    def __init__(self, **data):
        super().__init__(**data)
        self.check()

    def check(self) -> "PretrainedModelRecord":
        if len(self.classes) != self.arch.num_outputs:
            raise RejectedInputError(
                f"record {self.id}: {len(self.classes)} classes for a {self.arch.num_outputs}-output arch"
            )
        if not 0.0 <= self.val_accuracy <= 1.0:
            raise RejectedInputError(f"record {self.id}: val_accuracy {self.val_accuracy} outside [0, 1]")
        return self

    @property
    def way(self) -> int:
        return len(self.classes)


class RecordManifest(BaseModel):
    """`manifest.json` next to `weights.bin`"""
    id: str
    arch: ArchSpec
    classes: List[int]
    domain: str
    val_accuracy: float
    seed: int
    num_params: int
    blob_sha256: str


class ModelPool(BaseModel):
    """Collection of pre-trained records"""
    records: List[PretrainedModelRecord] = Field(default_factory=list)

    def __init__(self, **data):
        super().__init__(**data)
        self.check()

    def check(self) -> "ModelPool":
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise RejectedInputError("pool record ids must be unique")
        seeds = [r.seed for r in self.records]
        if len(set(seeds)) != len(seeds):
            raise RejectedInputError("pool record seeds must be distinct")
        return self

    def by_id(self) -> Dict[str, PretrainedModelRecord]:
        return {r.id: r for r in self.records}

    def ids(self) -> List[str]:
        return [r.id for r in self.records]

    def subset(self, ids: List[str]) -> "ModelPool":
        lookup = self.by_id()
        return ModelPool(records=[lookup[i] for i in ids])


ArchPolicy = Literal["uniform", "mixed"]
ClassPolicy = Literal["within_domain", "any"]


class ZooConfig(BaseModel):
    """How the teacher pool is built"""
    n: int = 12
    way: int = 5
    arch_policy: ArchPolicy = "uniform"
    class_policy: ClassPolicy = "within_domain"
    filters: int = 16
    blocks: int = 2
    hyper: PretrainHyper = Field(default_factory=PretrainHyper)
    workers: Optional[int] = None
