"""
Dataset and episode models
"""

from typing import Dict, List, Tuple, Union
import numpy as np
from pydantic import BaseModel, ConfigDict, Field


ClassKey = Union[int, Tuple[str, int]]


class SyntheticConfig(BaseModel):
    """Synthetic multi-domain benchmark settings"""
    num_domains: int = 3
    classes_per_domain: int = 12
    samples_per_class: int = 120
    image_size: int = 32
    noise_sigma: float = 0.05
    channel_shift: float = 0.12
    max_translation: int = 2
    # per-domain split fractions (meta-train, meta-val); meta-test takes the rest
    train_fraction: float = 0.5
    val_fraction: float = 0.25
    # index of the first frequency band; held-out probe domains start after the benchmark's bands
    first_domain: int = 0


class EpisodeSpec(BaseModel):
    """N-way K-shot with U query samples per class"""
    N: int = 5
    K: int = 5
    U: int = 15


class ImageDataset(BaseModel):
    """Images (H x W x C in [0,1]) with global labels, domains and class splits"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    images: np.ndarray
    labels: np.ndarray
    domain_of_class: Dict[int, str]
    splits: Dict[str, List[int]]
    class_names: Dict[int, str] = Field(default_factory=dict)
    # prototype offsets per domain and channel (before noise/clipping), kept for inspection
    domain_offsets: Dict[str, List[float]] = Field(default_factory=dict)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def indices_of(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cls)

    def split_of(self, cls: int) -> str:
        for name, members in self.splits.items():
            if cls in members:
                return name
        raise KeyError(cls)


class Episode(BaseModel):
    """Support/query sets with labels remapped to 0..N-1"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    class_map: Dict[int, ClassKey]
    # underlying sample indices (dataset rows, or per-key image rows for replay episodes)
    support_index: List[Tuple[int, int]] = Field(default_factory=list)
    query_index: List[Tuple[int, int]] = Field(default_factory=list)

    @property
    def way(self) -> int:
        return len(self.class_map)
