"""
Embedding Service
Embeds pseudo-tasks into task space with the diagonal of the Fisher information
of a shared frozen probe. A small softmax head is fitted on the frozen features
for each task so log P(y|x) is defined for the task's own labels; the head is
excluded from the embedding.
"""

import logging
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from models.data import SyntheticConfig
from models.errors import NumericFailureError, RejectedInputError
from models.network import backbone_arch, conv_classifier_arch
from models.task import GroupingConfig, PseudoTask, TaskEmbedding
from models.zoo import PretrainHyper, PretrainedModelRecord
from services import network_service as nn_service
from services.artifact_service import derive_seed
from services.dataset_service import make_synthetic_domains, split_classes
from services.zoo_service import ModelStore, pretrain_model

logger = logging.getLogger(__name__)

PROBE_ID = "probe"


class ProbeSpec:
    """Frozen feature extractor (backbone ending in flatten)"""

    def __init__(self, net: nn_service.NetworkState):
        if net.arch.kind != "probe":
            raise RejectedInputError(f"probe arch must be of kind 'probe', got {net.arch.kind!r}")
        self.net = net.with_mode("eval")

    @property
    def head_dim(self) -> int:
        return self.net.arch.num_outputs

    def astype(self, dtype: torch.dtype) -> "ProbeSpec":
        return ProbeSpec(self.net.astype(dtype))

    def features(self, images: np.ndarray) -> torch.Tensor:
        return nn_service.forward(self.net, images)

    def backbone_index(self) -> np.ndarray:
        """Positions of the trainable backbone parameters in the canonical vector."""
        return np.concatenate([
            np.arange(slot.offset, slot.offset + slot.size)
            for slot in self.net.layout if slot.trainable
        ])


def probe_from_record(record: PretrainedModelRecord) -> ProbeSpec:
    """Drop the classifier head of a pre-trained record; canonical order makes the backbone a prefix."""
    arch = backbone_arch(record.arch)
    return ProbeSpec(nn_service.NetworkState(arch, record.params[:arch.num_params()], mode="eval"))


def build_probe(image_size: int, config: GroupingConfig, seed: int, first_domain: int = 3) -> PretrainedModelRecord:
    """Pre-train a desk classifier on a held-out synthetic domain (its own frequency band and seed)."""
    held_out = make_synthetic_domains(
        SyntheticConfig(
            num_domains=1,
            classes_per_domain=config.probe_classes,
            samples_per_class=config.probe_samples,
            image_size=image_size,
            train_fraction=1.0,
            val_fraction=0.0,
            first_domain=first_domain,
        ),
        seed=derive_seed(seed, "probe-data"),
    )
    classes = split_classes(held_out, "meta-train")
    arch = conv_classifier_arch(image_size, 3, len(classes))
    record = pretrain_model(held_out, classes, arch, PretrainHyper(), derive_seed(seed, "probe-train"), record_id=PROBE_ID)
    logger.info(f"[EmbeddingService] probe pre-trained on held-out domain: val acc {record.val_accuracy:.3f}")
    return record


def fit_head(probe: ProbeSpec, images: np.ndarray, labels: np.ndarray, config: GroupingConfig) -> torch.Tensor:
    """Ridge-regularized softmax regression on frozen features; returns [W (way x D) row-major, b]."""
    labels = np.asarray(labels, dtype=np.int64)
    way = int(labels.max()) + 1
    with torch.no_grad():
        feats = probe.features(images)
    dtype = feats.dtype
    weight = torch.zeros((way, probe.head_dim), dtype=dtype, requires_grad=True)
    bias = torch.zeros(way, dtype=dtype, requires_grad=True)
    y = torch.as_tensor(labels)
    optimizer = torch.optim.Adam([weight, bias], lr=config.head_lr)
    for _ in range(config.head_iterations):
        loss = F.cross_entropy(F.linear(feats, weight, bias), y) + config.head_ridge * (weight ** 2).sum()
        if not torch.isfinite(loss):
            raise NumericFailureError("non-finite head fit", term="head")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return torch.cat([weight.detach().reshape(-1), bias.detach()])


def probe_with_head(probe: ProbeSpec, head: torch.Tensor, way: int) -> nn_service.NetworkState:
    """Backbone + fitted head as one eval-mode classifier."""
    arch = nn_service.compose(probe.net.arch, way)
    params = torch.cat([probe.net.params, head.to(probe.net.dtype)])
    return nn_service.NetworkState(arch, params, mode="eval", dtype=probe.net.dtype)


def fim_diagonal(probe: ProbeSpec, task: PseudoTask, config: Optional[GroupingConfig] = None) -> TaskEmbedding:
    """entry k = mean_j (d log P(y_j|x_j) / d phi_k)^2 over the trainable backbone parameters."""
    config = config or GroupingConfig()
    if len(task.labels) == 0:
        raise RejectedInputError(f"task {task.source_id} is empty")
    head = fit_head(probe, task.images, task.labels, config)
    way = int(np.max(task.labels)) + 1
    net = probe_with_head(probe, head, way)
    grads = nn_service.per_sample_loglik_grads(net, task.images, task.labels)
    index = torch.as_tensor(probe.backbone_index())
    fim = (grads[:, index].to(torch.float64) ** 2).mean(dim=0)
    return TaskEmbedding(fim_diag=fim.numpy(), task_id=task.source_id)


class EmbeddingService:
    """Service for task embeddings under a shared frozen probe."""

    def __init__(self, probe: ProbeSpec, config: Optional[GroupingConfig] = None):
        self.probe = probe
        self.config = config or GroupingConfig()

    @classmethod
    def from_store(cls, path: Path, config: Optional[GroupingConfig] = None) -> "EmbeddingService":
        """Load the probe record saved under `path` (a model-store root holding `probe/`)."""
        record = ModelStore(path).load_record(PROBE_ID)
        return cls(probe_from_record(record), config)

    def get_embedding(self, task: PseudoTask) -> TaskEmbedding:
        return fim_diagonal(self.probe, task, self.config)

    def get_embeddings_batch(self, tasks: List[PseudoTask]) -> List[TaskEmbedding]:
        """Embeddings are independent per task."""
        if not tasks:
            return []
        embeddings = []
        for task in tasks:
            embedding = self.get_embedding(task)
            logger.info(
                f"[EmbeddingService] {task.source_id}: FIM mass {embedding.fim_diag.sum():.4e}"
            )
            embeddings.append(embedding)
        return embeddings
