"""
Inversion Service
Recovers pseudo-tasks from a frozen teacher: a generator G(z) and the latent codes z
are optimized jointly against cross-entropy on pre-defined labels plus
BN feature-statistic matching.
"""

import logging
import os
from pathlib import Path
from typing import Dict, NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F

from models.errors import NumericFailureError, RejectedInputError
from models.network import generator_arch
from models.task import InversionConfig, LatentBatch, PseudoTask
from models.zoo import PretrainedModelRecord
from services import network_service as nn_service
from services.artifact_service import write_npz
from services.zoo_service import teacher_state

logger = logging.getLogger(__name__)


class InversionLoss(NamedTuple):
    l_ce: torch.Tensor
    l_bn: torch.Tensor
    total: torch.Tensor


class GeneratorState:
    """Generator network shared across teachers and warm-started between recoveries."""

    def __init__(self, image_size: int, channels: int = 3, latent_dim: int = 256, nf: int = 16, seed: int = 0):
        self.latent_dim = latent_dim
        self.net = nn_service.NetworkState(
            generator_arch(latent_dim, image_size, channels, nf=nf), mode="train", seed=seed
        )

    @property
    def output_shape(self):
        c, h, w = self.net.arch.output_shape()
        return (h, w, c)


def round_robin_labels(way: int, per_class: int) -> np.ndarray:
    """0, 1, ..., way-1, 0, 1, ... so per-label counts differ by at most one."""
    return np.arange(way * per_class, dtype=np.int64) % way


def inversion_loss_from_images(
    teacher: nn_service.NetworkState,
    images: torch.Tensor,
    labels: torch.Tensor,
) -> InversionLoss:
    """
    l_ce = CE(teacher(images), labels) with eval-mode normalization;
    l_bn = sum over BN layers of ||mu - running_mean||^2 + ||var - running_var||^2,
    batch statistics (biased variance) taken at the inputs of each BN layer.
    """
    stats: nn_service.BatchStats = {}
    logits = nn_service.apply(teacher.arch, teacher.params, images, "eval", batch_stats=stats, layout=teacher.layout)
    l_ce = F.cross_entropy(logits, labels)
    views = nn_service.slot_views(teacher.arch, teacher.params, teacher.layout)
    l_bn = torch.zeros((), dtype=logits.dtype)
    for layer, (mean, var) in stats.items():
        rm = views[layer]["running_mean"]
        rv = views[layer]["running_var"]
        l_bn = l_bn + torch.sum((mean - rm) ** 2) + torch.sum((var - rv) ** 2)
    total = l_ce + l_bn
    for name, value in (("l_ce", l_ce), ("l_bn", l_bn)):
        if not torch.isfinite(value):
            raise NumericFailureError("non-finite inversion loss", term=name)
    return InversionLoss(l_ce=l_ce, l_bn=l_bn, total=total)


def inversion_loss(
    teacher: nn_service.NetworkState,
    generator: GeneratorState,
    z: LatentBatch,
    y: np.ndarray,
) -> InversionLoss:
    """Loss of the current generator on codes z with target labels y."""
    codes = torch.as_tensor(z.codes, dtype=generator.net.dtype)
    images = nn_service.apply(generator.net.arch, generator.net.params, codes, "train", layout=generator.net.layout)
    return inversion_loss_from_images(teacher, images.to(teacher.dtype), torch.as_tensor(y, dtype=torch.long))


class InversionService:
    """Recovers pseudo-tasks, keeping one warm generator per image shape."""

    def __init__(self, config: Optional[InversionConfig] = None, seed: int = 0, dump_dir: Optional[Path] = None):
        self.config = config or InversionConfig()
        self.seed = seed
        self.generators: Dict[tuple, GeneratorState] = {}
        dump = dump_dir or os.getenv("TGR_INVERSION_DUMP_DIR")
        self.dump_dir = Path(dump) if dump and self.config.dump_images else None

    def generator_for(self, record: PretrainedModelRecord) -> GeneratorState:
        h, w, c = record.arch.input_shape
        key = (h, w, c)
        if key not in self.generators:
            self.generators[key] = GeneratorState(
                h, c, latent_dim=self.config.latent_dim, nf=self.config.nf, seed=self.seed
            )
        return self.generators[key]

    def recover(self, record: PretrainedModelRecord, seed: int, epoch: Optional[int] = None) -> PseudoTask:
        task = recover_task(
            record,
            per_class=self.config.per_class,
            steps=self.config.steps,
            lr=self.config.lr,
            generator=self.generator_for(record),
            seed=seed,
        )
        if self.dump_dir is not None and epoch is not None:
            from services.plot_service import save_image_grid

            save_image_grid(task.images, self.dump_dir / f"inv_{epoch}_{record.id}.png")
        return task


def recover_task(
    teacher: PretrainedModelRecord,
    per_class: int,
    steps: int,
    lr: float,
    generator: GeneratorState,
    seed: int,
) -> PseudoTask:
    """
    Sample fresh codes, optimize (generator params, codes) with Adam for `steps` steps,
    return the final images detached. The generator keeps its optimized parameters.
    """
    if per_class < 1:
        raise RejectedInputError(f"per_class must be >= 1, got {per_class}")
    if generator.output_shape != tuple(teacher.arch.input_shape):
        raise RejectedInputError(
            f"generator emits {generator.output_shape}, teacher expects {tuple(teacher.arch.input_shape)}"
        )
    net = teacher_state(teacher)
    labels_np = round_robin_labels(teacher.way, per_class)
    labels = torch.as_tensor(labels_np)
    z = LatentBatch.sample(len(labels_np), generator.latent_dim, seed)

    gen_arch = generator.net.arch
    gen_params = generator.net.params.detach().clone().requires_grad_(True)
    codes = torch.as_tensor(z.codes).clone().requires_grad_(True)
    mask = nn_service.trainable_mask(gen_arch, gen_params.dtype)
    optimizer = torch.optim.Adam([gen_params, codes], lr=lr)

    trace = []
    for step in range(steps):
        images = nn_service.apply(gen_arch, gen_params, codes, "train", layout=generator.net.layout)
        try:
            loss = inversion_loss_from_images(net, images, labels)
        except NumericFailureError as e:
            raise NumericFailureError(f"inversion of {teacher.id} diverged", term=f"step {step}: {e.term}") from e
        trace.append({"step": step, "l_ce": loss.l_ce.item(), "l_bn": loss.l_bn.item(), "total": loss.total.item()})
        optimizer.zero_grad()
        loss.total.backward()
        gen_params.grad.mul_(mask)
        optimizer.step()

    with torch.no_grad():
        images = nn_service.apply(gen_arch, gen_params, codes, "train", layout=generator.net.layout)
        final = inversion_loss_from_images(net, images, labels)
    trace.append({"step": steps, "l_ce": final.l_ce.item(), "l_bn": final.l_bn.item(), "total": final.total.item()})
    nn_service.set_params(generator.net, gen_params.detach())
    logger.debug(
        f"[InversionService] {teacher.id}: l_ce {trace[0]['l_ce']:.4f} -> {trace[-1]['l_ce']:.4f}, "
        f"l_bn {trace[0]['l_bn']:.4f} -> {trace[-1]['l_bn']:.4f}"
    )
    return PseudoTask(
        images=images.detach().cpu().numpy().astype(np.float32),
        labels=labels_np,
        source_id=teacher.id,
        loss_trace=trace,
    )


def save_task(path: Path, task: PseudoTask) -> Path:
    """`<id>.npz` with images, labels and the per-step loss trace as columns."""
    trace = np.asarray([[row["step"], row["l_ce"], row["l_bn"], row["total"]] for row in task.loss_trace])
    return write_npz(
        path,
        images=task.images,
        labels=task.labels,
        source_id=np.asarray(task.source_id),
        trace=trace.reshape(-1, 4),
    )


def load_task(path: Path) -> PseudoTask:
    with np.load(path) as data:
        trace = [
            {"step": int(s), "l_ce": float(ce), "l_bn": float(bn), "total": float(t)}
            for s, ce, bn, t in data["trace"]
        ]
        return PseudoTask(
            images=data["images"],
            labels=data["labels"],
            source_id=str(data["source_id"]),
            loss_trace=trace,
        )
