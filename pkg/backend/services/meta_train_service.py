"""
Meta-Train Service
Group-wise task recovery, knowledge-distillation losses, the implicit gradient
regularization (IGR) update, memory-bank cross-task replay with MAML, and the
per-epoch diagnostics.

IGR evaluates each task gradient at a displaced point
    v_i = beta * (mean_grad - grad_i),   g_IGR = mean_i grad L_i(theta - v_i),
which to first order equals grad L_bar + (beta / 2m) grad sum_i ||grad L_i - grad L_bar||^2.
"""

import hashlib
import logging
from collections import deque
from pathlib import Path
from typing import Callable, Deque, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from models.data import Episode, EpisodeSpec
from models.errors import InsufficientBankError, NumericFailureError, RejectedInputError
from models.network import ArchSpec, conv_classifier_arch
from models.task import GroupAssignment, PseudoTask
from models.training import CheckpointManifest, Diagnostics, DiagnosticsRow, TrainConfig
from models.zoo import ModelPool, PretrainedModelRecord
from services import network_service as nn_service
from services.artifact_service import atomic_write_bytes, derive_seed, read_json, write_csv, write_json
from services.inversion_service import InversionService
from services.zoo_service import teacher_state

logger = logging.getLogger(__name__)

LossFn = Callable[[torch.Tensor], torch.Tensor]


class MetaState:
    """Meta-model parameters, optimizer moments and the completed-epoch counter."""

    def __init__(
        self,
        arch: ArchSpec,
        params=None,
        meta_lr: float = 1e-3,
        outer_lr: float = 1e-3,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        self.arch = arch
        init = nn_service.NetworkState(arch, params, dtype=dtype, seed=seed)
        self.params = init.params.clone().requires_grad_(True)
        self.mask = nn_service.trainable_mask(arch, self.params.dtype)
        self.meta_optimizer = torch.optim.Adam([self.params], lr=meta_lr)
        self.replay_optimizer = torch.optim.Adam([self.params], lr=outer_lr)
        self.epoch = 0
        self.last_replay_loss: Optional[float] = None

    @classmethod
    def create(cls, config: TrainConfig, image_size: int, seed: int) -> "MetaState":
        arch = conv_classifier_arch(image_size, 3, config.meta_way, filters=config.filters, blocks=config.blocks)
        return cls(arch, meta_lr=config.meta_lr, outer_lr=config.outer_lr, seed=derive_seed(seed, "meta-init"))

    def theta(self) -> torch.Tensor:
        return self.params.detach()

    def network(self) -> nn_service.NetworkState:
        """Snapshot as a train-mode network (batch statistics, never the running ones)."""
        return nn_service.NetworkState(self.arch, self.theta().clone(), mode="train", dtype=self.params.dtype)

    def step(self, grad: torch.Tensor, optimizer: torch.optim.Optimizer) -> None:
        """Apply one optimizer step with `grad` restricted to trainable entries."""
        self.params.grad = (grad.detach() * self.mask).to(self.params.dtype)
        optimizer.step()
        self.params.grad = None

    def logits(self, params: torch.Tensor, images) -> torch.Tensor:
        return nn_service.apply(self.arch, params, nn_service.to_tensor(images, params.dtype), "train")


# Knowledge distillation

def kd_loss_from_logits(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    labels: torch.Tensor,
    temperature: float = 1.0,
) -> torch.Tensor:
    """KL(teacher softmax || student softmax) + CE(student, labels), batch means."""
    log_p_student = F.log_softmax(student_logits / temperature, dim=1)
    p_teacher = F.softmax(teacher_logits / temperature, dim=1)
    kl = F.kl_div(log_p_student, p_teacher, reduction="batchmean")
    return kl + F.cross_entropy(student_logits, labels)


def make_kd_loss(record: PretrainedModelRecord, meta: MetaState, task: PseudoTask, temperature: float = 1.0) -> LossFn:
    """L_i(theta) for one recovered task; teacher way w maps to meta outputs [0, w)."""
    way = record.way
    if way > meta.arch.num_outputs:
        raise RejectedInputError(f"teacher {record.id} has {way} classes, meta head only {meta.arch.num_outputs}")
    with torch.no_grad():
        teacher_logits = nn_service.forward_logits(teacher_state(record), task.images)
    if teacher_logits.shape[1] != way:
        raise RejectedInputError(f"teacher {record.id} emits {teacher_logits.shape[1]} logits, expected {way}")
    labels = torch.as_tensor(task.labels, dtype=torch.long)
    images = task.images

    def loss(params: torch.Tensor) -> torch.Tensor:
        student = meta.logits(params, images)[:, :way]
        return kd_loss_from_logits(teacher_logits.to(params.dtype), student, labels, temperature)

    return loss


def kd_loss(record: PretrainedModelRecord, meta: MetaState, task: PseudoTask, temperature: float = 1.0) -> torch.Tensor:
    return make_kd_loss(record, meta, task, temperature)(meta.theta())


# Implicit gradient regularization

class IGRResult(NamedTuple):
    g_igr: torch.Tensor
    grads: torch.Tensor  # m x P, pass-1 task gradients at theta
    mean_grad: torch.Tensor
    losses: List[float]


def _grad_at(loss: LossFn, point: torch.Tensor, term: str) -> Tuple[torch.Tensor, float]:
    p = point.detach().clone().requires_grad_(True)
    value = loss(p)
    if not torch.isfinite(value):
        raise NumericFailureError("non-finite loss", term=term)
    grad = nn_service.flat_grad(value, p)
    if not torch.isfinite(grad).all():
        raise NumericFailureError("non-finite gradient", term=term)
    return grad.detach(), float(value.item())


def igr_update_gradient(params: torch.Tensor, losses: Sequence[LossFn], beta: float) -> IGRResult:
    """
    Pass 1: grad L_i(theta) for every task and their mean.
    Pass 2: grad L_i(theta - v_i) with v_i = beta (mean - grad L_i); g_IGR is their mean.
    theta itself is never written.
    """
    if not losses:
        raise RejectedInputError("IGR needs at least one task loss")
    theta = params.detach()
    first = [_grad_at(loss, theta, f"pass 1, task {i}") for i, loss in enumerate(losses)]
    grads = torch.stack([g for g, _ in first])
    mean_grad = grads.mean(dim=0)
    values = [v for _, v in first]
    if beta == 0:
        return IGRResult(g_igr=mean_grad, grads=grads, mean_grad=mean_grad, losses=values)
    displaced = []
    for i, loss in enumerate(losses):
        v_i = beta * (mean_grad - grads[i])
        g, _ = _grad_at(loss, theta - v_i, f"pass 2, task {i}")
        displaced.append(g)
    g_igr = torch.stack(displaced).mean(dim=0)
    return IGRResult(g_igr=g_igr, grads=grads, mean_grad=mean_grad, losses=values)


def explicit_regularizer(grads: Sequence[torch.Tensor]) -> Tuple[float, float]:
    """(1/2m) sum_i ||g_i - g_bar||^2 and the mean pairwise cosine similarity of the g_i."""
    g = torch.stack([torch.as_tensor(x) for x in grads]).to(torch.float64)
    m = g.shape[0]
    reg = float(((g - g.mean(dim=0)) ** 2).sum() / (2 * m))
    if m < 2:
        return reg, 1.0
    norms = g.norm(dim=1)
    cosines = []
    for i in range(m):
        for j in range(i + 1, m):
            denom = norms[i] * norms[j]
            cosines.append(float(g[i] @ g[j] / denom) if denom > 0 else 0.0)
    return reg, float(np.mean(cosines))


# Memory bank and cross-task replay

class MemoryBank:
    """Bounded FIFO of pseudo-tasks; class keys are (source id, teacher-local label)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise RejectedInputError("bank capacity must be >= 1")
        self.capacity = capacity
        self.tasks: Deque[PseudoTask] = deque()

    def __len__(self) -> int:
        return len(self.tasks)

    def push(self, task: PseudoTask) -> Optional[PseudoTask]:
        """Append; returns the evicted (oldest) task when full."""
        evicted = self.tasks.popleft() if len(self.tasks) == self.capacity else None
        self.tasks.append(task)
        return evicted

    def class_index(self) -> Dict[Tuple[str, int], np.ndarray]:
        """Stored images per class key, concatenated across tasks in push order."""
        index: Dict[Tuple[str, int], List[np.ndarray]] = {}
        for task in self.tasks:
            for label in np.unique(task.labels):
                index.setdefault((task.source_id, int(label)), []).append(task.images_of(label))
        return {key: np.concatenate(parts) for key, parts in sorted(index.items())}


def _episode_from_groups(groups: List[Tuple[object, np.ndarray]], spec: EpisodeSpec, rng) -> Episode:
    support, query, s_lab, q_lab, s_idx, q_idx = [], [], [], [], [], []
    class_map = {}
    for label, (key, images) in enumerate(groups):
        rows = rng.choice(len(images), size=spec.K + spec.U, replace=False)
        support.append(images[rows[:spec.K]])
        query.append(images[rows[spec.K:]])
        s_lab += [label] * spec.K
        q_lab += [label] * spec.U
        s_idx += [(label, int(r)) for r in rows[:spec.K]]
        q_idx += [(label, int(r)) for r in rows[spec.K:]]
        class_map[label] = key
    return Episode(
        support_images=np.concatenate(support),
        support_labels=np.asarray(s_lab, dtype=np.int64),
        query_images=np.concatenate(query),
        query_labels=np.asarray(q_lab, dtype=np.int64),
        class_map=class_map,
        support_index=s_idx,
        query_index=q_idx,
    )


def replay_episode_from_bank(bank: MemoryBank, spec: EpisodeSpec, seed: int) -> Episode:
    """N class keys drawn across every stored task, K support + U query images each."""
    index = bank.class_index()
    eligible = [key for key, images in index.items() if len(images) >= spec.K + spec.U]
    if len(eligible) < spec.N:
        raise InsufficientBankError(
            f"bank holds {len(eligible)} classes with >= {spec.K + spec.U} images, replay needs {spec.N}"
        )
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(eligible), size=spec.N, replace=False)
    return _episode_from_groups([(eligible[i], index[eligible[i]]) for i in picked], spec, rng)


def task_episode(task: PseudoTask, support_per_class: int, seed: int) -> Episode:
    """Split one pseudo-task into support/query per label (all remaining images go to the query)."""
    labels = sorted(int(y) for y in np.unique(task.labels))
    counts = [int((task.labels == y).sum()) for y in labels]
    if min(counts) <= support_per_class:
        raise RejectedInputError(
            f"task {task.source_id} has {min(counts)} images for some class, needs > {support_per_class}"
        )
    spec = EpisodeSpec(N=len(labels), K=support_per_class, U=min(counts) - support_per_class)
    rng = np.random.default_rng(seed)
    return _episode_from_groups([((task.source_id, y), task.images_of(y)) for y in labels], spec, rng)


# MAML

def maml_objective(
    theta: torch.Tensor,
    inner_loss: LossFn,
    outer_loss: LossFn,
    inner_lr: float,
    inner_steps: int,
    second_order: bool,
) -> torch.Tensor:
    """
    Outer loss at theta_c = theta after `inner_steps` gradient steps on the inner loss.
    With second_order off the inner gradients are detached (first-order approximation).
    """
    fast = theta
    for step in range(inner_steps):
        value = inner_loss(fast)
        if not torch.isfinite(value):
            raise NumericFailureError("non-finite inner loss", term=f"inner step {step}")
        grad = nn_service.flat_grad(value, fast, create_graph=second_order)
        if not second_order:
            grad = grad.detach()
        fast = fast - inner_lr * grad
    return outer_loss(fast)


def maml_gradient(
    params: torch.Tensor,
    inner_loss: LossFn,
    outer_loss: LossFn,
    inner_lr: float,
    inner_steps: int,
    second_order: bool,
) -> Tuple[torch.Tensor, float]:
    """d/dtheta of the outer loss through the adaptation (or first-order approximation)."""
    theta = params.detach().clone().requires_grad_(True)
    value = maml_objective(theta, inner_loss, outer_loss, inner_lr, inner_steps, second_order)
    if not torch.isfinite(value):
        raise NumericFailureError("non-finite outer loss", term="outer")
    return nn_service.flat_grad(value, theta).detach(), float(value.item())


def episode_losses(meta: MetaState, episode: Episode) -> Tuple[LossFn, LossFn]:
    if episode.way > meta.arch.num_outputs:
        raise RejectedInputError(f"{episode.way}-way episode on a {meta.arch.num_outputs}-output meta-model")
    ys = torch.as_tensor(episode.support_labels, dtype=torch.long)
    yq = torch.as_tensor(episode.query_labels, dtype=torch.long)

    def inner(params: torch.Tensor) -> torch.Tensor:
        return F.cross_entropy(meta.logits(params, episode.support_images), ys)

    def outer(params: torch.Tensor) -> torch.Tensor:
        return F.cross_entropy(meta.logits(params, episode.query_images), yq)

    return inner, outer


def maml_step(
    meta: MetaState,
    episode,
    inner_lr: float,
    inner_steps: int,
    outer_lr: float,
    second_order: bool,
) -> MetaState:
    """One outer update on one episode, or on the summed outer losses of several."""
    episodes = episode if isinstance(episode, (list, tuple)) else [episode]
    total = torch.zeros_like(meta.theta())
    value = 0.0
    for ep in episodes:
        inner, outer = episode_losses(meta, ep)
        grad, loss = maml_gradient(meta.params, inner, outer, inner_lr, inner_steps, second_order)
        total += grad
        value += loss
    for group in meta.replay_optimizer.param_groups:
        group["lr"] = outer_lr
    meta.step(total, meta.replay_optimizer)
    meta.last_replay_loss = value
    return meta


def igr_replay_step(meta: MetaState, episodes: Sequence[Episode], config: TrainConfig) -> MetaState:
    """Replay update with the MAML objectives of several bank episodes passed through IGR."""
    objectives = []
    for ep in episodes:
        inner, outer = episode_losses(meta, ep)
        objectives.append(
            lambda p, inner=inner, outer=outer: maml_objective(
                p, inner, outer, config.inner_lr, config.inner_steps, True
            )
        )
    result = igr_update_gradient(meta.params, objectives, config.beta)
    for group in meta.replay_optimizer.param_groups:
        group["lr"] = config.outer_lr
    meta.step(result.g_igr, meta.replay_optimizer)
    meta.last_replay_loss = float(np.sum(result.losses))
    return meta


# Checkpoints

def save_checkpoint(meta: MetaState, folder: Path) -> Path:
    folder = Path(folder)
    blob = nn_service.to_blob(meta.theta())
    atomic_write_bytes(folder / "weights.bin", blob)
    manifest = CheckpointManifest(
        arch=meta.arch,
        epoch=meta.epoch,
        num_params=meta.theta().numel(),
        blob_sha256=hashlib.sha256(blob).hexdigest(),
    )
    write_json(folder / "manifest.json", manifest.model_dump(mode="json"))
    return folder


def load_checkpoint(folder: Path, config: Optional[TrainConfig] = None) -> MetaState:
    folder = Path(folder)
    manifest = CheckpointManifest.model_validate(read_json(folder / "manifest.json"))
    manifest.arch.check()
    blob = (folder / "weights.bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest.blob_sha256:
        raise RejectedInputError(f"checksum mismatch for checkpoint {folder}")
    config = config or TrainConfig()
    meta = MetaState(manifest.arch, nn_service.from_blob(blob), meta_lr=config.meta_lr, outer_lr=config.outer_lr)
    meta.epoch = manifest.epoch
    return meta


def write_diagnostics(path: Path, diagnostics: Diagnostics) -> Path:
    rows = [
        (r.epoch, f"{r.regularizer:.10g}", f"{r.mean_cosine:.10g}", f"{r.kd_loss:.10g}",
         "" if r.replay_loss is None else f"{r.replay_loss:.10g}")
        for r in diagnostics.rows
    ]
    return write_csv(path, ["epoch", "regularizer", "mean_cosine", "kd_loss", "replay_loss"], rows)


# Algorithm loop

def _sample_records(
    pool: ModelPool, groups: Optional[GroupAssignment], config: TrainConfig, rng: np.random.Generator
) -> Tuple[Optional[int], List[str]]:
    if config.grouping_on and groups is not None:
        nonempty = [g for g in range(groups.c) if groups.members(g)]
        group = nonempty[rng.integers(len(nonempty))]
        candidates = sorted(groups.members(group))
    else:
        group, candidates = None, pool.ids()
    replace = len(candidates) < config.m
    chosen = rng.choice(len(candidates), size=config.m, replace=replace)
    return group, [candidates[i] for i in chosen]


def _check_consistent(pool: ModelPool, groups: Optional[GroupAssignment]) -> None:
    if groups is None:
        return
    if set(groups.group_of) != set(pool.ids()):
        raise RejectedInputError("group assignment does not cover exactly the pool ids")


def train(
    pool: ModelPool,
    groups: Optional[GroupAssignment],
    config: TrainConfig,
    seed: int,
    inversion: Optional[InversionService] = None,
    checkpoint_dir: Optional[Path] = None,
    meta: Optional[MetaState] = None,
) -> Tuple[MetaState, Diagnostics]:
    """
    Per epoch: sample a group uniformly, sample m teachers from it, recover their tasks,
    update theta with g_IGR (or the plain mean gradient when regularization is off),
    push the tasks into the bank and run one replay MAML step.
    """
    if not pool.records:
        raise RejectedInputError("cannot train on an empty pool")
    _check_consistent(pool, groups)
    records = pool.by_id()
    image_size = pool.records[0].arch.input_shape[0]
    meta = meta or MetaState.create(config, image_size, seed)
    inversion = inversion or InversionService(seed=derive_seed(seed, "generator"))
    bank = MemoryBank(config.bank_capacity)
    diagnostics = Diagnostics()
    beta = config.beta if config.regularization_on else 0.0
    mode = "IGR" if config.regularization_on else "ERM"

    progress = tqdm(range(config.epochs), desc=f"meta-train ({mode})", disable=not logger.isEnabledFor(logging.INFO))
    for epoch in progress:
        rng = np.random.default_rng(derive_seed(seed, "train-sample", epoch))
        group, chosen = _sample_records(pool, groups, config, rng)
        tasks = [
            inversion.recover(records[rid], seed=derive_seed(seed, "train-invert", epoch, i), epoch=epoch)
            for i, rid in enumerate(chosen)
        ]
        losses = [make_kd_loss(records[rid], meta, task, config.temperature) for rid, task in zip(chosen, tasks)]
        result = igr_update_gradient(meta.params, losses, beta)
        regularizer, mean_cosine = explicit_regularizer(result.grads)
        meta.step(result.g_igr, meta.meta_optimizer)

        for task in tasks:
            bank.push(task)
        replay_loss = None
        try:
            episode_seed = derive_seed(seed, "replay", epoch)
            if config.igr_wrap_replay:
                episodes = [
                    replay_episode_from_bank(bank, config.replay, derive_seed(episode_seed, "wrap", k))
                    for k in range(config.m)
                ]
                igr_replay_step(meta, episodes, config)
            else:
                episode = replay_episode_from_bank(bank, config.replay, episode_seed)
                maml_step(meta, episode, config.inner_lr, config.inner_steps, config.outer_lr, config.second_order)
            replay_loss = meta.last_replay_loss
        except InsufficientBankError as e:
            logger.warning(f"[MetaTrainService] epoch {epoch}: replay skipped ({e})")

        meta.epoch += 1
        row = DiagnosticsRow(
            epoch=epoch,
            regularizer=regularizer,
            mean_cosine=mean_cosine,
            kd_loss=float(np.mean(result.losses)),
            replay_loss=replay_loss,
            group=group,
            record_ids=chosen,
        )
        diagnostics.rows.append(row)
        progress.set_postfix(kd=f"{row.kd_loss:.3f}", reg=f"{regularizer:.3e}", cos=f"{mean_cosine:.3f}")
        logger.debug(f"[MetaTrainService] epoch {epoch} group {group} ids {chosen} reg {regularizer:.4e}")

        if checkpoint_dir is not None and config.checkpoint_every and meta.epoch % config.checkpoint_every == 0:
            save_checkpoint(meta, Path(checkpoint_dir) / f"epoch_{meta.epoch:05d}")

    return meta, diagnostics
