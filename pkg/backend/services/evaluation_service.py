"""
Evaluation Service
Episodic meta-testing, the random-init finetune baseline, the component ablation,
the accuracy-gain experiment for joint training and the pool-size / group-count sweeps.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from models.data import Episode, EpisodeSpec, ImageDataset
from models.errors import NumericFailureError, RejectedInputError, TGRError
from models.network import ArchSpec
from models.task import GroupAssignment, GroupingStrategy, InversionConfig
from models.training import AGConfig, EvalConfig, EvalReport, TrainConfig
from models.zoo import ModelPool, PretrainedModelRecord
from services import meta_train_service as meta_service
from services import network_service as nn_service
from services.artifact_service import derive_seed
from services.dataset_service import sample_episode, split_classes
from services.grouping_service import group_pool
from services.inversion_service import InversionService
from services.meta_train_service import MetaState
from services.zoo_service import cover_rate, overlap_ratio

logger = logging.getLogger(__name__)

ABLATION_VARIANTS: Dict[str, Tuple[bool, bool]] = {
    # name -> (grouping_on, regularization_on)
    "Vanilla": (False, False),
    "+Group": (True, False),
    "+IGR": (False, True),
    "Group+IGR": (True, True),
}


def adapt_and_eval(meta: MetaState, episode: Episode, inner_lr: float, adapt_steps: int) -> float:
    """Clone theta, run full-batch SGD on the support set, return query top-1 accuracy."""
    params = meta.theta().clone()
    ys = torch.as_tensor(episode.support_labels, dtype=torch.long)
    for step in range(adapt_steps):
        fast = params.detach().requires_grad_(True)
        loss = F.cross_entropy(meta.logits(fast, episode.support_images), ys)
        if not torch.isfinite(loss):
            raise NumericFailureError("non-finite adaptation loss", term=f"adapt step {step}")
        grad = nn_service.flat_grad(loss, fast)
        params = (fast - inner_lr * grad * meta.mask).detach()
    with torch.no_grad():
        logits = meta.logits(params, episode.query_images)
    predictions = logits.argmax(dim=1).numpy()
    return float((predictions == episode.query_labels).mean())


def _workers(config_workers: Optional[int]) -> int:
    return config_workers or int(os.getenv("TGR_WORKERS", "1"))


def evaluate(
    meta: MetaState,
    dataset: ImageDataset,
    split: str,
    spec: EpisodeSpec,
    num_episodes: int,
    seed: int,
    adapt_steps: int = 10,
    inner_lr: float = 1e-2,
    workers: Optional[int] = None,
) -> EvalReport:
    """Seeded episodes on `split`; accuracies are reduced in episode order whatever the worker count."""
    classes = split_classes(dataset, split)
    if not classes:
        raise RejectedInputError(f"split {split!r} has no classes")

    def run(e: int) -> float:
        episode = sample_episode(dataset, classes, spec, derive_seed(seed, "episode", e))
        return adapt_and_eval(meta, episode, inner_lr, adapt_steps)

    n_workers = _workers(workers)
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as executor:
            accuracies = list(executor.map(run, range(num_episodes)))
    else:
        accuracies = [run(e) for e in range(num_episodes)]
    report = EvalReport.from_accuracies(accuracies, spec, seed)
    logger.info(
        f"[EvaluationService] {spec.N}-way {spec.K}-shot on {split}: "
        f"{100 * report.mean_accuracy:.2f} +- {100 * report.ci95:.2f} over {num_episodes} episodes"
    )
    return report


def evaluate_with(meta: MetaState, dataset: ImageDataset, config: EvalConfig, seed: int) -> EvalReport:
    return evaluate(
        meta, dataset, config.split, config.episode, config.num_episodes,
        derive_seed(seed, "eval"), config.adapt_steps, config.inner_lr, config.workers,
    )


def finetune_baseline(
    arch: ArchSpec, dataset: ImageDataset, config: EvalConfig, seed: int
) -> EvalReport:
    """Random-init meta-model adapted on the same episodes as `evaluate_with(..., seed)`."""
    meta = MetaState(arch, seed=derive_seed(seed, "finetune-init"))
    return evaluate_with(meta, dataset, config, seed)


def run_ablation(
    pool: ModelPool,
    groups: GroupAssignment,
    dataset: ImageDataset,
    train_config: TrainConfig,
    eval_config: EvalConfig,
    inversion_config: InversionConfig,
    seed: int,
) -> Dict[str, EvalReport]:
    """
    Train one meta-model per variant from the same root seed (matched task sequences)
    and evaluate each on the same episodes. `Finetune` is the random-init row.
    """
    reports: Dict[str, EvalReport] = {}
    meta = None
    for name, (grouping_on, regularization_on) in ABLATION_VARIANTS.items():
        config = train_config.model_copy(update={"grouping_on": grouping_on, "regularization_on": regularization_on})
        inversion = InversionService(inversion_config, seed=derive_seed(seed, "generator"))
        logger.info(f"[EvaluationService] ablation variant {name}")
        meta, _ = meta_service.train(pool, groups, config, seed, inversion)
        reports[name] = evaluate_with(meta, dataset, eval_config, seed)
    reports["Finetune"] = finetune_baseline(meta.arch, dataset, eval_config, seed)
    return reports


# Accuracy gain of joint training

def _maml_on_teachers(
    records: Sequence[PretrainedModelRecord],
    train_config: TrainConfig,
    ag: AGConfig,
    inversion_config: InversionConfig,
    image_size: int,
    seed: int,
) -> MetaState:
    """MAML on episodes split from each teacher's recovered task; summed outer loss per epoch."""
    meta = MetaState.create(train_config, image_size, seed)
    inversion = InversionService(inversion_config, seed=derive_seed(seed, "generator"))
    for epoch in range(ag.epochs):
        episodes = []
        for i, record in enumerate(records):
            # the stream is keyed by position so the basic teacher sees identical codes in every run
            task = inversion.recover(record, seed=derive_seed(seed, "ag-invert", epoch, i))
            episodes.append(meta_service.task_episode(task, ag.support_per_class, derive_seed(seed, "ag-split", epoch, i)))
        meta_service.maml_step(
            meta, episodes, train_config.inner_lr, train_config.inner_steps, train_config.outer_lr,
            train_config.second_order,
        )
    return meta


def accuracy_gain(
    basic: PretrainedModelRecord,
    aux_pool: ModelPool,
    dataset: ImageDataset,
    config: AGConfig,
    train_config: TrainConfig,
    eval_config: EvalConfig,
    inversion_config: InversionConfig,
    seed: int,
) -> List[Dict[str, object]]:
    """
    AG(aux) = P(theta trained on basic + aux) - P(theta trained on basic alone).
    Every run starts from the same initialization and is evaluated on the same episodes.
    """
    image_size = basic.arch.input_shape[0]
    run_seed = derive_seed(seed, "ag-run")
    base_meta = _maml_on_teachers([basic], train_config, config, inversion_config, image_size, run_seed)
    p_basic = evaluate_with(base_meta, dataset, eval_config, seed).mean_accuracy
    logger.info(f"[EvaluationService] basic {basic.id} alone: {p_basic:.4f}")

    rows = []
    for aux in aux_pool.records:
        try:
            joint = _maml_on_teachers([basic, aux], train_config, config, inversion_config, image_size, run_seed)
            p_joint = evaluate_with(joint, dataset, eval_config, seed).mean_accuracy
        except TGRError as e:
            raise type(e)(f"aux {aux.id}: {e}") from e
        row = {
            "aux_id": aux.id,
            "overlap_ratio": overlap_ratio(basic, aux),
            "arch": f"{aux.arch.kind}/{aux.arch.num_params()}",
            "ag": p_joint - p_basic,
        }
        logger.info(f"[EvaluationService] {aux.id} overlap {row['overlap_ratio']:.2f}: AG {row['ag']:+.4f}")
        rows.append(row)
    return rows


def mean_gain_by_overlap(rows: Sequence[Dict[str, object]]) -> Dict[float, float]:
    buckets: Dict[float, List[float]] = {}
    for row in rows:
        buckets.setdefault(round(float(row["overlap_ratio"]), 6), []).append(float(row["ag"]))
    return {ratio: float(np.mean(v)) for ratio, v in sorted(buckets.items())}


# Sweeps

def sweep_pool_sizes(
    pool: ModelPool,
    w: np.ndarray,
    sizes: Sequence[int],
    c: int,
    dataset: ImageDataset,
    train_config: TrainConfig,
    eval_config: EvalConfig,
    inversion_config: InversionConfig,
    seed: int,
    strategy: GroupingStrategy = "dissimilar",
) -> List[Dict[str, object]]:
    """Accuracy and class cover rate when training on the first n teachers of the pool."""
    rows = []
    for n in sizes:
        n = min(int(n), len(pool.records))
        ids = pool.ids()[:n]
        sub = pool.subset(ids)
        groups = group_pool(w[:n, :n], ids, min(c, n), derive_seed(seed, "group"), strategy)
        inversion = InversionService(inversion_config, seed=derive_seed(seed, "generator"))
        meta, _ = meta_service.train(sub, groups, train_config, seed, inversion)
        report = evaluate_with(meta, dataset, eval_config, seed)
        rows.append({
            "sweep": "pool_size",
            "value": n,
            "mean_accuracy": report.mean_accuracy,
            "ci95": report.ci95,
            "cover_rate": cover_rate(sub, dataset),
        })
    return rows


def sweep_group_counts(
    pool: ModelPool,
    w: np.ndarray,
    counts: Sequence[int],
    dataset: ImageDataset,
    train_config: TrainConfig,
    eval_config: EvalConfig,
    inversion_config: InversionConfig,
    seed: int,
    strategy: GroupingStrategy = "dissimilar",
) -> List[Dict[str, object]]:
    """Accuracy as a function of the number of groups c on the full pool."""
    rows = []
    rate = cover_rate(pool, dataset)
    for c in counts:
        groups = group_pool(w, pool.ids(), int(c), derive_seed(seed, "group"), strategy)
        inversion = InversionService(inversion_config, seed=derive_seed(seed, "generator"))
        meta, _ = meta_service.train(pool, groups, train_config, seed, inversion)
        report = evaluate_with(meta, dataset, eval_config, seed)
        rows.append({
            "sweep": "group_count",
            "value": int(c),
            "mean_accuracy": report.mean_accuracy,
            "ci95": report.ci95,
            "cover_rate": rate,
        })
    return rows
