"""
Zoo Service
Pre-trains teachers, assembles the model pool and persists it.
Store layout: `<root>/<record id>/manifest.json` + `weights.bin` (canonical blob).
"""

import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from models.data import ImageDataset
from models.errors import NumericFailureError, RejectedInputError, TGRError
from models.network import ArchSpec, conv_classifier_arch
from models.zoo import ModelPool, PretrainedModelRecord, PretrainHyper, RecordManifest, ZooConfig
from services import network_service as nn_service
from services.artifact_service import atomic_write_bytes, derive_seed, read_json, write_json
from services.dataset_service import split_classes

logger = logging.getLogger(__name__)

MIXED_ARCHS: Tuple[Tuple[int, int], ...] = ((16, 2), (8, 2), (32, 2), (16, 3))


def _train_val_rows(dataset: ImageDataset, classes: Sequence[int], val_fraction: float, rng):
    train_rows, val_rows = [], []
    for cls in classes:
        rows = rng.permutation(dataset.indices_of(cls))
        n_val = max(1, int(round(len(rows) * val_fraction)))
        val_rows.extend(rows[:n_val])
        train_rows.extend(rows[n_val:])
    return np.asarray(train_rows), np.asarray(val_rows)


def fit_classifier(
    state: nn_service.NetworkState,
    images: np.ndarray,
    labels: np.ndarray,
    hyper: PretrainHyper,
    seed: int,
) -> nn_service.NetworkState:
    """Minibatch Adam on cross-entropy; BN running stats tracked with the standard momentum."""
    rng = np.random.default_rng(seed)
    arch = state.arch
    params = state.params.detach().clone().requires_grad_(True)
    mask = nn_service.trainable_mask(arch, params.dtype)
    optimizer = torch.optim.Adam([params], lr=hyper.lr)
    x_all = nn_service.to_tensor(images, params.dtype)
    y_all = torch.as_tensor(labels, dtype=torch.long)
    n = len(labels)
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch):
            rows = torch.as_tensor(order[start:start + hyper.batch])
            if len(rows) < 2:
                continue
            stats: nn_service.BatchStats = {}
            logits = nn_service.apply(arch, params, x_all[rows], "train", batch_stats=stats)
            loss = F.cross_entropy(logits, y_all[rows])
            if not torch.isfinite(loss):
                raise NumericFailureError("non-finite pre-training loss", term=f"epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            params.grad.mul_(mask)
            optimizer.step()
            nn_service.update_running_stats(arch, params, stats)
    return nn_service.set_params(state, params.detach())


def accuracy(state: nn_service.NetworkState, images: np.ndarray, labels: np.ndarray) -> float:
    logits = nn_service.forward_logits(state.with_mode("eval"), images)
    return float((logits.argmax(dim=1).numpy() == np.asarray(labels)).mean())


def pretrain_model(
    dataset: ImageDataset,
    classes: Sequence[int],
    arch: ArchSpec,
    hyper: PretrainHyper,
    seed: int,
    record_id: Optional[str] = None,
    allowed_split: str = "meta-train",
) -> PretrainedModelRecord:
    """Supervised pre-training on `classes` (local labels follow the given order)."""
    classes = [int(c) for c in classes]
    allowed = set(split_classes(dataset, allowed_split))
    outside = [c for c in classes if c not in allowed]
    if outside:
        raise RejectedInputError(f"classes {outside} are not in the {allowed_split} split")
    if len(classes) != arch.num_outputs:
        raise RejectedInputError(f"{len(classes)} classes for a {arch.num_outputs}-output arch")

    rng = np.random.default_rng(seed)
    train_rows, val_rows = _train_val_rows(dataset, classes, hyper.val_fraction, rng)
    local = {c: i for i, c in enumerate(classes)}
    to_local = np.vectorize(local.__getitem__)
    state = nn_service.NetworkState(arch, mode="train", seed=derive_seed(seed, "init"))
    fit_classifier(
        state,
        dataset.images[train_rows],
        to_local(dataset.labels[train_rows]),
        hyper,
        seed=derive_seed(seed, "shuffle"),
    )
    val_acc = accuracy(state, dataset.images[val_rows], to_local(dataset.labels[val_rows]))
    domains = sorted({dataset.domain_of_class[c] for c in classes})
    record = PretrainedModelRecord(
        id=record_id or f"m-{seed % 10**8:08d}",
        arch=arch,
        params=nn_service.get_params(state).astype(np.float32),
        classes=classes,
        domain=domains[0] if len(domains) == 1 else "+".join(domains),
        val_accuracy=val_acc,
        seed=seed,
    )
    logger.info(f"[ZooService] pre-trained {record.id} on {classes} ({record.domain}): val acc {val_acc:.3f}")
    return record


def teacher_state(record: PretrainedModelRecord, dtype: torch.dtype = torch.float32) -> nn_service.NetworkState:
    """Frozen teacher network in eval mode."""
    return nn_service.NetworkState(record.arch, record.params, mode="eval", dtype=dtype)


def _arch_for(config: ZooConfig, index: int, image_size: int) -> ArchSpec:
    filters, blocks = config.filters, config.blocks
    if config.arch_policy == "mixed":
        filters, blocks = MIXED_ARCHS[index % len(MIXED_ARCHS)]
    return conv_classifier_arch(image_size, 3, config.way, filters=filters, blocks=blocks)


def _sample_classes(dataset: ImageDataset, config: ZooConfig, rng: np.random.Generator) -> List[int]:
    pool = split_classes(dataset, "meta-train")
    if config.class_policy == "within_domain":
        domains = sorted({dataset.domain_of_class[c] for c in pool})
        eligible = [d for d in domains if len(split_classes(dataset, "meta-train", d)) >= config.way]
        if eligible:
            domain = eligible[rng.integers(len(eligible))]
            pool = split_classes(dataset, "meta-train", domain)
    if len(pool) < config.way:
        raise RejectedInputError(f"{config.way}-way teachers need {config.way} meta-train classes, have {len(pool)}")
    return sorted(int(c) for c in rng.choice(pool, size=config.way, replace=False))


def build_pool(dataset: ImageDataset, config: ZooConfig, seed: int) -> ModelPool:
    """`config.n` teachers on independently sampled meta-train class subsets."""
    if config.n < 1:
        raise RejectedInputError("pool size n must be >= 1")
    image_size = dataset.image_shape[0]
    jobs = []
    for i in range(config.n):
        rng = np.random.default_rng(derive_seed(seed, "zoo-classes", i))
        classes = _sample_classes(dataset, config, rng)
        jobs.append((f"m{i:03d}", classes, _arch_for(config, i, image_size), derive_seed(seed, "zoo-record", i)))

    def run(job):
        record_id, classes, arch, record_seed = job
        try:
            return pretrain_model(dataset, classes, arch, config.hyper, record_seed, record_id=record_id)
        except TGRError as e:
            raise type(e)(f"record {record_id}: {e}") from e

    workers = config.workers or int(os.getenv("TGR_WORKERS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            records = list(executor.map(run, jobs))
    else:
        records = [run(job) for job in jobs]
    return ModelPool(records=records)


def build_overlap_pool(
    dataset: ImageDataset,
    basic: PretrainedModelRecord,
    overlaps: Sequence[float],
    per_bucket: int,
    hyper: PretrainHyper,
    seed: int,
    arch: Optional[ArchSpec] = None,
) -> ModelPool:
    """Auxiliary teachers sharing round(ratio * way) classes with `basic` for each requested ratio."""
    train = split_classes(dataset, "meta-train")
    others = [c for c in train if c not in basic.classes]
    way = basic.way
    records = []
    for b, ratio in enumerate(overlaps):
        shared_n = int(round(ratio * way))
        if way - shared_n > len(others):
            raise RejectedInputError(f"not enough non-basic classes for overlap {ratio}")
        for k in range(per_bucket):
            rng = np.random.default_rng(derive_seed(seed, "aux-classes", b, k))
            shared = list(rng.choice(basic.classes, size=shared_n, replace=False)) if shared_n else []
            fresh = list(rng.choice(others, size=way - shared_n, replace=False)) if way > shared_n else []
            classes = sorted(int(c) for c in shared + fresh)
            records.append(
                pretrain_model(
                    dataset, classes, arch or basic.arch, hyper,
                    derive_seed(seed, "aux-record", b, k),
                    record_id=f"aux{int(round(ratio * 100)):03d}-{k:02d}",
                )
            )
    return ModelPool(records=records)


def overlap_ratio(basic: PretrainedModelRecord, aux: PretrainedModelRecord) -> float:
    return len(set(basic.classes) & set(aux.classes)) / float(basic.way)


def cover_rate(pool: ModelPool, dataset: ImageDataset) -> float:
    """|union of record classes| / |meta-train classes|"""
    if not pool.records:
        raise RejectedInputError("cover_rate needs a nonempty pool")
    train = set(split_classes(dataset, "meta-train"))
    covered = set()
    for record in pool.records:
        covered.update(record.classes)
    return len(covered & train) / float(len(train))


class ModelStore:
    """Directory-backed store for records (one directory per record id)"""

    def __init__(self, root: os.PathLike):
        self.root = Path(root)

    # Record operations
    def save_record(self, record: PretrainedModelRecord) -> Path:
        """Write weights first, then the checksum-guarded manifest"""
        blob = nn_service.to_blob(record.params)
        folder = self.root / record.id
        atomic_write_bytes(folder / "weights.bin", blob)
        manifest = RecordManifest(
            id=record.id,
            arch=record.arch,
            classes=record.classes,
            domain=record.domain,
            val_accuracy=record.val_accuracy,
            seed=record.seed,
            num_params=int(record.params.size),
            blob_sha256=hashlib.sha256(blob).hexdigest(),
        )
        write_json(folder / "manifest.json", manifest.model_dump(mode="json"))
        return folder

    def load_record(self, record_id: str) -> PretrainedModelRecord:
        """Read and verify one record"""
        folder = self.root / record_id
        if not (folder / "manifest.json").exists():
            raise RejectedInputError(f"no manifest for record {record_id} under {self.root}")
        manifest = RecordManifest.model_validate(read_json(folder / "manifest.json"))
        manifest.arch.check()
        blob = (folder / "weights.bin").read_bytes()
        if hashlib.sha256(blob).hexdigest() != manifest.blob_sha256:
            raise RejectedInputError(f"checksum mismatch for record {record_id}")
        params = nn_service.from_blob(blob)
        if params.size != manifest.num_params:
            raise RejectedInputError(f"record {record_id}: blob holds {params.size} values, expected {manifest.num_params}")
        return PretrainedModelRecord(
            id=manifest.id,
            arch=manifest.arch,
            params=params,
            classes=manifest.classes,
            domain=manifest.domain,
            val_accuracy=manifest.val_accuracy,
            seed=manifest.seed,
        )

    def list_ids(self) -> List[str]:
        if not self.root.is_dir():
            return []
        return sorted(p.name for p in self.root.iterdir() if (p / "manifest.json").exists())

    # Pool operations
    def save_pool(self, pool: ModelPool) -> None:
        for record in pool.records:
            self.save_record(record)

    def load_pool(self) -> ModelPool:
        return ModelPool(records=[self.load_record(i) for i in self.list_ids()])
