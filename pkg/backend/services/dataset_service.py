"""
Dataset Service
Builds the synthetic multi-domain benchmark, ingests directory-of-images
datasets, and samples N-way K-shot episodes.
"""

import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from models.data import Episode, EpisodeSpec, ImageDataset, SyntheticConfig
from models.errors import RejectedInputError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif"}
SINUSOID_AMPLITUDE = 0.08
SPLIT_NAMES = ("meta-train", "meta-val", "meta-test")


def _domain_offsets(config: SyntheticConfig) -> np.ndarray:
    """Per-domain channel-mean shift: domains sit `channel_shift` apart on every channel."""
    centre = (config.num_domains - 1) / 2.0
    return np.array(
        [[(d - centre) * config.channel_shift] * 3 for d in range(config.num_domains)],
        dtype=np.float64,
    )


def _prototype(rng: np.random.Generator, size: int, domain: int, offset: np.ndarray) -> np.ndarray:
    """0.5 + domain offset + 3 random 2-D sinusoids with integer frequencies in the domain band."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    low, high = 1 + 2 * domain, 2 + 2 * domain
    proto = np.empty((size, size, 3), dtype=np.float64)
    for c in range(3):
        plane = np.full((size, size), 0.5 + offset[c])
        for _ in range(3):
            fx, fy = rng.integers(low, high + 1, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            # integer frequencies over a full period: zero mean, so the channel mean is exactly 0.5 + offset
            plane += SINUSOID_AMPLITUDE * np.sin(2 * np.pi * (fx * xx + fy * yy) / size + phase)
        proto[:, :, c] = plane
    return proto


def _split_classes(classes: Sequence[int], config: SyntheticConfig):
    k = len(classes)
    n_train = max(1, int(k * config.train_fraction))
    n_val = int(k * config.val_fraction)
    return list(classes[:n_train]), list(classes[n_train:n_train + n_val]), list(classes[n_train + n_val:])


def _translate(image: np.ndarray, dy: int, dx: int, pad: int) -> np.ndarray:
    """Shift by (dy, dx) pixels; the uncovered border repeats the nearest edge pixel."""
    if pad == 0:
        return image
    h, w = image.shape[:2]
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    return padded[pad - dy:pad - dy + h, pad - dx:pad - dx + w]


def make_synthetic_domains(config: SyntheticConfig, seed: int) -> ImageDataset:
    """Deterministic multi-domain benchmark; byte-identical for a fixed seed."""
    if config.image_size < 8:
        raise RejectedInputError(f"image_size must be >= 8, got {config.image_size}")
    if min(config.num_domains, config.classes_per_domain, config.samples_per_class) < 1:
        raise RejectedInputError("num_domains, classes_per_domain and samples_per_class must be >= 1")
    if config.first_domain + config.num_domains > 8:
        raise RejectedInputError("at most 8 domains fit in the frequency bands")

    rng = np.random.default_rng(seed)
    offsets = _domain_offsets(config)
    size, per_class = config.image_size, config.samples_per_class
    n_classes = config.num_domains * config.classes_per_domain
    images = np.empty((n_classes * per_class, size, size, 3), dtype=np.float32)
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    domain_of_class, class_names = {}, {}
    splits = {name: [] for name in SPLIT_NAMES}
    shift = config.max_translation

    for d in range(config.num_domains):
        band = config.first_domain + d
        domain = f"d{band}"
        domain_classes = list(range(d * config.classes_per_domain, (d + 1) * config.classes_per_domain))
        for name, members in zip(SPLIT_NAMES, _split_classes(domain_classes, config)):
            splits[name].extend(members)
        for cls in domain_classes:
            domain_of_class[cls] = domain
            class_names[cls] = f"{domain}-c{cls:03d}"
            proto = _prototype(rng, size, band, offsets[d])
            rows = slice(cls * per_class, (cls + 1) * per_class)
            dy = rng.integers(-shift, shift + 1, size=per_class)
            dx = rng.integers(-shift, shift + 1, size=per_class)
            noise = rng.normal(0.0, config.noise_sigma, size=(per_class, size, size, 3))
            batch = np.stack([_translate(proto, int(a), int(b), shift) for a, b in zip(dy, dx)]) + noise
            images[rows] = np.clip(batch, 0.0, 1.0)
            labels[rows] = cls

    logger.info(
        f"[DatasetService] synthetic benchmark: {config.num_domains} domains x "
        f"{config.classes_per_domain} classes x {per_class} samples at {size}px"
    )
    return ImageDataset(
        images=images,
        labels=labels,
        domain_of_class=domain_of_class,
        splits=splits,
        class_names=class_names,
        domain_offsets={f"d{config.first_domain + d}": offsets[d].tolist() for d in range(config.num_domains)},
    )


def load_image_folder(root: Path, split_file: Path, image_size: int, domain: str = "folder") -> ImageDataset:
    """
    Directory-of-images adapter: `<root>/<class_name>/<image files>`, split file is JSON
    {"meta-train": [names], "meta-val": [...], "meta-test": [...]}. Classes are truncated to
    the smallest per-class count so every class has equal samples.
    """
    from PIL import Image

    root, split_file = Path(root), Path(split_file)
    if not root.is_dir():
        raise RejectedInputError(f"image root {root} is not a directory")
    spec = json.loads(split_file.read_text())
    names = [name for split in SPLIT_NAMES for name in spec.get(split, [])]
    if not names:
        raise RejectedInputError(f"split file {split_file} lists no classes")
    if len(set(names)) != len(names):
        raise RejectedInputError("a class appears in more than one split")

    files = {}
    for name in names:
        folder = root / name
        if not folder.is_dir():
            raise RejectedInputError(f"class directory {folder} not found")
        files[name] = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    per_class = min(len(v) for v in files.values())
    if per_class < 1:
        raise RejectedInputError("a class directory holds no images")

    images, labels = [], []
    for cls, name in enumerate(names):
        for path in files[name][:per_class]:
            with Image.open(path) as img:
                img = img.convert("RGB").resize((image_size, image_size))
                images.append(np.asarray(img, dtype=np.float32) / 255.0)
            labels.append(cls)
    index = {name: i for i, name in enumerate(names)}
    return ImageDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        domain_of_class={i: domain for i in range(len(names))},
        splits={split: [index[n] for n in spec.get(split, [])] for split in SPLIT_NAMES},
        class_names={i: n for n, i in index.items()},
    )


def sample_episode(dataset: ImageDataset, classes: Iterable[int], spec: EpisodeSpec, seed: int) -> Episode:
    """N classes without replacement, K support + U query per class without replacement."""
    classes = sorted(set(classes))
    if len(classes) < spec.N:
        raise RejectedInputError(f"episode needs {spec.N} classes, only {len(classes)} available")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(classes, size=spec.N, replace=False)

    support_rows: List[int] = []
    query_rows: List[int] = []
    support_labels: List[int] = []
    query_labels: List[int] = []
    for label, cls in enumerate(chosen):
        rows = dataset.indices_of(int(cls))
        if len(rows) < spec.K + spec.U:
            raise RejectedInputError(
                f"class {cls} has {len(rows)} samples, episode needs {spec.K + spec.U}"
            )
        picked = rng.choice(rows, size=spec.K + spec.U, replace=False)
        support_rows.extend(picked[:spec.K])
        query_rows.extend(picked[spec.K:])
        support_labels += [label] * spec.K
        query_labels += [label] * spec.U

    return Episode(
        support_images=dataset.images[support_rows],
        support_labels=np.asarray(support_labels, dtype=np.int64),
        query_images=dataset.images[query_rows],
        query_labels=np.asarray(query_labels, dtype=np.int64),
        class_map={label: int(cls) for label, cls in enumerate(chosen)},
        support_index=[(0, int(r)) for r in support_rows],
        query_index=[(0, int(r)) for r in query_rows],
    )


def split_classes(dataset: ImageDataset, split: str, domain: Optional[str] = None) -> List[int]:
    if split not in dataset.splits:
        raise RejectedInputError(f"unknown split {split!r}")
    members = dataset.splits[split]
    if domain is not None:
        members = [c for c in members if dataset.domain_of_class[c] == domain]
    return list(members)
