"""Shared tiny fixtures: 8px two-domain benchmark, one pre-trained teacher and its probe."""

import numpy as np
import pytest

from models.data import SyntheticConfig
from models.network import conv_classifier_arch
from models.task import PseudoTask
from models.zoo import PretrainHyper
from services.dataset_service import make_synthetic_domains, split_classes
from services.embedding_service import probe_from_record
from services.zoo_service import pretrain_model

TINY_HYPER = PretrainHyper(lr=0.01, epochs=2, batch=16)


@pytest.fixture(scope="session")
def tiny_config():
    return SyntheticConfig(num_domains=2, classes_per_domain=10, samples_per_class=20, image_size=8)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config):
    return make_synthetic_domains(tiny_config, seed=0)


@pytest.fixture(scope="session")
def tiny_arch():
    return conv_classifier_arch(8, 3, 5, filters=4, blocks=1)


@pytest.fixture(scope="session")
def tiny_record(tiny_dataset, tiny_arch):
    classes = split_classes(tiny_dataset, "meta-train")[:5]
    return pretrain_model(tiny_dataset, classes, tiny_arch, TINY_HYPER, seed=1, record_id="t0")


@pytest.fixture(scope="session")
def other_record(tiny_dataset, tiny_arch):
    classes = split_classes(tiny_dataset, "meta-train")[5:10]
    return pretrain_model(tiny_dataset, classes, tiny_arch, TINY_HYPER, seed=2, record_id="t1")


@pytest.fixture(scope="session")
def tiny_probe(tiny_record):
    return probe_from_record(tiny_record)


def task_from_dataset(dataset, classes, per_class, source_id):
    """Real images relabeled 0..len(classes)-1, a stand-in for a recovered task."""
    images, labels = [], []
    for label, cls in enumerate(classes):
        rows = dataset.indices_of(cls)[:per_class]
        images.append(dataset.images[rows])
        labels += [label] * len(rows)
    return PseudoTask(images=np.concatenate(images), labels=np.asarray(labels, dtype=np.int64), source_id=source_id)


@pytest.fixture
def tiny_task(tiny_dataset, tiny_record):
    return task_from_dataset(tiny_dataset, tiny_record.classes, 4, tiny_record.id)


@pytest.fixture(scope="session")
def make_task():
    return task_from_dataset
