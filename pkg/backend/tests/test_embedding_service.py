import numpy as np
import pytest
import torch
import torch.nn.functional as F

from models.errors import RejectedInputError
from models.task import GroupingConfig, PseudoTask
from services import network_service as nn_service
from services.embedding_service import (
    EmbeddingService,
    ProbeSpec,
    build_probe,
    fim_diagonal,
    fit_head,
    probe_with_head,
)
from services.zoo_service import ModelStore


def test_probe_requires_probe_arch(tiny_record):
    with pytest.raises(RejectedInputError):
        ProbeSpec(nn_service.NetworkState(tiny_record.arch, tiny_record.params))


def test_probe_features(tiny_probe, tiny_dataset):
    feats = tiny_probe.features(tiny_dataset.images[:3])
    assert feats.shape == (3, tiny_probe.head_dim)
    assert len(tiny_probe.backbone_index()) == 108 + 4 + 8


def test_head_fit_separates_task(tiny_probe, tiny_task):
    head = fit_head(tiny_probe, tiny_task.images, tiny_task.labels, GroupingConfig())
    net = probe_with_head(tiny_probe, head, 5)
    logits = nn_service.forward_logits(net, tiny_task.images)
    assert float(F.cross_entropy(logits, torch.as_tensor(tiny_task.labels))) < np.log(5)


def test_fim_matches_brute_force(tiny_probe, tiny_dataset, tiny_record, make_task):
    probe = tiny_probe.astype(torch.float64)
    task = make_task(tiny_dataset, tiny_record.classes, 13, "t0")  # 65 samples
    task = PseudoTask(images=task.images[:64].astype(np.float64), labels=task.labels[:64], source_id="t0")
    config = GroupingConfig()
    embedding = fim_diagonal(probe, task, config)

    net = probe_with_head(probe, fit_head(probe, task.images, task.labels, config), 5)
    index = probe.backbone_index()
    total = np.zeros(len(index))
    for j in range(len(task.labels)):
        params = net.params.clone().requires_grad_(True)
        x = torch.as_tensor(task.images[j:j + 1])
        logits = nn_service.apply(net.arch, params, x, "eval")
        grad = nn_service.flat_grad(F.log_softmax(logits, dim=1)[0, int(task.labels[j])], params)
        total += grad.numpy()[index] ** 2
    expected = total / len(task.labels)

    assert embedding.fim_diag.shape == expected.shape
    assert np.all(embedding.fim_diag >= 0)
    rel = np.abs(embedding.fim_diag - expected).max() / np.abs(expected).max()
    assert rel <= 1e-10


def test_fim_rejects_empty_task(tiny_probe):
    empty = PseudoTask(images=np.zeros((0, 8, 8, 3), np.float32), labels=np.zeros(0, np.int64), source_id="e")
    with pytest.raises(RejectedInputError):
        fim_diagonal(tiny_probe, empty)


def test_service_loads_probe_from_store(tmp_path, tiny_record, tiny_task):
    store_record = tiny_record.model_copy(update={"id": "probe"})
    ModelStore(tmp_path).save_record(store_record)
    service = EmbeddingService.from_store(tmp_path)
    embeddings = service.get_embeddings_batch([tiny_task, tiny_task])
    assert len(embeddings) == 2
    assert np.array_equal(embeddings[0].fim_diag, embeddings[1].fim_diag)
    assert service.get_embeddings_batch([]) == []


@pytest.mark.slow
def test_build_probe_on_held_out_domain():
    config = GroupingConfig(probe_classes=5, probe_samples=20)
    record = build_probe(8, config, seed=0, first_domain=2)
    assert record.id == "probe"
    assert record.way == 5
    assert record.domain == "d2"


def test_batch_embeddings_cover_the_backbone(tiny_probe, tiny_task):
    (embedding,) = EmbeddingService(tiny_probe).get_embeddings_batch([tiny_task])
    assert embedding.task_id == tiny_task.source_id
    assert embedding.fim_diag.shape == (len(tiny_probe.backbone_index()),)
    assert np.all(embedding.fim_diag >= 0) and embedding.fim_diag.sum() > 0
