import numpy as np
import pytest
import torch

from models.data import EpisodeSpec
from models.task import GroupAssignment, InversionConfig
from models.training import AGConfig, EvalConfig, EvalReport, TrainConfig
from models.zoo import ModelPool
from services import evaluation_service
from services.artifact_service import derive_seed
from services.dataset_service import sample_episode, split_classes
from services.meta_train_service import MetaState

SMALL_EVAL = EvalConfig(episode=EpisodeSpec(N=5, K=1, U=3), num_episodes=4, adapt_steps=2)


def test_report_statistics():
    spec = EpisodeSpec()
    flat = EvalReport.from_accuracies([0.5] * 10, spec, seed=0)
    assert flat.mean_accuracy == 0.5 and flat.ci95 == 0.0
    acc = np.random.default_rng(0).random(600)
    report = EvalReport.from_accuracies(acc.tolist(), spec, seed=0)
    assert report.ci95 == pytest.approx(1.96 * acc.std() / np.sqrt(600))
    assert report.num_episodes == 600


def test_adapt_and_eval_leaves_meta_untouched(tiny_arch, tiny_dataset):
    meta = MetaState(tiny_arch, seed=0)
    before = meta.theta().clone()
    episode = sample_episode(tiny_dataset, split_classes(tiny_dataset, "meta-test"), EpisodeSpec(N=5, K=2, U=3), seed=0)
    accuracy = evaluation_service.adapt_and_eval(meta, episode, inner_lr=0.1, adapt_steps=5)
    assert 0.0 <= accuracy <= 1.0
    assert torch.equal(meta.theta(), before)

    zero_shot = evaluation_service.adapt_and_eval(meta, episode, inner_lr=0.1, adapt_steps=0)
    logits = meta.logits(meta.theta(), episode.query_images)
    assert zero_shot == pytest.approx(float((logits.argmax(dim=1).numpy() == episode.query_labels).mean()))


def test_evaluate_is_seeded_and_worker_independent(tiny_arch, tiny_dataset):
    meta = MetaState(tiny_arch, seed=1)
    serial = evaluation_service.evaluate_with(meta, tiny_dataset, SMALL_EVAL, seed=5)
    again = evaluation_service.evaluate_with(meta, tiny_dataset, SMALL_EVAL, seed=5)
    parallel = evaluation_service.evaluate_with(
        meta, tiny_dataset, SMALL_EVAL.model_copy(update={"workers": 2}), seed=5
    )
    assert serial.accuracies == again.accuracies == parallel.accuracies
    assert serial.num_episodes == 4


def test_finetune_baseline_uses_the_same_episodes(tiny_arch, tiny_dataset):
    report = evaluation_service.finetune_baseline(tiny_arch, tiny_dataset, SMALL_EVAL, seed=5)
    assert report.seed == derive_seed(5, "eval")
    assert len(report.accuracies) == 4


def test_mean_gain_by_overlap():
    rows = [
        {"aux_id": "a", "overlap_ratio": 0.0, "ag": 0.04},
        {"aux_id": "b", "overlap_ratio": 0.0, "ag": 0.02},
        {"aux_id": "c", "overlap_ratio": 1.0, "ag": -0.01},
    ]
    gains = evaluation_service.mean_gain_by_overlap(rows)
    assert gains[0.0] == pytest.approx(0.03)
    assert gains[1.0] == pytest.approx(-0.01)


def test_accuracy_gain_rows(tiny_record, other_record, tiny_dataset):
    train = TrainConfig(inner_steps=1, filters=4, blocks=1)
    inversion = InversionConfig(steps=2, per_class=4, latent_dim=8, nf=4)
    rows = evaluation_service.accuracy_gain(
        tiny_record, ModelPool(records=[other_record]), tiny_dataset,
        AGConfig(epochs=2, support_per_class=2), train, SMALL_EVAL, inversion, seed=0,
    )
    assert len(rows) == 1
    assert rows[0]["aux_id"] == "t1"
    assert rows[0]["overlap_ratio"] == 0.0
    assert -1.0 <= rows[0]["ag"] <= 1.0


def test_run_ablation_reports_every_variant(tiny_record, other_record, tiny_dataset):
    pool = ModelPool(records=[tiny_record, other_record])
    groups = GroupAssignment(group_of={"t0": 0, "t1": 1}, c=2)
    train = TrainConfig(m=2, epochs=1, inner_steps=1, filters=4, blocks=1, replay=EpisodeSpec(N=5, K=1, U=5))
    inversion = InversionConfig(steps=2, per_class=6, latent_dim=8, nf=4)
    reports = evaluation_service.run_ablation(pool, groups, tiny_dataset, train, SMALL_EVAL, inversion, seed=0)
    assert list(reports) == ["Vanilla", "+Group", "+IGR", "Group+IGR", "Finetune"]
    assert all(r.num_episodes == 4 for r in reports.values())


@pytest.mark.slow
def test_random_init_is_near_chance(tiny_arch, tiny_dataset):
    config = EvalConfig(episode=EpisodeSpec(N=5, K=1, U=5), num_episodes=100, adapt_steps=0)
    report = evaluation_service.evaluate_with(MetaState(tiny_arch, seed=2), tiny_dataset, config, seed=0)
    assert abs(report.mean_accuracy - 0.2) < 0.1
