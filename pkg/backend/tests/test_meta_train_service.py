import math

import numpy as np
import pytest
import torch

from models.data import EpisodeSpec
from models.errors import InsufficientBankError, NumericFailureError, RejectedInputError
from models.network import conv_classifier_arch
from models.task import GroupAssignment, InversionConfig, PseudoTask
from models.training import TrainConfig
from models.zoo import ModelPool
from services import meta_train_service as meta_service
from services import network_service as nn_service
from services.inversion_service import InversionService
from services.meta_train_service import (
    MemoryBank,
    MetaState,
    explicit_regularizer,
    igr_update_gradient,
    kd_loss,
    kd_loss_from_logits,
    maml_gradient,
    replay_episode_from_bank,
    task_episode,
)


def test_kd_loss_worked_example():
    teacher = torch.log(torch.tensor([[0.8, 0.2]], dtype=torch.float64))
    student = torch.zeros((1, 2), dtype=torch.float64)
    value = kd_loss_from_logits(teacher, student, torch.tensor([0]))
    expected = 0.8 * math.log(1.6) + 0.2 * math.log(0.4) + math.log(2)
    assert float(value) == pytest.approx(expected, abs=1e-12)
    assert float(value) == pytest.approx(0.8858, abs=1e-4)


def test_kd_loss_on_meta_model(tiny_record, tiny_task):
    meta = MetaState(conv_classifier_arch(8, 3, 5, filters=4, blocks=1), seed=0)
    value = kd_loss(tiny_record, meta, tiny_task)
    assert torch.isfinite(value) and float(value) > 0
    narrow = MetaState(conv_classifier_arch(8, 3, 3, filters=4, blocks=1), seed=0)
    with pytest.raises(RejectedInputError):
        kd_loss(tiny_record, narrow, tiny_task)


def _quadratic_ensemble(rng, dim, m):
    mats, vecs = [], []
    for _ in range(m):
        a = rng.standard_normal((dim, dim))
        mats.append(a @ a.T / dim)
        vecs.append(rng.standard_normal(dim))
    return mats, vecs


def test_igr_matches_closed_form_on_quadratics():
    rng = np.random.default_rng(0)
    beta = 1e-3
    for _ in range(100):
        dim, m = int(rng.integers(2, 21)), int(rng.choice([2, 4]))
        mats, vecs = _quadratic_ensemble(rng, dim, m)
        theta = rng.standard_normal(dim)
        losses = [
            (lambda p, a=torch.as_tensor(a), b=torch.as_tensor(b): 0.5 * p @ a @ p + b @ p)
            for a, b in zip(mats, vecs)
        ]
        result = igr_update_gradient(torch.as_tensor(theta), losses, beta)

        grads = np.stack([a @ theta + b for a, b in zip(mats, vecs)])
        g_bar = grads.mean(axis=0)
        a_bar = np.mean(mats, axis=0)
        # (beta / 2m) * grad of sum_i ||g_i - g_bar||^2
        reg_grad = sum((a - a_bar) @ (g - g_bar) for a, g in zip(mats, grads)) * 2 * beta / (2 * m)
        assert np.abs(result.g_igr.numpy() - g_bar - reg_grad).max() <= 1e-8
        assert np.allclose(result.mean_grad.numpy(), g_bar)


def test_igr_descent_settles_at_lower_gradient_variance():
    rng = np.random.default_rng(3)
    dim, m = 6, 4
    mats = [torch.as_tensor(np.diag(rng.uniform(1.0, 3.0, dim))) for _ in range(m)]
    vecs = [torch.as_tensor(rng.standard_normal(dim)) for _ in range(m)]
    losses = [(lambda p, a=a, b=b: 0.5 * p @ a @ p + b @ p) for a, b in zip(mats, vecs)]

    def descend(beta):
        theta = torch.zeros(dim, dtype=torch.float64)
        for _ in range(400):
            theta = theta - 0.2 * igr_update_gradient(theta, losses, beta).g_igr
        return explicit_regularizer(igr_update_gradient(theta, losses, 0.0).grads)[0]

    assert descend(0.2) < descend(0.0)


def _smooth_ensemble(rng, dim, m):
    coeffs = [(torch.as_tensor(rng.standard_normal(dim)), torch.as_tensor(rng.uniform(0.1, 0.5, dim))) for _ in range(m)]
    return [(lambda p, c=c, q=q: torch.sum(c * torch.sin(p)) + torch.sum(q * p ** 4)) for c, q in coeffs]


def _first_order_residual(losses, theta, beta):
    m = len(losses)
    grads, hessians = [], []
    for loss in losses:
        p = theta.clone().requires_grad_(True)
        grads.append(torch.autograd.grad(loss(p), p)[0])
        hessians.append(torch.autograd.functional.hessian(loss, theta))
    g_bar = torch.stack(grads).mean(dim=0)
    expansion = g_bar + beta / m * sum(h @ (g - g_bar) for h, g in zip(hessians, grads))
    return torch.linalg.norm(igr_update_gradient(theta, losses, beta).g_igr - expansion).item()


def test_igr_residual_is_second_order_in_beta():
    ratios = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        losses = _smooth_ensemble(rng, 6, 4)
        theta = torch.as_tensor(rng.standard_normal(6))
        ratios.append(_first_order_residual(losses, theta, 1e-2) / _first_order_residual(losses, theta, 5e-3))
    assert 3.5 <= float(np.median(ratios)) <= 4.5


def test_igr_with_zero_beta_is_the_mean_gradient():
    losses = [lambda p: torch.sum(p ** 2), lambda p: torch.sum(torch.sin(p))]
    theta = torch.tensor([0.3, -1.2], dtype=torch.float64)
    result = igr_update_gradient(theta, losses, 0.0)
    assert torch.equal(result.g_igr, result.mean_grad)
    assert torch.allclose(result.mean_grad, (2 * theta + torch.cos(theta)) / 2)


def test_igr_reports_the_offending_term():
    losses = [lambda p: torch.sum(p), lambda p: torch.sum(p) / 0.0]
    with pytest.raises(NumericFailureError, match="pass 1, task 1"):
        igr_update_gradient(torch.ones(2, dtype=torch.float64), losses, 1e-3)
    with pytest.raises(RejectedInputError):
        igr_update_gradient(torch.ones(2), [], 1e-3)


def test_explicit_regularizer():
    g = torch.tensor([1.0, 2.0, 2.0], dtype=torch.float64)
    assert explicit_regularizer([g]) == (0.0, 1.0)
    reg, cos = explicit_regularizer([g, g])
    assert reg == pytest.approx(0.0) and cos == pytest.approx(1.0)
    reg, cos = explicit_regularizer([g, -g])
    assert reg == pytest.approx(float(g @ g) / 2) and cos == pytest.approx(-1.0)


def _task(source_id, way, per_class, size=8, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(way * per_class) % way
    return PseudoTask(images=rng.random((len(labels), size, size, 3), dtype=np.float32), labels=labels, source_id=source_id)


def test_memory_bank_is_fifo():
    bank = MemoryBank(2)
    first, second, third = _task("a", 2, 3), _task("b", 2, 3), _task("c", 2, 3)
    assert bank.push(first) is None
    assert bank.push(second) is None
    assert bank.push(third) is first
    assert len(bank) == 2
    assert sorted(bank.class_index()) == [("b", 0), ("b", 1), ("c", 0), ("c", 1)]
    with pytest.raises(RejectedInputError):
        MemoryBank(0)


def test_replay_episode_draws_across_tasks():
    bank = MemoryBank(4)
    with pytest.raises(InsufficientBankError):
        replay_episode_from_bank(bank, EpisodeSpec(N=2, K=1, U=1), seed=0)
    bank.push(_task("a", 3, 6))
    bank.push(_task("b", 3, 6, seed=1))
    spec = EpisodeSpec(N=5, K=1, U=5)
    episode = replay_episode_from_bank(bank, spec, seed=3)
    assert episode.way == 5
    assert episode.support_images.shape == (5, 8, 8, 3)
    assert episode.query_images.shape == (25, 8, 8, 3)
    assert set(episode.class_map.values()) <= set(bank.class_index())
    for label in range(5):
        support = {r for k, r in episode.support_index if k == label}
        query = {r for k, r in episode.query_index if k == label}
        assert not support & query
    with pytest.raises(InsufficientBankError):
        replay_episode_from_bank(bank, EpisodeSpec(N=5, K=2, U=5), seed=0)


def test_task_episode_split():
    episode = task_episode(_task("a", 5, 6), support_per_class=3, seed=0)
    assert episode.way == 5
    assert episode.support_images.shape[0] == 15
    assert episode.query_images.shape[0] == 15
    with pytest.raises(RejectedInputError):
        task_episode(_task("a", 5, 3), support_per_class=3, seed=0)


def test_maml_gradient_on_quadratics():
    a = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    b = torch.tensor([0.0, 1.0, 3.0], dtype=torch.float64)
    theta = torch.tensor([0.2, 0.4, -0.1], dtype=torch.float64)
    alpha, steps = 0.1, 3

    def inner(p):
        return 0.5 * torch.sum((p - a) ** 2)

    def outer(p):
        return 0.5 * torch.sum((p - b) ** 2)

    adapted = a + (1 - alpha) ** steps * (theta - a)
    second, value = maml_gradient(theta, inner, outer, alpha, steps, second_order=True)
    first, _ = maml_gradient(theta, inner, outer, alpha, steps, second_order=False)
    assert torch.allclose(second, (1 - alpha) ** steps * (adapted - b), atol=1e-12)
    assert torch.allclose(first, adapted - b, atol=1e-12)
    assert value == pytest.approx(float(outer(adapted)))


def test_maml_step_keeps_running_stats(tiny_arch):
    meta = MetaState(tiny_arch, seed=0)
    before = meta.theta().clone()
    bank = MemoryBank(2)
    bank.push(_task("a", 5, 6))
    episode = replay_episode_from_bank(bank, EpisodeSpec(N=5, K=1, U=5), seed=0)
    meta_service.maml_step(meta, episode, inner_lr=1e-2, inner_steps=2, outer_lr=1e-3, second_order=True)
    mask = meta.mask.bool()
    assert not torch.equal(meta.theta()[mask], before[mask])
    assert torch.equal(meta.theta()[~mask], before[~mask])
    assert meta.last_replay_loss is not None and meta.last_replay_loss > 0


def test_checkpoint_round_trip(tmp_path, tiny_arch):
    meta = MetaState(tiny_arch, seed=3)
    meta.epoch = 7
    meta_service.save_checkpoint(meta, tmp_path / "ckpt")
    loaded = meta_service.load_checkpoint(tmp_path / "ckpt")
    assert loaded.epoch == 7
    assert torch.equal(loaded.theta(), meta.theta())
    (tmp_path / "ckpt" / "weights.bin").write_bytes(b"\x00" * 8)
    with pytest.raises(RejectedInputError):
        meta_service.load_checkpoint(tmp_path / "ckpt")


def _tiny_train(pool, groups, **overrides):
    config = TrainConfig(m=2, epochs=3, inner_steps=1, filters=4, blocks=1, replay=EpisodeSpec(N=5, K=1, U=5))
    config = config.model_copy(update=overrides)
    inversion = InversionService(InversionConfig(steps=2, per_class=6, latent_dim=8, nf=4), seed=0)
    return meta_service.train(pool, groups, config, seed=11, inversion=inversion)


def test_train_loop_diagnostics_and_determinism(tiny_record, other_record):
    pool = ModelPool(records=[tiny_record, other_record])
    groups = GroupAssignment(group_of={"t0": 0, "t1": 0}, c=1)
    meta, diagnostics = _tiny_train(pool, groups)
    assert meta.epoch == 3
    assert [r.epoch for r in diagnostics.rows] == [0, 1, 2]
    for row in diagnostics.rows:
        assert row.group == 0
        assert sorted(row.record_ids) == ["t0", "t1"] or len(set(row.record_ids)) == 1
        assert row.regularizer >= 0
        assert -1.0 <= row.mean_cosine <= 1.0
        assert row.replay_loss is not None
    again, diagnostics_again = _tiny_train(pool, groups)
    assert torch.equal(meta.theta(), again.theta())
    assert diagnostics.column("kd_loss") == diagnostics_again.column("kd_loss")


def test_train_without_groups_or_regularization(tiny_record, other_record):
    pool = ModelPool(records=[tiny_record, other_record])
    _, diagnostics = _tiny_train(pool, None, grouping_on=False, regularization_on=False)
    assert all(r.group is None for r in diagnostics.rows)


def test_train_rejects_mismatched_groups(tiny_record, other_record):
    pool = ModelPool(records=[tiny_record, other_record])
    with pytest.raises(RejectedInputError):
        _tiny_train(pool, GroupAssignment(group_of={"t0": 0}, c=1))


def test_diagnostics_csv_columns(tmp_path, tiny_record, other_record):
    pool = ModelPool(records=[tiny_record, other_record])
    _, diagnostics = _tiny_train(pool, None, grouping_on=False, epochs=1)
    meta_service.write_diagnostics(tmp_path / "diagnostics.csv", diagnostics)
    header = (tmp_path / "diagnostics.csv").read_text().splitlines()[0]
    assert header == "epoch,regularizer,mean_cosine,kd_loss,replay_loss"


def test_igr_restores_theta_bit_for_bit(tiny_record, tiny_task):
    meta = MetaState(conv_classifier_arch(8, 3, 5, filters=4, blocks=1), seed=4)
    before = meta.params.detach().clone()
    loss = meta_service.make_kd_loss(tiny_record, meta, tiny_task)
    igr_update_gradient(meta.params, [loss, loss], beta=0.5)
    assert torch.equal(meta.params.detach(), before)
    assert meta.params.grad is None


def test_igr_single_task_is_its_plain_gradient():
    rng = np.random.default_rng(5)
    (loss,) = _smooth_ensemble(rng, 6, 1)
    theta = torch.as_tensor(rng.standard_normal(6))
    result = igr_update_gradient(theta, [loss], beta=0.1)
    assert torch.equal(result.g_igr, result.grads[0])
    assert explicit_regularizer(result.grads) == (0.0, 1.0)


def test_maml_without_adaptation_is_the_query_gradient():
    b = torch.tensor([0.0, 1.0, 3.0], dtype=torch.float64)
    theta = torch.tensor([0.2, 0.4, -0.1], dtype=torch.float64)

    def inner(p):
        return torch.sum(torch.sin(p))

    def outer(p):
        return 0.5 * torch.sum((p - b) ** 2)

    no_steps, _ = maml_gradient(theta, inner, outer, 0.1, 0, second_order=True)
    no_rate, _ = maml_gradient(theta, inner, outer, 0.0, 3, second_order=True)
    assert torch.allclose(no_steps, theta - b, atol=1e-12)
    assert torch.allclose(no_rate, theta - b, atol=1e-12)


class RecordingInversion(InversionService):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.tasks = []

    def recover(self, record, seed, epoch=None):
        task = super().recover(record, seed=seed, epoch=epoch)
        self.tasks.append(task)
        return task


def test_regularization_toggle_keeps_the_task_sequence(tiny_record, other_record):
    pool = ModelPool(records=[tiny_record, other_record])
    groups = GroupAssignment(group_of={"t0": 0, "t1": 0}, c=1)
    config = TrainConfig(m=2, epochs=3, inner_steps=1, filters=4, blocks=1, beta=0.1)
    runs = {}
    for regularize in (True, False):
        inversion = RecordingInversion(InversionConfig(steps=2, per_class=6, latent_dim=8, nf=4), seed=0)
        _, diagnostics = meta_service.train(
            pool, groups, config.model_copy(update={"regularization_on": regularize}), seed=11, inversion=inversion
        )
        runs[regularize] = (inversion.tasks, diagnostics)
    (igr_tasks, igr), (erm_tasks, erm) = runs[True], runs[False]
    assert igr.column("record_ids") == erm.column("record_ids")
    assert len(igr_tasks) == len(erm_tasks) == 6
    for a, b in zip(igr_tasks, erm_tasks):
        assert a.source_id == b.source_id
        assert np.array_equal(a.images, b.images)
    # theta only diverges after the first update
    assert igr.rows[0].regularizer == erm.rows[0].regularizer
    assert igr.rows[0].kd_loss == erm.rows[0].kd_loss


def test_train_writes_periodic_checkpoints(tmp_path, tiny_record, other_record):
    pool = ModelPool(records=[tiny_record, other_record])
    config = TrainConfig(m=2, epochs=4, inner_steps=1, filters=4, blocks=1, grouping_on=False, checkpoint_every=2)
    inversion = InversionService(InversionConfig(steps=2, per_class=6, latent_dim=8, nf=4), seed=0)
    meta, _ = meta_service.train(pool, None, config, seed=3, inversion=inversion, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_00002", "epoch_00004"]
    assert TrainConfig().checkpoint_every == 25
    final = meta_service.load_checkpoint(tmp_path / "epoch_00004")
    assert final.epoch == 4
    assert torch.equal(final.theta(), meta.theta())

