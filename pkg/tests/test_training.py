import copy
import itertools
import math
from collections import Counter

import pytest
import torch
from scipy.stats import ks_2samp

from pearl_lab import autodiff
from pearl_lab.artifacts import JsonlLog
from pearl_lab.checkpoint import checkpoint_exists
from pearl_lab.config import (
    LearnerConfig,
    PNetConfig,
    SinkhornConfig,
    TaskConfig,
    TrainConfig,
    config_from_dict,
)
from pearl_lab.errors import ArtifactError, ConfigError, EnumerationCapError, NumericError
from pearl_lab.models import build_learner, build_pnet, propose_permutation
from pearl_lab.permutation import gumbel_sample, random_orders
from pearl_lab.task import TaskSpec, TaskStream, icl_loss, sample_batch
from pearl_lab.training import (
    CollapseDetector,
    CurriculumSchedule,
    LossRecord,
    Trainer,
    adversary_step,
    batch_loss,
    dro_worstcase_estimate,
    erm_ds_step,
    erm_im_step,
    erm_step,
    pearl_round,
)

TASK = TaskConfig(d=3, k_max=4)
SPEC = TaskSpec(d=3, k_max=4, seed=0)
LEARNER = LearnerConfig(layers=1, heads=2, hidden=16)
PNET = PNetConfig(hidden=16, heads=2, layers=1)


def _params_equal(a, b):
    return all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def _adam(module, lr=1e-3):
    return autodiff.build_adamw(module.parameters(), lr, 0.0)


def test_batch_loss_is_mean_of_instance_losses(float64):
    learner = build_learner(TASK, LEARNER, seed=0)
    batch = sample_batch(SPEC, 5, 3, torch.Generator().manual_seed(0))
    per_instance = []
    for inst in batch.instances():
        single = inst.to_batch()
        targets = torch.cat([inst.ys, torch.tensor([inst.query_y])])
        per_instance.append(icl_loss(learner(single.xs, single.ys)[0], targets))
    expected = torch.stack(per_instance).mean()
    assert batch_loss(learner, batch).item() == pytest.approx(expected.item(), abs=1e-12)


def test_loss_record_rejects_negative_entropy():
    with pytest.raises(NumericError, match="entropy"):
        LossRecord(0, "pearl", "adversary", 3, 1.0, -0.5, 1.5, 0.1)


@pytest.mark.slow
def test_learner_can_overfit_a_fixed_set():
    learner = build_learner(TASK, LearnerConfig(layers=2, heads=2, hidden=64), seed=0)
    opt = autodiff.build_adamw(learner.parameters(), 3e-3, 0.0)
    batch = sample_batch(SPEC, 8, 2, torch.Generator().manual_seed(1))
    first = erm_step(learner, batch, opt).l_lm
    for step in range(1, 500):
        last = erm_step(learner, batch, opt, step).l_lm
    assert last < 0.1 * first


def test_curriculum_schedule():
    schedule = CurriculumSchedule(k_max=4, total_steps=10)
    shots = [schedule(step) for step in range(10)]
    assert shots[0] == 1
    assert shots[-1] == 4
    assert all(a <= b for a, b in zip(shots, shots[1:]))
    assert CurriculumSchedule(4, 10, start=3)(0) == 3
    with pytest.raises(ConfigError):
        CurriculumSchedule(4, 10, start=0)


def test_shuffled_erm_with_one_shot_equals_plain_erm():
    learner = build_learner(TASK, LEARNER, seed=0)
    twin = copy.deepcopy(learner)
    opt, twin_opt = _adam(learner), _adam(twin)
    batch = sample_batch(SPEC, 8, 1, torch.Generator().manual_seed(2))
    erm_step(learner, batch, opt)
    erm_ds_step(twin, batch, twin_opt, torch.Generator().manual_seed(3))
    assert _params_equal(learner, twin)


def test_shuffled_erm_is_reproducible():
    learner = build_learner(TASK, LEARNER, seed=0)
    twin = copy.deepcopy(learner)
    opt, twin_opt = _adam(learner), _adam(twin)
    batch = sample_batch(SPEC, 8, 3, torch.Generator().manual_seed(2))
    a = erm_ds_step(learner, batch, opt, torch.Generator().manual_seed(4))
    b = erm_ds_step(twin, batch, twin_opt, torch.Generator().manual_seed(4))
    assert a == b
    assert _params_equal(learner, twin)


def test_random_orders_are_uniform():
    orders = random_orders(10_000, 3, torch.Generator().manual_seed(5))
    counts = Counter(tuple(row.tolist()) for row in orders)
    assert len(counts) == 6
    for count in counts.values():
        assert count / 10_000 == pytest.approx(1 / 6, abs=0.02)


def test_exhaustive_mixup_averages_both_orders(float64):
    learner = build_learner(TASK, LEARNER, seed=0)
    batch = sample_batch(SPEC, 6, 2, torch.Generator().manual_seed(6))
    swapped = batch.reorder(torch.tensor([[1, 0]] * 6))
    expected = (batch_loss(learner, batch).item() + batch_loss(learner, swapped).item()) / 2
    record = erm_im_step(learner, batch, _adam(learner), None, copies=1, exhaustive=True)
    assert record.l_lm == pytest.approx(expected, abs=1e-9)


def test_single_copy_mixup_equals_shuffled_erm():
    learner = build_learner(TASK, LEARNER, seed=0)
    twin = copy.deepcopy(learner)
    opt, twin_opt = _adam(learner), _adam(twin)
    batch = sample_batch(SPEC, 8, 3, torch.Generator().manual_seed(7))
    a = erm_im_step(learner, batch, opt, torch.Generator().manual_seed(8), copies=1)
    b = erm_ds_step(twin, batch, twin_opt, torch.Generator().manual_seed(8))
    assert a.l_lm == b.l_lm
    assert _params_equal(learner, twin)


def test_mixup_rejects_zero_copies():
    learner = build_learner(TASK, LEARNER, seed=0)
    batch = sample_batch(SPEC, 2, 2, torch.Generator().manual_seed(0))
    with pytest.raises(ConfigError):
        erm_im_step(learner, batch, _adam(learner), None, copies=0)


def test_adversary_step_ascends_the_learner_loss(float64):
    learner = build_learner(TASK, LEARNER, seed=0)
    pnet = build_pnet(TASK, PNET, seed=0)
    batch = sample_batch(SPEC, 4, 3, torch.Generator().manual_seed(9))
    cfg = SinkhornConfig(iterations=40, temperature=1.0)
    noise = gumbel_sample((4, 3, 3), cfg.noise_scale, torch.Generator().manual_seed(10))

    loss = batch_loss(learner, batch, propose_permutation(pnet, batch, cfg, noise=noise))
    (grad,) = torch.autograd.grad(loss, [pnet.relation])
    before = pnet.relation.detach().clone()

    lr = 0.01
    sgd = torch.optim.SGD(pnet.parameters(), lr=lr)
    adversary_step(learner, pnet, batch, cfg, beta=0.0, optimizer=sgd, noise=noise)
    assert torch.allclose(pnet.relation.detach() - before, lr * grad, atol=1e-12)


def test_adversary_small_steps_never_decrease_the_loss(float64):
    learner = build_learner(TASK, LEARNER, seed=0)
    pnet = build_pnet(TASK, PNET, seed=0)
    batch = sample_batch(SPEC, 4, 3, torch.Generator().manual_seed(11))
    cfg = SinkhornConfig(iterations=40, temperature=1.0)
    noise = gumbel_sample((4, 3, 3), cfg.noise_scale, torch.Generator().manual_seed(12))
    sgd = torch.optim.SGD(pnet.parameters(), lr=1e-5)
    losses = [
        adversary_step(learner, pnet, batch, cfg, 0.0, sgd, noise=noise).l_lm for _ in range(20)
    ]
    assert all(b >= a - 1e-12 for a, b in zip(losses, losses[1:]))


def test_adversary_step_leaves_the_learner_alone():
    learner = build_learner(TASK, LEARNER, seed=0)
    pnet = build_pnet(TASK, PNET, seed=0)
    frozen = copy.deepcopy(learner)
    batch = sample_batch(SPEC, 4, 4, torch.Generator().manual_seed(13))
    cfg = SinkhornConfig()
    record = adversary_step(
        learner, pnet, batch, cfg, 1.0, _adam(pnet), torch.Generator().manual_seed(14)
    )
    assert _params_equal(learner, frozen)
    assert all(p.grad is None for p in learner.parameters())
    assert math.isfinite(record.grad_norm) and record.grad_norm > 0.0
    assert (record.regime, record.phase, record.shots) == ("pearl", "adversary", 4)
    assert 0.0 <= record.l_ent <= 4 * math.log(4) + 1e-6
    assert record.objective == pytest.approx(record.l_lm - record.l_ent, abs=1e-5)


def test_pearl_round_with_identity_permutations_is_an_erm_step():
    learner = build_learner(TASK, LEARNER, seed=0)
    pnet = build_pnet(TASK, PNET, seed=0)
    twin = copy.deepcopy(learner)
    stream = TaskStream(SPEC, batch_size=8)
    cfg = TrainConfig(regime="pearl", inner_steps=2)
    records = pearl_round(
        learner,
        pnet,
        stream,
        3,
        3,
        cfg,
        SinkhornConfig(),
        _adam(learner),
        _adam(pnet),
        identity_permutations=True,
    )
    erm_record = erm_step(twin, stream.batch(3, 3, slot=cfg.inner_steps), _adam(twin))

    assert [r.phase for r in records] == ["adversary", "adversary", "learner"]
    assert records[-1].l_ent == pytest.approx(0.0, abs=1e-6)
    assert records[-1].l_lm == erm_record.l_lm
    assert _params_equal(learner, twin)


def test_pearl_round_needs_two_shots():
    learner = build_learner(TASK, LEARNER, seed=0)
    pnet = build_pnet(TASK, PNET, seed=0)
    with pytest.raises(ConfigError):
        pearl_round(
            learner,
            pnet,
            TaskStream(SPEC, 2),
            0,
            1,
            TrainConfig(),
            SinkhornConfig(),
            _adam(learner),
            _adam(pnet),
        )


def test_worstcase_estimate_with_one_demo_is_the_plain_loss():
    learner = build_learner(TASK, LEARNER, seed=0)
    batch = sample_batch(SPEC, 6, 1, torch.Generator().manual_seed(15))
    plain = batch_loss(learner, batch).item()
    assert dro_worstcase_estimate(learner, batch) == pytest.approx(plain, abs=1e-7)


def test_worstcase_estimate_matches_brute_force():
    learner = build_learner(TASK, LEARNER, seed=0)
    batch = sample_batch(SPEC, 6, 3, torch.Generator().manual_seed(16))
    with torch.no_grad():
        brute = max(
            batch_loss(learner, batch.reorder(torch.tensor([p] * 6))).item()
            for p in itertools.permutations(range(3))
        )
    assert dro_worstcase_estimate(learner, batch) == pytest.approx(brute, abs=1e-7)
    assert dro_worstcase_estimate(learner, batch) >= batch_loss(learner, batch).item() - 1e-7
    with pytest.raises(EnumerationCapError):
        dro_worstcase_estimate(learner, batch, cap=2)


def test_collapse_detector(caplog):
    detector = CollapseDetector(window=3, threshold=0.01, flat_tol=0.05)
    assert not detector.update(0.0, 1.0)
    assert not detector.update(0.0, 1.0)
    with caplog.at_level("WARNING", logger="pearl_lab.training"):
        assert detector.update(0.001, 1.01)
    assert "collapsed" in caplog.text

    moving = CollapseDetector(window=3)
    assert not any(moving.update(0.0, l_lm) for l_lm in (1.0, 2.0, 3.0))
    soft = CollapseDetector(window=3)
    assert not any(soft.update(0.5, 1.0) for _ in range(3))


def _records(trainer):
    return trainer.loss_log.read()[1:]


def _config(tiny_dict, tmp_path, name, **train):
    data = copy.deepcopy(tiny_dict)
    data["train"].update(train)
    data["output_dir"] = str(tmp_path / name)
    return config_from_dict(data)


def test_trainer_logs_one_record_per_step(tiny_dict, tmp_path):
    trainer = Trainer(_config(tiny_dict, tmp_path, "erm", regime="erm"), progress=False)
    summary = trainer.run()
    records = _records(trainer)
    assert [r["step"] for r in records] == list(range(10))
    assert all(r["shots"] == 4 and r["regime"] == "erm" for r in records)
    assert summary["steps"] == 10
    assert checkpoint_exists(trainer.out_dir / "learner")
    assert trainer.loss_log.read()[0]["format"] == "pearl-losslog-v1"


def test_trainer_is_deterministic(tiny_dict, tmp_path):
    a = Trainer(_config(tiny_dict, tmp_path, "a", regime="erm_ds"), progress=False)
    b = Trainer(_config(tiny_dict, tmp_path, "b", regime="erm_ds"), progress=False)
    a.run()
    b.run()
    assert _records(a) == _records(b)
    assert _params_equal(a.learner, b.learner)


def test_curriculum_regime_grows_the_shot_count(tiny_dict, tmp_path):
    trainer = Trainer(_config(tiny_dict, tmp_path, "cl", regime="erm_cl"), progress=False)
    trainer.run()
    shots = [r["shots"] for r in _records(trainer)]
    assert shots[0] == 1 and shots[-1] == 4


def test_pearl_trainer_alternates_and_saves_the_pnet(tiny_dict, tmp_path):
    trainer = Trainer(_config(tiny_dict, tmp_path, "pearl", regime="pearl"), progress=False)
    trainer.run()
    records = _records(trainer)
    early = [r for r in records if r["shots"] == 1]
    assert early and all(r["phase"] == "learner" for r in early)
    adversary = [r for r in records if r["phase"] == "adversary"]
    assert adversary and all(r["l_ent"] >= 0 for r in adversary)
    assert checkpoint_exists(trainer.out_dir / "pnet")
    assert checkpoint_exists(trainer.out_dir / "pnet_optim")


@pytest.mark.parametrize("regime", ["erm", "pearl"])
def test_resume_matches_an_uninterrupted_run(tiny_dict, tmp_path, regime):
    straight = Trainer(_config(tiny_dict, tmp_path, "straight", regime=regime), progress=False)
    straight.run()

    config = _config(tiny_dict, tmp_path, "resumed", regime=regime)
    first = Trainer(config, progress=False)
    assert first.run(stop_after=5)["steps"] == 5
    second = Trainer(config, progress=False)
    second.run(resume=True)

    assert _records(second) == _records(straight)
    assert _params_equal(second.learner, straight.learner)


def test_resume_refuses_a_different_config(tiny_dict, tmp_path):
    Trainer(_config(tiny_dict, tmp_path, "run", regime="erm"), progress=False).run(stop_after=5)
    changed = _config(tiny_dict, tmp_path, "run", regime="erm", eta_theta=1e-3)
    with pytest.raises(ConfigError, match="hash"):
        Trainer(changed, progress=False).run(resume=True)


def test_resume_without_checkpoint(tiny_dict, tmp_path):
    with pytest.raises(ArtifactError):
        Trainer(_config(tiny_dict, tmp_path, "empty"), progress=False).run(resume=True)


def test_validation_tracks_the_best_learner(tiny_dict, tmp_path):
    trainer = Trainer(
        _config(tiny_dict, tmp_path, "valid", regime="erm", eval_every=5), progress=False
    )
    summary = trainer.run()
    rows = JsonlLog(trainer.out_dir / "valid_log.jsonl").read()[1:]
    assert [r["step"] for r in rows] == [5, 10]
    assert summary["best_valid_error"] == min(r["normalized_error"] for r in rows)
    assert checkpoint_exists(trainer.out_dir / "learner_best")


def test_validation_stream_is_fixed(tiny_dict, tmp_path):
    trainer = Trainer(_config(tiny_dict, tmp_path, "fixed"), progress=False)
    assert trainer.validation_error() == trainer.validation_error()


@pytest.mark.slow
def test_entropy_free_pearl_with_a_flat_adversary_looks_like_shuffling(tiny_dict, tmp_path):
    tiny_dict["pnet"]["zero_relation"] = True
    common = {"total_steps": 100, "checkpoint_every": 100, "use_curriculum": False}
    pearl = Trainer(
        _config(tiny_dict, tmp_path, "pearl", regime="pearl", beta=0.0, **common),
        progress=False,
    )
    shuffled = Trainer(
        _config(tiny_dict, tmp_path, "erm_ds", regime="erm_ds", **common), progress=False
    )
    pearl.run()
    shuffled.run()
    pearl_losses = [r["l_lm"] for r in _records(pearl) if r["phase"] == "learner"]
    shuffled_losses = [r["l_lm"] for r in _records(shuffled)]
    assert len(pearl_losses) == len(shuffled_losses) == 100
    assert ks_2samp(pearl_losses, shuffled_losses).pvalue > 0.01
