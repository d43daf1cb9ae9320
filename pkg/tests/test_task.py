import pytest
import torch

from pearl_lab.config import LearnerConfig, TaskConfig
from pearl_lab.errors import ConfigError, ShapeError
from pearl_lab.models import build_learner
from pearl_lab.task import (
    PromptBatch,
    PromptInstance,
    TaskSpec,
    TaskStream,
    dump_instances,
    held_out_instances,
    icl_loss,
    load_instances,
    normalized_error,
    sample_batch,
    sample_instance,
)

SPEC = TaskSpec(d=5, k_max=5, seed=0)


def test_labels_follow_the_weights():
    inst = PromptInstance.from_weights(
        torch.tensor([2.0]), torch.tensor([[3.0]]), torch.tensor([-1.0])
    )
    assert inst.ys.tolist() == [6.0]
    assert inst.query_y == -2.0


def test_sample_instance_is_reproducible_and_exact():
    a = sample_instance(SPEC, 3, torch.Generator().manual_seed(5))
    b = sample_instance(SPEC, 3, torch.Generator().manual_seed(5))
    assert torch.equal(a.xs, b.xs) and torch.equal(a.w, b.w)
    assert torch.equal(a.ys, a.xs @ a.w)
    assert a.query_y == float(a.query_x @ a.w)
    assert a.n_demos == 3 and len(a.demos) == 3


def test_demo_count_must_be_in_range():
    with pytest.raises(ConfigError):
        sample_instance(SPEC, 0)
    with pytest.raises(ConfigError):
        sample_batch(SPEC, 4, SPEC.k_max + 1)
    with pytest.raises(ConfigError):
        TaskSpec(d=0, k_max=3)


@pytest.mark.slow
def test_label_second_moment_and_input_variance(float64):
    batch = sample_batch(SPEC, 100_000, 1, torch.Generator().manual_seed(0))
    assert batch.query_y.pow(2).mean().item() == pytest.approx(SPEC.d, rel=0.02)
    assert batch.xs[:, 0].var().item() == pytest.approx(1.0, rel=0.02)
    assert torch.allclose(batch.ys, torch.einsum("bnd,bd->bn", batch.xs, batch.w), atol=1e-12)


@pytest.mark.slow
def test_zero_predictor_normalized_error_is_one(float64):
    batch = sample_batch(SPEC, 100_000, 3, torch.Generator().manual_seed(1))
    errors = normalized_error(torch.zeros(batch.size), batch.w, batch.query_x, SPEC.d)
    assert errors.mean().item() == pytest.approx(1.0, abs=0.02)


def test_untrained_learner_with_silent_read_out_scores_about_one():
    task = TaskConfig(d=5, k_max=5)
    learner = build_learner(task, LearnerConfig(layers=1, heads=2, hidden=16), seed=0)
    with torch.no_grad():
        learner.read_out.weight.mul_(1e-3)
        learner.read_out.bias.zero_()
        batch = sample_batch(SPEC, 10_000, 3, torch.Generator().manual_seed(2))
        preds = learner(batch.xs, batch.ys)[:, -1]
    assert preds.abs().max().item() < 0.05
    errors = normalized_error(preds, batch.w, batch.query_x, SPEC.d)
    assert errors.mean().item() == pytest.approx(1.0, abs=0.1)


def test_icl_loss_examples():
    assert icl_loss(torch.tensor([1.0, 2.0]), torch.tensor([1.0, 2.0])).item() == 0.0
    assert icl_loss(torch.zeros(2), torch.ones(2)).item() == 1.0
    loss = icl_loss(torch.tensor([1.0, 2.0, 3.0]), torch.tensor([1.0, 2.0, 5.0]))
    assert loss.item() == pytest.approx(4 / 3)
    with pytest.raises(ShapeError):
        icl_loss(torch.zeros(2), torch.zeros(3))


def test_normalized_error_examples():
    w = torch.tensor([1.0, 0.0, 0.0, 0.0])
    x = torch.tensor([1.0, 0.0, 0.0, 0.0])
    assert normalized_error(torch.tensor(1.0), w, x, 4).item() == 0.0
    assert normalized_error(torch.tensor(3.0), w, x, 4).item() == 1.0


def test_normalized_error_ignores_demo_order():
    inst = sample_instance(SPEC, 4, torch.Generator().manual_seed(2))
    shuffled = inst.permuted([3, 1, 0, 2])
    pred = torch.tensor(0.7)
    assert torch.equal(
        normalized_error(pred, inst.w, inst.query_x, SPEC.d),
        normalized_error(pred, shuffled.w, shuffled.query_x, SPEC.d),
    )
    assert torch.equal(shuffled.xs[0], inst.xs[3])


def test_batch_round_trips_instances():
    instances = [sample_instance(SPEC, 2, torch.Generator().manual_seed(s)) for s in range(3)]
    batch = PromptBatch.from_instances(instances)
    assert (batch.size, batch.n_demos, batch.d) == (3, 2, SPEC.d)
    for original, back in zip(instances, batch.instances()):
        assert torch.equal(original.xs, back.xs)
        assert original.query_y == back.query_y
    with pytest.raises(ShapeError):
        PromptBatch.from_instances(instances + [sample_instance(SPEC, 3)])


def test_batch_reorder_keeps_the_query():
    batch = sample_batch(SPEC, 4, 3, torch.Generator().manual_seed(3))
    orders = torch.tensor([[2, 0, 1]] * 4)
    moved = batch.reorder(orders)
    assert torch.equal(moved.xs[:, 0], batch.xs[:, 2])
    assert torch.equal(moved.ys[:, 1], batch.ys[:, 0])
    assert torch.equal(moved.query_x, batch.query_x)
    with pytest.raises(ShapeError):
        batch.reorder(torch.zeros(4, 2, dtype=torch.long))


def test_stream_is_keyed_by_step_and_slot():
    stream = TaskStream(SPEC, batch_size=4)
    assert torch.equal(stream.batch(7, 3).xs, stream.batch(7, 3).xs)
    assert not torch.equal(stream.batch(7, 3).xs, stream.batch(7, 3, slot=1).xs)
    assert not torch.equal(stream.batch(7, 3).xs, stream.batch(8, 3).xs)


def test_held_out_set_differs_from_training_stream():
    held_out = held_out_instances(SPEC, 2, 3)
    train = TaskStream(SPEC, batch_size=2).batch(0, 3)
    assert not torch.equal(held_out[0].w, train.w[0])
    assert torch.equal(held_out[1].w, held_out_instances(SPEC, 2, 3)[1].w)


def test_instances_dump_and_load(tmp_path):
    instances = held_out_instances(SPEC, 3, 2)
    path = dump_instances(tmp_path / "set.jsonl", instances)
    loaded = load_instances(path)
    assert len(loaded) == 3
    for a, b in zip(instances, loaded):
        assert torch.equal(a.xs, b.xs) and torch.equal(a.w, b.w)
        assert a.query_y == b.query_y
