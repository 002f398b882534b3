import math

import numpy as np
import pytest

from semanom import tensor as T
from semanom.data import LabeledDataset, synth_shapes
from semanom.model import Arch, build_model
from semanom.rng import Rng
from semanom.splits import make_holdout_splits
from semanom.tensor import SGD, Tensor
from semanom.training import (TrainConfig, combined_loss, cpc_loss, cpc_terms, info_nce,
                              rotation_loss, train, train_step_alternating)
from semanom.transforms import RotationBatch, rotate_batch

SMALL = Arch(widths=(4, 6, 8, 8))


def tiny_split(seed=0, n=12):
    rng = np.random.default_rng(seed)
    ds = LabeledDataset(rng.random((3 * n, 3, 16, 16)), np.repeat(np.arange(3), n), ["a", "b", "c"])
    return make_holdout_splits(ds, ds, 1)[0]


def test_combined_loss_examples():
    assert combined_loss(1.0, 2.0, 0.5) == 2.0
    assert combined_loss(1.3, 7.0, 0.0) == 1.3
    assert combined_loss(0.0, 0.7, 1.0) == 0.7


def test_rotation_loss_uniform_is_ln4():
    m = build_model(SMALL, 2, "rotation")
    for name in ("rot_head.w", "rot_head.b"):
        m.params[name].data[:] = 0.0
    batch = rotate_batch(np.random.default_rng(0).random((2, 3, 8, 8)))
    assert rotation_loss(m, batch).item() == pytest.approx(math.log(4), abs=1e-12)


def test_rotation_loss_needs_head():
    with pytest.raises(ValueError, match="no rotation head"):
        rotation_loss(build_model(SMALL, 2), RotationBatch(np.zeros((1, 3, 8, 8)), np.zeros(1, int)))


def test_info_nce_limits():
    assert info_nce(Tensor(np.zeros((5, 2)))).item() == pytest.approx(math.log(2), abs=1e-12)
    confident = np.array([[60.0, 0.0, 0.0]])
    assert info_nce(Tensor(confident)).item() < 1e-20


def test_cpc_terms_three_by_three():
    terms = cpc_terms(3, 3, 1)
    assert len(terms) == 6
    assert (1, 0, 3) in terms and (1, 5, 8) in terms


def test_cpc_loss_equal_scores_is_ln2():
    m = build_model(SMALL, 2, "cpc")
    for p in m.named("cpc_head.pred"):
        p.data[:] = 0.0  # every candidate scores 0
    x = np.random.default_rng(1).random((2, 3, 16, 16))
    loss = cpc_loss(m, x, (3, 3, 8, 4), 1, Rng(0), n_negatives=1)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_cpc_loss_non_negative_and_trainable():
    m = build_model(Arch(widths=(4, 6, 8, 8), cpc_steps=2), 2, "cpc", Rng(3))
    x = np.random.default_rng(2).random((2, 3, 16, 16))
    loss = cpc_loss(m, x, (3, 3, 8, 4), 2, Rng(0))
    assert loss.item() >= 0
    T.backward(loss)
    assert np.abs(m.params["trunk.block0.norm.cpc.scale"].grad).sum() > 0
    assert m.params["class_head.w"].grad is None
    assert m.params["trunk.block0.norm.cls.scale"].grad is None


def test_cpc_loss_grid_too_small():
    m = build_model(SMALL, 2, "cpc")
    with pytest.raises(ValueError, match="too small"):
        cpc_loss(m, np.zeros((1, 3, 16, 16)), (2, 2, 8, 8), 2, Rng(0))


def test_aux_batch_with_no_aux_task():
    m = build_model(SMALL, 2)
    x = np.zeros((2, 3, 8, 8))
    cfg = TrainConfig()
    with pytest.raises(ValueError, match="aux_task is 'none'"):
        train_step_alternating(m, SGD(), x, np.array([0, 1]), rotate_batch(x), cfg, 0.1)


def test_update_masking_bitwise_with_buffers():
    m = build_model(SMALL, 3, "rotation", Rng(0))
    opt = SGD(0.9, True, 5e-4)
    cfg = TrainConfig(aux_task="rotation", lam=1.0)
    rng = np.random.default_rng(0)
    head_ids = {id(p) for p in m.named("class_head.")}
    rot_ids = {id(p) for p in m.named("rot_head.")}
    trunk = m.params["trunk.block0.conv.w"]
    seen = {}

    def on_step(kind, model):
        cls = [p.data.copy() for p in model.named("class_head.")]
        rot = [p.data.copy() for p in model.named("rot_head.")]
        bufs = {k: v.copy() for k, v in opt.buffers.items()}
        if kind == "aux":
            for a, b in zip(cls, seen["cls"]):
                np.testing.assert_array_equal(a, b)
            for k in head_ids:
                np.testing.assert_array_equal(bufs[k], seen["bufs"][k])
            assert not np.array_equal(trunk.data, seen["trunk"])
        elif "rot" in seen:
            for a, b in zip(rot, seen["rot"]):
                np.testing.assert_array_equal(a, b)
            for k in rot_ids:
                np.testing.assert_array_equal(bufs[k], seen["bufs"][k])
            assert not np.array_equal(trunk.data, seen["trunk"])
        seen.update(cls=cls, rot=rot, bufs=bufs, trunk=trunk.data.copy())

    for _ in range(3):
        x = rng.random((4, 3, 16, 16))
        y = rng.integers(0, 3, 4)
        train_step_alternating(m, opt, x, y, rotate_batch(x), cfg, 0.05, on_step=on_step)


def test_aux_none_is_single_step():
    m = build_model(SMALL, 3, rng=Rng(0))
    calls = []
    x = np.random.default_rng(0).random((4, 3, 16, 16))
    p, a, _ = train_step_alternating(m, SGD(), x, np.array([0, 1, 2, 0]), None, TrainConfig(), 0.1,
                                     on_step=lambda kind, _: calls.append(kind))
    assert calls == ["primary"] and a is None and p > 0


def test_lambda_zero_matches_no_aux():
    split = tiny_split()
    base = build_model(SMALL, 2, "none", Rng(4))
    rot = build_model(SMALL, 2, "rotation", Rng(4))
    train(base, split, TrainConfig(epochs=2, batch_size=8, learning_rate=0.05), Rng(9))
    train(rot, split, TrainConfig(epochs=2, batch_size=8, learning_rate=0.05, aux_task="rotation",
                                  lam=0.0), Rng(9))
    for name, p in base.params.items():
        np.testing.assert_array_equal(p.data, rot.params[name].data)


def test_zero_epochs_is_init():
    m = build_model(SMALL, 2, rng=Rng(1))
    before = m.snapshot()
    m, log = train(m, tiny_split(), TrainConfig(epochs=0), Rng(0))
    assert log.epochs == [] and m.frozen
    for k, v in before.items():
        np.testing.assert_array_equal(m.params[k].data, v)


def test_train_deterministic_and_logged():
    split = tiny_split(1)
    cfg = TrainConfig(epochs=2, batch_size=8, learning_rate=0.05, aux_task="rotation", rotation_mode="sampled")
    runs = [train(build_model(SMALL, 2, "rotation", Rng(2)), split, cfg, Rng(3)) for _ in range(2)]
    (m1, log1), (m2, log2) = runs
    assert log1.to_dict() == log2.to_dict()
    np.testing.assert_array_equal(m1.flat_parameters(), m2.flat_parameters())
    first = log1.epochs[0]
    assert math.isfinite(first.primary_loss) and first.primary_loss > 0
    assert first.aux_loss > 0
    assert "wall_clock" not in log1.to_dict()[0]
    assert all(not p.requires_grad for p in m1.params.values())


def test_cpc_training_runs():
    split = tiny_split(2, n=4)
    cfg = TrainConfig(epochs=1, batch_size=4, learning_rate=0.01, aux_task="cpc")
    m, log = train(build_model(SMALL, 2, "cpc", Rng(0)), split, cfg, Rng(0))
    assert log.epochs[0].aux_loss > 0


def test_model_config_mismatch():
    with pytest.raises(ValueError, match="does not match"):
        train(build_model(SMALL, 2), tiny_split(), TrainConfig(aux_task="rotation"))


def test_default_schedule():
    cfg = TrainConfig(epochs=10, learning_rate=0.1)
    assert [round(cfg.lr_at(e), 6) for e in (0, 5, 6, 7, 8, 9)] == [0.1, 0.1, 0.02, 0.02, 0.004, 0.004]


@pytest.mark.slow
def test_four_class_shapes_fit():
    data = synth_shapes(200, ["disk", "square", "cross", "bar"], 16, Rng(0))
    split = make_holdout_splits(data, data, 1)[0]
    # a copy of the full 4-class set as the training set
    split.train = data
    m = build_model(Arch(widths=(16, 32, 32, 32)), 4, rng=Rng(0))
    m, log = train(m, split, TrainConfig(epochs=10, learning_rate=0.02), Rng(0))
    assert (m.predict(data.images) == data.labels).mean() > 0.9
