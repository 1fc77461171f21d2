import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowcast import tensor as tc
from flowcast import training
from flowcast.data import Bump, SyntheticConfig, VelocitySpec, synthetic_advection_dataset
from flowcast.network import ModelConfig, init_params
from flowcast.optim import Adam, cosine_schedule
from flowcast.training import (NormStats, TrainConfig, TrainingError, fit, load_checkpoint, make_segments,
                               nll_loss)

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
TINY = ModelConfig(K=1, conv_blocks=(1, 1, 1), conv_widths=(4, 4), emission_blocks=(1, 1, 1),
                   emission_widths=(4, 4), att_latent=4, dropout=0.1, pad_mode="circular_x_reflect_y")


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    cfg = SyntheticConfig(H=8, W=16, n_frames=20, lat_boundary="reflect", bumps=[Bump(1.0, 8.0, 4.0, 1.5)],
                          velocity=VelocitySpec("constant", 1.0, 0.5), substeps=8)
    m = synthetic_advection_dataset(cfg, tmp_path_factory.mktemp("tiny"))
    return m.subset(range(8), "train"), m.subset(range(8, 14), "val"), m.subset(range(14, 20), "test")


# -- normalisation -------------------------------------------------------


def test_norm_stats_examples(rng):
    x = rng.standard_normal((5, 2, 3, 4)) * [[[3.0]], [[0.1]]]
    s = NormStats.from_frames(x)
    n = s.normalize(x)
    assert np.allclose(n.min(axis=(0, 2, 3)), 0) and np.allclose(n.max(axis=(0, 2, 3)), 1)
    mid = 0.5 * (np.array(s.lo) + np.array(s.hi))
    np.testing.assert_allclose(s.normalize(np.broadcast_to(mid[:, None, None], (2, 3, 4))), 0.5)
    assert np.abs(s.denormalize(n) - x).max() < 1e-12
    assert NormStats.from_dict(s.to_dict()) == s


def test_norm_stats_rejects_constant_quantity():
    with pytest.raises(ValueError):
        NormStats.from_frames(np.ones((3, 1, 2, 2)))


# -- loss ----------------------------------------------------------------


def test_nll_closed_form_examples(rng):
    y = rng.standard_normal((2, 1, 3, 4))
    mu = rng.standard_normal(y.shape)
    u = y - mu
    assert abs(nll_loss(y, u, mu, np.ones_like(y)).item() - HALF_LOG_2PI) < 1e-15
    c = 2.5
    assert abs(nll_loss(y, u, mu, np.full_like(y, c)).item() - (HALF_LOG_2PI + math.log(c))) < 1e-14
    # the prior adds sigma^2 / (2 lambda^2) per element
    got = nll_loss(y, u, mu, np.full_like(y, c), inv_lambda=0.5).item()
    assert abs(got - (HALF_LOG_2PI + math.log(c) + 0.5 * c * c * 0.25)) < 1e-14


def test_nll_residual_term(rng):
    y = np.zeros((1, 1, 2, 2))
    got = nll_loss(y, y + 3.0, y, np.full_like(y, 2.0)).item()
    assert abs(got - (HALF_LOG_2PI + math.log(2.0) + 9.0 / 8.0)) < 1e-14


def test_nll_gradient_zero_at_fit(rng):
    # integer values keep the residual exactly zero
    y = rng.integers(-5, 5, (1, 1, 2, 3)).astype(float)
    mu = tc.Tensor(rng.integers(-5, 5, y.shape).astype(float), requires_grad=True)
    with tc.Tape() as tape:
        loss = nll_loss(y, y - mu.data, mu, np.ones_like(y))
    (g,) = tape.gradient(loss, [mu])
    assert np.all(g == 0)


def test_nll_errors():
    z = np.zeros((1, 1, 2, 2))
    with pytest.raises(ValueError):
        nll_loss(z, z, z, z)
    with pytest.raises(ValueError):
        nll_loss(z, z, z, z + 1, inv_lambda=-1.0)


# -- optimiser and schedules --------------------------------------------


def test_cosine_schedule_examples():
    assert cosine_schedule(0, 10, 1.0, 0.1) == 1.0
    assert cosine_schedule(10, 10, 1.0, 0.1) == 0.1
    assert abs(cosine_schedule(5, 10, 1.0, 0.1) - 0.55) < 1e-15
    with pytest.raises(ValueError):
        cosine_schedule(11, 10, 1.0, 0.0)


@given(st.integers(0, 50), st.integers(1, 50))
def test_cosine_schedule_bounded_and_monotone(step, total):
    step = min(step, total)
    v = cosine_schedule(step, total, 2.0, 0.5)
    assert 0.5 <= v <= 2.0
    if step < total:
        assert cosine_schedule(step + 1, total, 2.0, 0.5) <= v


def test_adam_examples():
    p = tc.Tensor(np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    q = tc.Tensor(np.zeros(2))
    opt = Adam([q], lr=0.01)
    g = np.array([3.0, -0.5])
    opt.step([g])
    np.testing.assert_allclose(q.data, -0.01 * np.sign(g), rtol=1e-6)
    for _ in range(500):
        before = q.data.copy()
        opt.step([g])
    np.testing.assert_allclose(q.data - before, -0.01 * np.sign(g), rtol=1e-6)


def test_lambda_schedule_endpoints():
    cfg = TrainConfig(epochs=7, inv_lambda_max=2.0, inv_lambda_min=0.25)
    assert cfg.inv_lambda(0) == 2.0 and cfg.inv_lambda(6) == 0.25


def test_train_config_validation():
    for bad in (dict(epochs=-1), dict(segment_frames=1), dict(lr=0.0), dict(inv_lambda_min=2.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_segments_need_history():
    seg = make_segments(np.zeros((6, 1, 2, 2)), np.arange(6) * 0.25, 3)
    assert list(seg.starts) == [2, 3] and seg.lead_offsets() == [0.0, 0.25, 0.5]
    with pytest.raises(ValueError):
        make_segments(np.zeros((4, 1, 2, 2)), np.arange(4.0), 3)


# -- fit -----------------------------------------------------------------


def test_smoke_fit_writes_log_and_checkpoint(tiny_data, tmp_path):
    train, val, _ = tiny_data
    res = fit(train, val, TINY, TrainConfig(epochs=2, batch_size=2), tmp_path / "log.csv", tmp_path / "ck.json")
    assert len(res.history) == 2 and all(math.isfinite(r["train_nll"]) for r in res.history)
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert [r["epoch"] for r in rows] == ["0", "1"] and set(rows[0]) == set(training.LOG_FIELDS)
    params, stats, cfg = load_checkpoint(tmp_path / "ck.json")
    assert stats == res.stats and cfg.epochs == 2
    for a, b in zip(params.values(), res.params.values()):
        np.testing.assert_array_equal(a.data, b.data)


def test_same_seed_identical_curves(tiny_data):
    train, val, _ = tiny_data
    runs = [fit(train, val, TINY, TrainConfig(epochs=2, batch_size=2, seed=5)).history for _ in range(2)]
    assert runs[0] == runs[1]
    other = fit(train, val, TINY, TrainConfig(epochs=2, batch_size=2, seed=6)).history
    assert other != runs[0]


def test_zero_epochs_returns_initial_params(tiny_data):
    train, val, _ = tiny_data
    res = fit(train, val, TINY, TrainConfig(epochs=0, seed=3))
    init = init_params(TINY, np.random.default_rng(3))
    assert res.history == [] and res.best_epoch == -1
    for a, b in zip(res.params.values(), init.values()):
        np.testing.assert_array_equal(a.data, b.data)


def test_stats_depend_on_train_split_only(tiny_data):
    train, val, test = tiny_data
    a = fit(train, val, TINY, TrainConfig(epochs=0)).stats
    b = fit(train, test, TINY, TrainConfig(epochs=0)).stats
    assert a == b == NormStats.from_frames(train.stack())


def test_non_finite_loss_aborts_with_diagnostic(tiny_data, monkeypatch):
    train, val, _ = tiny_data
    real = training.segment_loss

    def poisoned(*args, **kw):
        return real(*args, **kw) * float("nan")

    monkeypatch.setattr(training, "_evaluate", lambda *a: 0.0)
    monkeypatch.setattr(training, "segment_loss", poisoned)
    with pytest.raises(TrainingError, match=r"epoch 0 step 0 \(lambda_sigma=1.0, lr="):
        fit(train, val, TINY, TrainConfig(epochs=1, batch_size=2))


def test_fit_rejects_mismatched_model(tiny_data):
    train, val, _ = tiny_data
    with pytest.raises(ValueError):
        fit(train, val, ModelConfig(**{**TINY.__dict__, "K": 2}), TrainConfig(epochs=0))
