import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radioflow import model as M
from radioflow import scene as S
from radioflow import train as T

CFG = T.TrainConfig(epochs=4, lr=1e-3, warmup_steps=10)


# -- learning-rate schedule --------------------------------------------------


def test_lr_warmup_endpoints():
    assert T.lr_schedule(0, CFG, 100) == 0.0
    assert T.lr_schedule(1, CFG, 100) == pytest.approx(CFG.lr / 10, abs=1e-18)
    assert T.lr_schedule(10, CFG, 100) == CFG.lr


def test_lr_final_step_vanishes():
    assert T.lr_schedule(100, CFG, 100) < 1e-8 * CFG.lr


def test_lr_continuous_at_boundary():
    left = CFG.lr * (10 - 1e-9) / 10
    assert abs(T.lr_schedule(10, CFG, 100) - left) < 1e-12


def test_lr_cosine_midpoint():
    assert T.lr_schedule(55, CFG, 100) == pytest.approx(CFG.lr / 2, rel=1e-12)


@given(step=st.integers(0, 500))
def test_lr_bounded_and_monotone_after_warmup(step):
    lr = T.lr_schedule(step, CFG, 500)
    assert 0 <= lr <= CFG.lr
    if step >= 10:
        assert T.lr_schedule(step + 1, CFG, 500) <= lr


def test_lr_without_warmup():
    cfg = T.TrainConfig(lr=1.0, warmup_steps=0)
    assert T.lr_schedule(0, cfg, 10) == 1.0


def test_lr_negative_step():
    with pytest.raises(ValueError):
        T.lr_schedule(-1, CFG, 10)


# -- condition dropout -------------------------------------------------------


def test_dropout_zero_probability_keeps_condition():
    c = np.random.default_rng(0).random((50, 2, 4, 4))
    np.testing.assert_array_equal(T.cfg_dropout(c, 0.0, np.random.default_rng(1)), c)


@pytest.mark.parametrize("p", [0.1, 0.5, 1 - 1e-3])
def test_dropout_fraction_binomial(p):
    n = 10_000
    c = np.ones((n, 2, 2, 2))
    out = T.cfg_dropout(c, p, np.random.default_rng(2))
    dropped = np.all(out == 0, axis=(1, 2, 3))
    kept = np.all(out == 1, axis=(1, 2, 3))
    assert np.all(dropped | kept)  # null is the exact all-zeros map, kept is untouched
    assert abs(dropped.mean() - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_dropout_single_condition():
    c = np.ones((2, 4, 4))
    assert T.cfg_dropout(c, 0.0, np.random.default_rng(0)).shape == (2, 4, 4)


def test_dropout_invalid_probability():
    with pytest.raises(ValueError):
        T.cfg_dropout(np.ones((1, 2, 2, 2)), 1.0, np.random.default_rng(0))


# -- EMA ---------------------------------------------------------------------


def test_ema_scalar_plug_in():
    ema, theta = {"a": np.zeros(1)}, {"a": np.ones(1)}
    T.ema_update(ema, theta, 0.999)
    assert abs(ema["a"][0] - 0.001) < 1e-15


def test_ema_zero_decay_copies():
    rng = np.random.default_rng(0)
    ema, theta = {"a": rng.normal(size=5)}, {"a": rng.normal(size=5)}
    T.ema_update(ema, theta, 0.0)
    np.testing.assert_array_equal(ema["a"], theta["a"])


@pytest.mark.parametrize("gamma", [0.5, 0.9, 0.999])
def test_ema_geometric_contraction(gamma):
    rng = np.random.default_rng(1)
    theta = {"a": rng.normal(size=(3, 3))}
    ema = {"a": rng.normal(size=(3, 3))}
    prev = np.linalg.norm(ema["a"] - theta["a"])
    for _ in range(20):
        T.ema_update(ema, theta, gamma)
        cur = np.linalg.norm(ema["a"] - theta["a"])
        assert abs(cur / prev - gamma) < 1e-9
        prev = cur


def test_ema_mismatch_raises():
    with pytest.raises(T.CheckpointCorruption):
        T.ema_update({"a": np.zeros(2)}, {"a": np.zeros(3)}, 0.9)
    with pytest.raises(T.CheckpointCorruption):
        T.ema_update({"a": np.zeros(2)}, {"b": np.zeros(2)}, 0.9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), gamma=st.floats(0.0, 0.99))
def test_ema_stays_in_convex_hull(seed, gamma):
    rng = np.random.default_rng(seed)
    ema = {"a": rng.normal(size=4)}
    lo, hi = ema["a"].copy(), ema["a"].copy()
    for _ in range(15):
        theta = {"a": rng.normal(size=4)}
        lo, hi = np.minimum(lo, theta["a"]), np.maximum(hi, theta["a"])
        T.ema_update(ema, theta, gamma)
        assert np.all(ema["a"] >= lo - 1e-12) and np.all(ema["a"] <= hi + 1e-12)


# -- AdamW -------------------------------------------------------------------


def test_adamw_zero_gradient_no_decay_unchanged():
    p = {"a": np.array([1.0, -2.0])}
    T.optimizer_step(p, {"a": np.zeros(2)}, 0.1, 0.0, T.AdamWState.zeros_like(p))
    np.testing.assert_array_equal(p["a"], [1.0, -2.0])


def test_adamw_first_step_magnitude():
    p = {"a": np.zeros(3)}
    T.optimizer_step(p, {"a": np.array([0.5, -3.0, 1e-3])}, 0.01, 0.0, T.AdamWState.zeros_like(p))
    np.testing.assert_allclose(p["a"], [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adamw_decoupled_decay():
    p = {"a": np.array([2.0])}
    T.optimizer_step(p, {"a": np.zeros(1)}, 0.1, 0.5, T.AdamWState.zeros_like(p))
    assert p["a"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-15)


def scalar_adamw_trace(theta, lr, steps):
    """Independent scalar AdamW on f = theta^2, written out longhand."""
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = 2 * theta
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= lr * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        out.append(theta)
    return out


def test_adamw_quadratic_matches_scalar_trace():
    p = {"a": np.array([1.0])}
    st_ = T.AdamWState.zeros_like(p)
    got = []
    for _ in range(20):
        T.optimizer_step(p, {"a": 2 * p["a"]}, 0.1, 0.0, st_)
        got.append(p["a"][0])
    ref = scalar_adamw_trace(1.0, 0.1, 20)
    assert max(abs(a - b) for a, b in zip(got, ref)) < 1e-12
    # momentum carries theta past 0 at step 12; before that |theta| strictly decreases
    mags = [1.0] + [abs(x) for x in got[:11]]
    assert all(b < a for a, b in zip(mags, mags[1:]))
    assert got[11] < 0 and abs(got[-1]) < 1.0


def test_adamw_rejects_non_finite():
    p = {"a": np.ones(2)}
    with pytest.raises(T.TrainingError):
        T.optimizer_step(p, {"a": np.array([1.0, np.nan])}, 0.1, 0.0, T.AdamWState.zeros_like(p))
    np.testing.assert_array_equal(p["a"], 1.0)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert T.clip_global_norm(g, 1.0) == 5.0
    assert abs(math.hypot(g["a"][0], g["b"][0]) - 1.0) < 1e-9
    g = {"a": np.array([0.3])}
    T.clip_global_norm(g, 1.0)
    assert g["a"][0] == 0.3


# -- training loop -----------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_data():
    params = S.SceneGenParams(size=16, n_buildings=2, building_min=2, building_max=4)
    return S.build_dataset(params, 4, 2, "srm", seed=3)


TINY_MODEL = M.ModelConfig.lite(base_channels=4)


def test_smoke_one_epoch_writes_decodable_checkpoint(tiny_data, tmp_path):
    tr, _ = tiny_data
    res = T.train(tr, TINY_MODEL, T.TrainConfig(epochs=1, batch_size=2), out_dir=tmp_path)
    state, extra = M.load_checkpoint(tmp_path / "checkpoint.rfck")
    assert extra["epoch"] == 1 and extra["step"] == 2
    for k in state.params:
        assert state.params[k].tobytes() == res.state.params[k].tobytes()
    rows = T.read_log_csv(tmp_path / "train_log.csv")
    assert [int(r["step"]) for r in rows] == [0, 1]
    assert list(rows[0]) == ["step", "loss", "lr", "val_nmse"]


def test_same_seed_identical_loss_trace(tiny_data):
    tr, _ = tiny_data
    cfg = T.TrainConfig(epochs=2, batch_size=2, seed=5)
    a = T.train(tr, TINY_MODEL, cfg)
    b = T.train(tr, TINY_MODEL, cfg)
    assert a.log.losses == b.log.losses
    assert all(a.state.ema[k].tobytes() == b.state.ema[k].tobytes() for k in a.state.ema)


def test_different_seed_different_trace(tiny_data):
    tr, _ = tiny_data
    a = T.train(tr, TINY_MODEL, T.TrainConfig(epochs=1, batch_size=2, seed=1))
    b = T.train(tr, TINY_MODEL, T.TrainConfig(epochs=1, batch_size=2, seed=2))
    assert a.log.losses != b.log.losses


def test_validation_and_periodic_saves(tiny_data, tmp_path):
    tr, te = tiny_data
    cfg = T.TrainConfig(epochs=2, batch_size=4, val_interval=1, save_interval=1, val_samples=2)
    res = T.train(tr, TINY_MODEL, cfg, out_dir=tmp_path, val_dataset=te)
    assert [e for e, _, _ in res.log.val] == [1, 2]
    assert len(res.log.kinetic) == 2
    rows = T.read_log_csv(tmp_path / "train_log.csv")
    assert rows[-1]["val_nmse"] != ""


def test_ema_off_has_no_shadow(tiny_data):
    tr, _ = tiny_data
    res = T.train(tr, TINY_MODEL, T.TrainConfig(epochs=1, batch_size=4, use_ema=False))
    assert res.state.ema is None


def test_mode_mismatch_rejected(tiny_data):
    tr, _ = tiny_data
    with pytest.raises(ValueError, match="condition channels"):
        T.train(tr, M.ModelConfig.lite(base_channels=4, cond_channels=3), T.TrainConfig(epochs=1))


def test_non_finite_loss_keeps_last_checkpoint(tiny_data, tmp_path):
    tr, _ = tiny_data
    T.train(tr, TINY_MODEL, T.TrainConfig(epochs=1, batch_size=4), out_dir=tmp_path)
    before = (tmp_path / "checkpoint.rfck").read_bytes()
    bad = tr.subset(range(len(tr)))
    bad.targets = bad.targets.copy()
    bad.targets[0, 0, 0] = np.nan
    with pytest.raises((T.TrainingError, ValueError)):
        T.train(bad, TINY_MODEL, T.TrainConfig(epochs=1, batch_size=4), out_dir=tmp_path)
    assert (tmp_path / "checkpoint.rfck").read_bytes() == before
    M.load_checkpoint(tmp_path / "checkpoint.rfck")


def test_log_requires_increasing_steps():
    log = T.TrainLog()
    log.record(0, 1.0, 0.1)
    with pytest.raises(ValueError):
        log.record(0, 1.0, 0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(p_uncond=1.0)
    with pytest.raises(ValueError):
        T.TrainConfig(ema_decay=1.0)
    with pytest.raises(ValueError):
        T.TrainConfig(lr=0)
