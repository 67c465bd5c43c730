import math

import numpy as np
import pytest

from grokwl import optim
from grokwl import transformer as tf
from grokwl.optim import (AdamWConfig, DivergenceError, Entropy1D, TrainRecord, WandConfig)


def rec(step, train_acc, test_acc):
    return TrainRecord(step, 1.0, 1.0, train_acc, test_acc, 10.0)


def test_adamw_step_by_hand():
    cfg = AdamWConfig(learning_rate=0.1, weight_decay=0.5, beta1=0.9, beta2=0.98, epsilon=1e-8)
    p, g = np.array([1.0, -2.0]), np.array([0.5, 0.0])
    new, m, v = optim.adamw_step(p, g, np.zeros(2), np.zeros(2), cfg, 1)
    np.testing.assert_allclose(m, [0.05, 0.0])
    np.testing.assert_allclose(v, [0.02 * 0.25, 0.0])
    # bias-corrected m/sqrt(v) is sign(g) on step 1; decay factor 1 - 0.1*0.5
    np.testing.assert_allclose(new, [0.95 - 0.1 * 0.5 / (0.5 + 1e-8), -1.9], rtol=1e-14)
    assert np.array_equal(p, [1.0, -2.0])


def test_adamw_second_step_bias_correction():
    cfg = AdamWConfig(learning_rate=0.01, weight_decay=0.0)
    p, m, v = np.array([0.0]), np.zeros(1), np.zeros(1)
    p, m, v = optim.adamw_step(p, np.array([1.0]), m, v, cfg, 1)
    p, m, v = optim.adamw_step(p, np.array([-1.0]), m, v, cfg, 2)
    m_hat = (0.9 * 0.1 - 0.1) / (1 - 0.81)
    v_hat = (0.98 * 0.02 + 0.02) / (1 - 0.98 ** 2)
    p1 = -0.01 / (1.0 + 1e-8)
    assert p[0] == pytest.approx(p1 - 0.01 * m_hat / (math.sqrt(v_hat) + 1e-8), rel=1e-12)


def test_adamw_zero_decay_zero_grad_is_identity():
    cfg = AdamWConfig(weight_decay=0.0)
    p = np.array([0.3, -0.2])
    new, _, _ = optim.adamw_step(p, np.zeros(2), np.zeros(2), np.zeros(2), cfg, 1)
    np.testing.assert_array_equal(new, p)


def test_adamw_fixed_norm():
    cfg = AdamWConfig(learning_rate=0.05, fixed_norm=30.0)
    p = np.ones(9) * 10
    new, _, _ = optim.adamw_step(p, np.arange(9.0), np.zeros(9), np.zeros(9), cfg, 1)
    assert tf.weight_norm(new) == pytest.approx(30.0, abs=1e-9)


def test_adamw_rejects_bad_input():
    cfg = AdamWConfig()
    with pytest.raises(ValueError):
        optim.adamw_step(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2), cfg, 1)
    with pytest.raises(ValueError):
        optim.adamw_step(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2), cfg, 0)
    with pytest.raises(DivergenceError):
        optim.adamw_step(np.zeros(2), np.array([np.nan, 0]), np.zeros(2), np.zeros(2), cfg, 1)
    for bad in (dict(learning_rate=0), dict(weight_decay=-1), dict(beta1=1.0), dict(fixed_norm=0)):
        with pytest.raises(ValueError):
            AdamWConfig(**bad)


def test_grokking_gap_and_first_step():
    recs = [rec(0, 0.1, 0.0), rec(1, 0.995, 0.1), rec(2, 1.0, 0.5), rec(3, 1.0, 0.96)]
    assert optim.first_step(recs, "train_acc", 0.99) == 1
    assert optim.grokking_gap(recs) == 2
    assert optim.grokking_gap(recs[:3]) is None


def test_records_csv_roundtrip(tmp_path):
    recs = [TrainRecord(0, 4.2, 4.3, 0.01, 0.02, 22.5), TrainRecord(1, 1 / 3, 0.1, 0.5, 0.25, 1e-7)]
    path = optim.write_records_csv(tmp_path / "r.csv", recs)
    assert path.read_text().splitlines()[0] == "step,train_loss,test_loss,train_acc,test_acc,weight_norm"
    assert optim.read_records_csv(path) == recs


def test_train_adamw_records_and_test_isolation(tiny_split, tiny_model):
    cfg = AdamWConfig(learning_rate=1e-2, steps=5)
    recs = optim.train_adamw(tiny_split, tiny_model, cfg, 0)
    assert [r.step for r in recs] == list(range(6))
    assert recs[0].train_loss > recs[-1].train_loss
    # replacing every test target leaves the training trajectory untouched
    from dataclasses import replace
    from grokwl.modular_tasks import Example
    fake_test = tuple(Example(e.x, e.y, (e.answer + 1) % 7) for e in tiny_split.test)
    other = optim.train_adamw(replace(tiny_split, test=fake_test), tiny_model, cfg, 0)
    assert [(r.train_loss, r.weight_norm) for r in recs] == [(r.train_loss, r.weight_norm) for r in other]
    assert [r.test_loss for r in recs] != [r.test_loss for r in other]


def test_train_adamw_fixed_norm_holds_throughout(tiny_split, tiny_model):
    recs = optim.train_adamw(tiny_split, tiny_model, AdamWConfig(steps=4, fixed_norm=12.0), 0)
    assert all(r.weight_norm == pytest.approx(12.0, abs=1e-9) for r in recs)


def test_train_adamw_resume_identical(tiny_split, tiny_model):
    cfg = AdamWConfig(learning_rate=1e-2, steps=8)
    full = optim.train_adamw(tiny_split, tiny_model, cfg, 0)
    saved = {}
    optim.train_adamw(tiny_split, tiny_model, AdamWConfig(learning_rate=1e-2, steps=3), 0,
                      on_step=lambda t, s: saved.__setitem__(t, s))
    rest = optim.train_adamw(tiny_split, tiny_model, cfg, state=saved[3])
    assert full[:3] + rest == full


def test_train_adamw_stop_hook(tiny_split, tiny_model):
    recs = optim.train_adamw(tiny_split, tiny_model, AdamWConfig(steps=50), 0,
                             stop=lambda rs: len(rs) == 3)
    assert len(recs) == 3


def test_wl_factor_and_entropy1d():
    assert optim.wl_factor(500, 0.5, 500) == 0.5
    e = Entropy1D.empty(-10, 2.5, 125)
    assert e.width == pytest.approx(0.1)
    assert e.index(-10.0) == 0 and e.index(2.5) == 124 and e.index(99) == 124
    e.values[:] = np.arange(125) * 0.1
    e.visits[:] = 1
    assert e.gradient(-5.0) == pytest.approx(1.0)
    assert e.gradient(-10.0) == pytest.approx(1.0)
    e.visits[51] = 0
    assert e.gradient(-5.0) == pytest.approx((0.0 - 4.9) / 0.2)


def test_gauss_bin_mass_normalised_and_delta():
    edges = np.linspace(-10, 2.5, 126)
    assert optim._gauss_bin_mass(edges, -3.33, 0.02).sum() == pytest.approx(1.0, abs=1e-12)
    assert optim._gauss_bin_mass(edges, 2.5, 0.3).sum() == pytest.approx(1.0, abs=1e-12)
    d = optim._gauss_bin_mass(edges, -3.33, 0.0)
    assert d.sum() == 1.0 and d[66] == 1.0


def test_entropy_update_deposits_schedule():
    cfg = WandConfig(deposit_width=0.0)
    st = optim.init_wand(tf.ModelConfig(p=5, d_model=8, n_heads=2, d_head=4, d_mlp=8), cfg)
    for _ in range(3):
        optim.wand_1d_entropy_update(st, -1.0)
    k = st.entropy1d.index(-1.0)
    expected = sum(optim.wl_factor(t, 0.5, 500) for t in (1, 2, 3))
    assert st.entropy1d.values[k] == pytest.approx(expected)
    assert st.t == 3 and st.entropy1d.visits[k] == 3


def _state(cfg, n=4):
    model = tf.ModelConfig(p=5, d_model=8, n_heads=2, d_head=4, d_mlp=8)
    st = optim.init_wand(model, cfg)
    st.params = st.params.with_flat(np.zeros(st.params.flat.size))
    st.velocities[:] = 0.0
    return st


def test_wand_momentum_descent_reduction():
    # constant dS/dlnL = c, no friction, no noise: v <- v - c g dt, theta <- theta + dt v
    cfg = WandConfig(learning_rate=0.5, friction=0.0, kT=0.0)
    st = _state(cfg)
    c = 2.0
    st.entropy1d.values[:] = c * 0.5 * (st.entropy1d.edges[:-1] + st.entropy1d.edges[1:])
    st.entropy1d.visits[:] = 1
    g = np.zeros(st.params.flat.size)
    g[0] = 1.0
    optim.wand_step(st, g, -3.0)
    assert st.velocities[0] == pytest.approx(-c * 0.5)
    assert st.params.flat[0] == pytest.approx(-c * 0.25)
    optim.wand_step(st, g, -3.0)
    assert st.velocities[0] == pytest.approx(-c)
    assert st.params.flat[0] == pytest.approx(-c * 0.75)


def test_wand_bias_force_above_threshold():
    cfg = WandConfig(learning_rate=1.0, friction=0.0, kT=0.0)
    st = _state(cfg)
    g = np.zeros(st.params.flat.size)
    g[1] = 1.0
    optim.wand_step(st, g, 1.0)
    assert st.velocities[1] == pytest.approx(-2.0 * (1.0 - math.log(2.0)))
    st2 = _state(cfg)
    optim.wand_step(st2, g, 0.0)
    assert st2.velocities[1] == 0.0


def test_wand_zero_friction_has_no_noise():
    cfg = WandConfig(friction=0.0, kT=1.0)
    st = _state(cfg)
    optim.wand_step(st, np.zeros(st.params.flat.size), -5.0)
    assert np.all(st.velocities == 0.0)


def test_wand_force_clip():
    cfg = WandConfig(learning_rate=1.0, friction=0.0, kT=0.0, force_clip=1.0)
    st = _state(cfg)
    g = np.full(st.params.flat.size, 100.0)
    optim.wand_step(st, g, 2.0)
    assert np.linalg.norm(st.velocities) == pytest.approx(1.0)


def test_wand_thermostat_variance():
    cfg = WandConfig(friction=0.5, kT=1.0)
    st = _state(cfg)
    zero = np.zeros(st.params.flat.size)
    acc = []
    for t in range(2000):
        optim.wand_step(st, zero, -5.0)
        if t > 20:
            acc.append(np.mean(st.velocities ** 2))
    assert np.mean(acc) == pytest.approx(1.0, rel=0.05)


def test_wand_config_validation():
    for bad in (dict(learning_rate=0), dict(friction=2.5), dict(lnl_max=-20), dict(t_WL=0)):
        with pytest.raises(ValueError):
            WandConfig(**bad)


def test_train_wand_resume_identical_and_test_isolation(tiny_split, tiny_model):
    cfg = WandConfig(steps=6, learning_rate=1e-2)
    full = optim.train_wand(tiny_split, tiny_model, cfg, 0)
    assert [r.step for r in full] == list(range(7))
    saved = {}
    optim.train_wand(tiny_split, tiny_model, WandConfig(steps=2, learning_rate=1e-2), 0,
                     on_step=lambda t, s: saved.__setitem__(t, (s.params.copy(), s.velocities.copy(),
                                                               s.entropy1d, s.rng)))
    import copy
    params, vel, ent, rng = saved[2]
    st = optim.WandState(params, vel, copy.deepcopy(ent), cfg, rng, 2)
    rest = optim.train_wand(tiny_split, tiny_model, cfg, state=st)
    assert full[:2] + rest == full

    from dataclasses import replace
    from grokwl.modular_tasks import Example
    fake = tuple(Example(e.x, e.y, (e.answer + 2) % 7) for e in tiny_split.test)
    other = optim.train_wand(replace(tiny_split, test=fake), tiny_model, cfg, 0)
    assert [r.weight_norm for r in other] == [r.weight_norm for r in full]


def test_train_wand_divergence_keeps_records(tiny_split, tiny_model):
    cfg = WandConfig(steps=5)
    st = optim.init_wand(tiny_model, cfg)
    st.params.flat[0] = np.nan
    with pytest.raises(DivergenceError) as info:
        optim.train_wand(tiny_split, tiny_model, cfg, state=st)
    assert info.value.records == []
