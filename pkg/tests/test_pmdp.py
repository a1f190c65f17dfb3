import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pessimlab.dynamics import EnsembleModel, ModelConfig
from pessimlab.envlab import make_env
from pessimlab.penalty import ALL_KINDS, PenaltyKind
from pessimlab.planner import UniformPolicy
from pessimlab.pmdp import (PenaltyWeightTuner, PMDPConfig, RolloutRecord, auto_lambda_update, model_return,
                            penalized_return, records_read, records_write, rollout)


def uniform(ds):
    return UniformPolicy(-np.ones(ds.d_a), np.ones(ds.d_a))


def test_config_invariants():
    for bad in (dict(lam=-1.0), dict(horizon=0), dict(lambda_mode="auto", constraint=0.0),
                dict(state_clip=(1.0, -1.0)), dict(state_clip=(-np.inf, 1.0)), dict(gamma=1.0)):
        with pytest.raises(ValueError):
            PMDPConfig(**bad)
    assert PMDPConfig(lambda_mode="auto", lam=7.0).initial_lambda == 1.0


def _record(r_tilde, r_hat=None):
    n = len(r_tilde)
    r_hat = np.asarray(r_tilde if r_hat is None else r_hat, float)
    return RolloutRecord(np.zeros((n, 1)), np.zeros((n, 1)), np.zeros((n, 1)), r_hat, np.zeros(n),
                         np.asarray(r_tilde, float), np.zeros(n), np.zeros(n, int), 0)


def test_penalized_return_geometric():
    assert penalized_return(_record([1.0, 1.0, 1.0]), 0.5) == 1.75


def test_penalized_return_recomputation():
    rng = np.random.default_rng(0)
    r = rng.normal(size=17)
    expect = sum(0.97 ** t * r[t] for t in range(17))
    assert penalized_return(_record(r), 0.97) == pytest.approx(expect, rel=1e-12)


def test_lambda_zero_identity(small_model, small_medium):
    cfg = PMDPConfig(penalty_kind="ensemble_std", lam=0.0, horizon=4, rollouts_per_batch=8)
    recs = rollout(small_model, uniform(small_medium), small_medium, cfg, np.random.default_rng(0))
    for r in recs:
        assert np.array_equal(r.penalized_reward, r.model_reward)
        assert penalized_return(r, 0.99) == model_return(r, 0.99)


def test_identical_zero_variance_members_charge_nothing(small_model, small_medium):
    W = [(np.repeat(W[:1], W.shape[0], 0), np.repeat(b[:1], b.shape[0], 0)) for W, b in small_model.params]
    same = EnsembleModel(small_model.config, W, small_model.elite_mask, small_model.input_mean,
                         small_model.input_std, small_model.d_s, small_model.d_a)
    cfg = PMDPConfig(penalty_kind="max_pairwise_diff", lam=5.0, horizon=3, rollouts_per_batch=4)
    for r in rollout(same, uniform(small_medium), small_medium, cfg, np.random.default_rng(1)):
        assert (r.penalty == 0).all() and np.array_equal(r.penalized_reward, r.model_reward)


def test_record_invariants_and_pessimism(small_model, small_medium):
    cfg = PMDPConfig(penalty_kind="max_aleatoric", lam=2.5, horizon=6, rollouts_per_batch=100,
                     state_clip=(-2.0, 2.0))
    recs = rollout(small_model, uniform(small_medium), small_medium, cfg, np.random.default_rng(2))
    assert len(recs) == 100
    for r in recs:
        n = len(r)
        assert all(len(x) == n for x in (r.states, r.actions, r.next_states, r.penalty, r.member_index))
        assert np.array_equal(r.penalized_reward, r.model_reward - r.lam * r.penalty)
        assert (r.penalty >= 0).all()
        assert penalized_return(r, 0.99) <= model_return(r, 0.99)
        assert (np.abs(r.next_states) <= 2.0).all()
        assert set(r.member_index) <= set(small_model.elite_indices.tolist())
        assert set(r.penalties) == set(ALL_KINDS)
        assert np.array_equal(r.penalties[PenaltyKind.MAX_ALEATORIC], r.penalty)


def test_rollout_deterministic(small_model, small_medium):
    cfg = PMDPConfig(penalty_kind="ll_var", horizon=3, rollouts_per_batch=5)
    a = rollout(small_model, uniform(small_medium), small_medium, cfg, np.random.default_rng(3))
    b = rollout(small_model, uniform(small_medium), small_medium, cfg, np.random.default_rng(3))
    for x, y in zip(a, b):
        assert np.array_equal(x.next_states, y.next_states) and np.array_equal(x.penalty, y.penalty)


def test_non_finite_output_truncates():
    class Exploding:
        d_s, d_a = 1, 1

        def step(self, s, a, rng, need_penalty=True, record_kinds=()):
            from pessimlab.pmdp import StepResult
            sn = s + 1.0
            sn[0] = np.nan
            z = np.zeros(len(s))
            return StepResult(sn, z, z, np.zeros(len(s), int), {})

    from pessimlab.core import Dataset
    ds = Dataset(np.zeros((3, 1)), np.zeros((3, 1)), np.zeros(3), np.zeros((3, 1)), np.zeros(3, bool))
    cfg = PMDPConfig(horizon=4, rollouts_per_batch=3)
    recs = rollout(Exploding(), uniform(ds), ds, cfg, np.random.default_rng(0), record_kinds=())
    assert recs[0].truncated and len(recs[0]) == 0
    assert all(not r.truncated and len(r) == 4 for r in recs[1:])


def test_oracle_rollout_has_zero_penalty(cliffcar, small_medium):
    cfg = PMDPConfig(lam=3.0, horizon=5, rollouts_per_batch=4, state_clip=tuple(map(tuple, cliffcar.spec.state_bounds)))
    pol = UniformPolicy(cliffcar.spec.action_low, cliffcar.spec.action_high)
    for r in rollout(cliffcar, pol, small_medium, cfg, np.random.default_rng(0)):
        assert (r.penalty == 0).all() and (r.member_index == -1).all()


def test_auto_lambda_fixed_point_exact():
    lam = 2.0
    u = np.array([0.25, 0.75])  # mean(lam * u) == 1
    assert auto_lambda_update(math.log(lam), u, 1.0, 0.3) == math.log(lam)


def test_auto_lambda_one_step():
    new = auto_lambda_update(0.0, np.array([2.0]), 1.0, 0.1)
    assert new == pytest.approx(-0.1, abs=1e-15) and math.exp(new) == pytest.approx(0.904837, abs=1e-6)


def test_auto_lambda_direction_and_errors():
    assert auto_lambda_update(0.0, [0.1], 1.0, 0.5) > 0
    assert auto_lambda_update(0.0, [3.0], 1.0, 0.5) < 0
    with pytest.raises(ValueError, match="non-finite"):
        auto_lambda_update(0.0, [np.inf], 1.0, 0.5)
    with pytest.raises(ValueError):
        auto_lambda_update(0.0, [], 1.0, 0.5)


def simulate_auto_lambda(constraint=1.0, updates=5000, batch=64, alpha=0.05, seed=0):
    rng = np.random.default_rng(seed)
    tuner = PenaltyWeightTuner(PMDPConfig(lambda_mode="auto", constraint=constraint, alpha=alpha))
    charges = []
    for _ in range(updates):
        u = rng.uniform(0.5, 1.5, size=batch)
        charges.append(tuner.lam * u.mean())
        tuner.update(u)
    return tuner, np.array(charges)


def test_auto_lambda_converges_on_stationary_stream():
    tuner, charges = simulate_auto_lambda()
    assert abs(charges[-1000:].mean() - 1.0) < 0.05
    assert tuner.lam == pytest.approx(1.0, rel=0.05)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 5.0), st.integers(0, 1000))
def test_auto_lambda_stationarity_property(constraint, seed):
    _, charges = simulate_auto_lambda(constraint, updates=3000, seed=seed)
    assert abs(charges[-500:].mean() - constraint) / constraint < 0.05


def test_fixed_mode_tuner_is_static():
    t = PenaltyWeightTuner(PMDPConfig(lam=3.0))
    assert t.update(np.ones(5) * 100) == pytest.approx(3.0)


def test_records_round_trip(tmp_path, small_model, small_medium):
    cfg = PMDPConfig(penalty_kind="loo_kl", horizon=3, rollouts_per_batch=4)
    recs = rollout(small_model, uniform(small_medium), small_medium, cfg, np.random.default_rng(4))
    records_write(recs, tmp_path / "r", {"note": 1})
    back, meta = records_read(tmp_path / "r")
    assert meta == {"note": 1}
    for a, b in zip(recs, back):
        assert np.array_equal(a.states, b.states) and np.array_equal(a.penalized_reward, b.penalized_reward)
        assert np.array_equal(a.member_index, b.member_index) and a.start_index == b.start_index
        for k in a.penalties:
            assert np.array_equal(a.penalties[k], b.penalties[k])
