"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record_criterion
import oracles
from pessimlab import stats
from pessimlab.cli import main
from pessimlab.core import EnsemblePrediction
from pessimlab.dynamics import ModelConfig, train_ensemble
from pessimlab.envlab import ENV_IDS, generate_dataset, make_env
from pessimlab.penalty import (PenaltyContext, PenaltyKind as K, compute_penalty, gaussian_kl, mixture_moments,
                               penalty_batch)
from pessimlab.planner import CEMConfig
from pessimlab.pmdp import PenaltyWeightTuner, PMDPConfig, auto_lambda_update, records_read
from pessimlab.protocols import ood_event_report, transfer_calibration, true_model_based_records
from pessimlab.search import SINGLE_SETUP, BASELINE, TrialBudget, single_setup_run


def _cli(tmp, command, cfg, out):
    path = Path(tmp) / f"{out}.config.json"
    path.write_text(json.dumps(cfg))
    return main([command, "--config", str(path), "--out", str(Path(tmp) / out)])


def test_criterion_01_closed_form_penalties():
    t0 = time.perf_counter()
    errs = {}
    _, var = mixture_moments(np.array([[1.0], [2.0], [3.0]]), np.array([[0.5], [1.0], [1.5]]))
    errs["mixture 5/3"] = abs(var[0] - 5 / 3)
    p = EnsemblePrediction.from_arrays(np.array([[0.0, 0.0], [3.0, 4.0]]), np.ones((2, 2)))
    errs["pairwise 5"] = abs(compute_penalty(K.MAX_PAIRWISE_DIFF, p) - 5.0)
    errs["kl 0.5"] = abs(float(gaussian_kl(np.array([1.0]), np.array([1.0]), np.array([0.0]), np.array([1.0]))) - 0.5)
    kl = float(gaussian_kl(np.array([0.0]), np.array([4.0]), np.array([0.0]), np.array([1.0])))
    errs["kl 1.5-ln2"] = abs(kl - (1.5 - math.log(2.0)))
    rng = np.random.default_rng(0)
    same = EnsemblePrediction.from_arrays(np.tile(rng.normal(size=3), (5, 1)), np.tile(rng.uniform(0.1, 2, 3), (5, 1)))
    for kind in (K.MAX_PAIRWISE_DIFF, K.LL_VAR, K.LOO_KL):
        errs[f"identical {kind.value}"] = abs(compute_penalty(kind, same, PenaltyContext(seed=1)))
    # identical members carry no epistemic part: std/var reduce to the aleatoric mean exactly
    _, var = mixture_moments(same)
    errs["identical var_star"] = float(np.max(np.abs(var - same.variances.mean(axis=0))))
    errs["identical ensemble_var"] = abs(compute_penalty(K.ENSEMBLE_VAR, same) - np.linalg.norm(var))
    errs["identical ensemble_std"] = abs(compute_penalty(K.ENSEMBLE_STD, same) - np.linalg.norm(np.sqrt(var)))
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-9 and elapsed < 1.0 and abs(kl - 0.80685) < 1e-5
    assert record_criterion(1, ok, f"max abs error {worst:.2e}, {elapsed:.3f}s")


def test_criterion_02_mixture_dual_form():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        N, d = int(rng.integers(1, 16)), int(rng.integers(1, 8))
        scale = 10 ** rng.uniform(-3, 3)
        m = rng.normal(size=(N, d)) * scale
        v = rng.uniform(0.01, 2.0, size=(N, d)) * scale ** 2
        _, var = mixture_moments(m, v)
        raw = (v + m * m).mean(axis=0) - m.mean(axis=0) ** 2  # second-moment form
        dual = v.mean(axis=0) + ((m - m.mean(axis=0)) ** 2).mean(axis=0)
        worst = max(worst, float(np.max(np.abs(var - dual) / dual)))
        assert np.allclose(raw, dual, rtol=1e-6)
    assert record_criterion(2, worst < 1e-8, f"max relative error {worst:.2e} over 1000 ensembles")


def test_criterion_03_nll_gradient():
    worst = max(oracles.finite_difference_check(np.random.default_rng(seed)) for seed in range(100))
    assert record_criterion(3, worst < 1e-4, f"max relative error {worst:.2e} over 100 instances")


def _instance(rng, n):
    if rng.random() < 0.5:
        return rng.integers(0, max(2, n // 3), size=n).astype(float)
    return rng.normal(size=n)


def test_criterion_04_statistics_brute_force():
    rng = np.random.default_rng(4)
    mismatches, done = 0, 0
    while done < 50:
        n = int(rng.integers(2, 201))
        x, y = _instance(rng, n), _instance(rng, n)
        labels = rng.random(n) < rng.uniform(0.1, 0.9)
        if len(set(x)) < 2 or len(set(y)) < 2 or labels.all() or not labels.any():
            continue
        tasks = int(rng.integers(1, 5))
        xs = [_instance(rng, int(rng.integers(1, 40))) for _ in range(tasks)]
        ys = [_instance(rng, int(rng.integers(1, 40))) for _ in range(tasks)]
        mismatches += stats.spearman(x, y) != oracles.spearman(x.tolist(), y.tolist())
        mismatches += stats.roc_auc(x, labels) != oracles.auc(x.tolist(), labels.tolist())
        mismatches += stats.average_precision(x, labels) != oracles.average_precision(x.tolist(), labels.tolist())
        mismatches += stats.probability_of_improvement(xs, ys) != oracles.prob_improvement(
            [a.tolist() for a in xs], [b.tolist() for b in ys])
        done += 1
    assert record_criterion(4, mismatches == 0, f"{mismatches} inexact results over 50 instances x 4 statistics")


def test_criterion_05_replay_exactness(tmp_path):
    worst, steps = 0.0, 0
    for env_id in ENV_IDS:
        d = tmp_path / env_id
        d.mkdir()
        assert _cli(d, "gen-data", {"env_id": env_id, "tiers": ["medium"], "size": 400, "seed": 3}, "data") == 0
        ds = str(d / "data" / f"{env_id}-medium")
        assert _cli(d, "run-pmdp", {"env_id": env_id, "dataset": ds, "model": "oracle",
                                    "pmdp": {"horizon": 20, "rollouts_per_batch": 16},
                                    "policy": {"type": "uniform"}, "batches": 2}, "pmdp") == 0
        assert _cli(d, "eval-replay", {"env_id": env_id, "dataset": ds,
                                       "rollouts": str(d / "pmdp" / "rollouts")}, "replay") == 0
        records, _ = records_read(d / "replay" / "replayed")
        mse = np.concatenate([r.true_mse for r in records])
        worst, steps = max(worst, float(np.abs(mse).max())), steps + mse.size
    assert record_criterion(5, worst == 0.0, f"max true_mse {worst!r} over {steps} replayed steps on {len(ENV_IDS)} envs")


# penalties measured on the same (state) dimensions as the squared state error
STATE_CTX = dict(dims_used="state_only")


@pytest.mark.slow
def test_criterion_06_calibration_ordering():
    lines, ok = [], True
    for env_id in ("pointmass2d", "cliffcar"):
        env = make_env(env_id)
        t0 = time.perf_counter()
        for seed in range(3):
            train = generate_dataset(env, "medium", 5000, seed)
            evalset = generate_dataset(env, "random", 2000, seed + 100)
            model = train_ensemble(train, ModelConfig(seed=seed))
            rep = transfer_calibration(model, evalset, ctx=PenaltyContext(**STATE_CTX, seed=seed), seed=seed)
            rho = {k: v["spearman"] for k, v in rep.statistics.items()}
            good = min(rho["ensemble_std"], rho["ensemble_var"]) > max(rho["ll_var"], rho["loo_kl"])
            ok &= good
            lines.append(f"{env_id}/{seed}: std {rho['ensemble_std']:.3f} var {rho['ensemble_var']:.3f} "
                         f"llvar {rho['ll_var']:.3f} lookl {rho['loo_kl']:.3f} {'ok' if good else 'no'}")
        ok &= time.perf_counter() - t0 < 600
    assert record_criterion(6, ok, "; ".join(lines))


@pytest.mark.slow
def test_criterion_07_model_count_stability():
    lines, ok = [], True
    for env_id in ("pointmass2d", "cliffcar"):
        env = make_env(env_id)
        wins = 0
        for seed in range(3):
            train = generate_dataset(env, "medium", 3000, seed)
            evalset = generate_dataset(env, "random", 1000, seed + 100)
            model = train_ensemble(train, ModelConfig(n_total=15, n_elite=10, epochs=40, seed=seed))
            spread = {}
            for kind in (K.ENSEMBLE_STD, K.MAX_ALEATORIC):
                med = {}
                for n in (2, 7, 15):
                    sub = model.subset(range(n))
                    mu, var = sub.predict_arrays(evalset.states, evalset.actions)
                    med[n] = float(np.median(penalty_batch(kind, mu, var, PenaltyContext(seed=seed), sub.elite_mask)))
                spread[kind] = abs(med[15] - med[2]) / med[7]
            wins += spread[K.ENSEMBLE_STD] < spread[K.MAX_ALEATORIC]
            lines.append(f"{env_id}/{seed}: std {spread[K.ENSEMBLE_STD]:.3f} vs aleatoric {spread[K.MAX_ALEATORIC]:.3f}")
        ok &= wins >= 2
    assert record_criterion(7, ok, "; ".join(lines))


@pytest.mark.slow
def test_criterion_08_ood_detection():
    env = make_env("cliffcar")
    aucs, oracle_aucs = [], []
    for seed in range(3):
        ds = generate_dataset(env, "medium", 10000, seed)
        model = train_ensemble(ds, ModelConfig(n_total=7, n_elite=5, epochs=40, seed=seed))
        cem = CEMConfig(plan_horizon=8, population=32, elite_frac=0.2, iterations=3)
        records, _ = true_model_based_records(model, env, ds, cem, horizon=20, rollouts=16, seed=seed,
                                              kinds=[K.ENSEMBLE_STD], ctx=PenaltyContext(**STATE_CTX, seed=seed))
        rep = ood_event_report(records, percentiles=(90,), kinds=[K.ENSEMBLE_STD], error_types=("dynamics",))
        aucs.append(rep.entries[(90, "dynamics", "ensemble_std")]["auc"])
        oracle_aucs.append(rep.entries[(90, "dynamics", "true_error")]["auc"])
    ok = min(aucs) >= 0.7 and all(a == 1.0 for a in oracle_aucs)
    assert record_criterion(8, ok, f"EnsembleStd AUC {[round(a, 3) for a in aucs]}, true-error AUC {oracle_aucs}")


def test_criterion_09_auto_lambda():
    rng = np.random.default_rng(9)
    tuner = PenaltyWeightTuner(PMDPConfig(lambda_mode="auto", constraint=1.0, alpha=0.05))
    charges = []
    for _ in range(5000):
        u = rng.uniform(0.5, 1.5, size=64)
        charges.append(tuner.lam * u.mean())
        tuner.update(u)
    rel = abs(np.mean(charges[-1000:]) - 1.0)
    fixed_point = auto_lambda_update(math.log(2.0), np.array([0.25, 0.75]), 1.0, 0.3) == math.log(2.0)
    ok = rel < 0.05 and fixed_point
    assert record_criterion(9, ok, f"relative charge error {rel:.4f} after 5000 updates, fixed point exact: {fixed_point}")


@pytest.mark.slow
def test_criterion_10_single_setup_improvement():
    t0 = time.perf_counter()
    tasks = []
    for env_id in ENV_IDS:
        env = make_env(env_id)
        for tier in ("medium", "mixed"):
            tasks.append((env_id, generate_dataset(env, tier, 5000, 0)))
    res = single_setup_run(tasks, range(5), TrialBudget(), SINGLE_SETUP, BASELINE)
    single, base = res.per_env["single"], res.per_env["baseline"]
    env_wins = sum(single[e] >= base[e] for e in single)
    poi = res.report.probability_of_improvement.point
    elapsed = time.perf_counter() - t0
    ok = env_wins >= 2 and poi > 0.5 and elapsed < 7200
    detail = ", ".join(f"{e} {single[e]:.1f} vs {base[e]:.1f}" for e in single)
    assert record_criterion(10, ok, f"{detail}; P(improve) {poi:.3f} over {len(tasks)} tasks; {elapsed / 60:.1f} min")


def _pipeline(root: Path, monkeypatch):
    monkeypatch.chdir(root)
    steps = [
        ("gen-data", {"env_id": "pointmass2d", "tiers": ["medium", "random"], "size": 500, "seed": 11}, "data"),
        ("train-dynamics", {"dataset": "data/pointmass2d-medium", "model": {"n_total": 4, "n_elite": 3,
                                                                            "hidden_sizes": [32], "epochs": 5}}, "model"),
        ("eval-transfer", {"model": "model/model.bin", "dataset": "data/pointmass2d-random", "likelihood": True},
         "transfer"),
        ("run-pmdp", {"env_id": "pointmass2d", "dataset": "data/pointmass2d-medium", "model": "model/model.bin",
                      "pmdp": {"horizon": 8, "rollouts_per_batch": 8, "lambda_mode": "auto"},
                      "policy": {"type": "cem", "cem": {"plan_horizon": 3, "population": 16, "iterations": 2}},
                      "batches": 2}, "pmdp"),
        ("eval-replay", {"env_id": "pointmass2d", "dataset": "data/pointmass2d-medium",
                         "rollouts": "pmdp/rollouts"}, "replay"),
        ("eval-ood", {"rollouts": "replay/replayed", "min_steps": 50}, "ood"),
        ("sweep", {"env_id": "pointmass2d", "datasets": ["data/pointmass2d-medium"], "strategy": "halving(3, 3)",
                   "space": {"horizon_range": [1, 3], "n_models_range": [2, 3]},
                   "budget": {"iterations": 3, "final_k": 1, "eval_steps": 10, "model_epochs": 2,
                              "rollouts_per_batch": 4, "population": 8, "hidden_sizes": [16]}}, "sweep"),
        ("report", {"inputs": ["transfer", "replay", "ood"]}, "report"),
    ]
    for command, cfg, out in steps:
        Path(f"{out}.json").write_text(json.dumps(cfg))
        assert main([command, "--config", f"{out}.json", "--out", out, "--seed", "5"]) == 0
    return [out for _, _, out in steps]


def test_criterion_11_determinism(tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    outs = _pipeline(a, monkeypatch)
    _pipeline(b, monkeypatch)
    differing = []
    for out in outs:
        man_a, man_b = (d / out / "manifest.json" for d in (a, b))
        if man_a.read_bytes() != man_b.read_bytes():
            differing.append(f"{out}/manifest.json")
        for f in json.loads(man_a.read_text())["files"]:
            if (a / out / f["name"]).read_bytes() != (b / out / f["name"]).read_bytes():
                differing.append(f"{out}/{f['name']}")
    n_files = sum(len(json.loads((a / o / "manifest.json").read_text())["files"]) + 1 for o in outs)
    assert record_criterion(11, not differing, f"{n_files} files compared across {len(outs)} commands; "
                                               f"differing: {differing or 'none'}")
