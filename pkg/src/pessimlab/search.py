"""Hyperparameter search over penalty kind, penalty weight, horizon and model count.

A trial trains an ensemble on each dataset, tunes the penalty weight over a
number of model-rollout batches and drives the true environment with a
penalised CEM planner.  Its objective is the mean normalised return of the
final evaluation batches.  Strategies: a declared grid, seeded random
sampling, and successive halving.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np

from . import stats
from .core import Dataset, dumps_json
from .dynamics import ModelConfig, train_ensemble
from .envlab import OracleEnv, calibrate_reference_returns, make_env
from .penalty import ALL_KINDS, PenaltyContext, PenaltyKind
from .planner import CEMConfig, CEMPolicy, normalized_score, run_episodes
from .pmdp import ModelDynamics, OracleDynamics, PenaltyWeightTuner, PMDPConfig, model_return, penalized_return, rollout

LAMBDA_BOUNDS = (1.0, 100.0)
CONSTRAINT_BOUNDS = (0.1, 10.0)  # open below, closed above
HORIZON_BOUNDS = (1, 50)
MODELS_BOUNDS = (1, 15)


def elite_count(n_models: int) -> int:
    """Five of seven, generalised: ``max(1, floor(5 N / 7))``."""
    return max(1, (5 * n_models) // 7)


@dataclass(frozen=True)
class TrialConfig:
    penalty: PenaltyKind = PenaltyKind.ENSEMBLE_STD
    lambda_mode: str = "fixed"
    lam: float = 1.0
    constraint: float = 1.0
    horizon: int = 5
    n_models: int = 7
    n_elite: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "penalty", PenaltyKind.parse(self.penalty))
        if self.lambda_mode not in ("fixed", "auto"):
            raise ValueError("lambda_mode must be 'fixed' or 'auto'")
        if self.horizon < 1 or self.n_models < 1:
            raise ValueError("horizon and n_models must be >= 1")

    @property
    def elites(self) -> int:
        return elite_count(self.n_models) if self.n_elite is None else self.n_elite

    def to_dict(self):
        d = asdict(self)
        d["penalty"] = self.penalty.value
        return d

    @classmethod
    def from_dict(cls, d) -> "TrialConfig":
        return cls(**d)

    def key(self) -> str:
        return hashlib.sha256(dumps_json(self.to_dict()).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SearchSpace:
    penalties: tuple = ALL_KINDS
    lambda_mode: str = "fixed"
    lam_range: tuple = LAMBDA_BOUNDS
    constraint_range: tuple = CONSTRAINT_BOUNDS
    horizon_range: tuple = HORIZON_BOUNDS
    n_models_range: tuple = MODELS_BOUNDS

    def __post_init__(self):
        object.__setattr__(self, "penalties", tuple(PenaltyKind.parse(p) for p in self.penalties))
        if not self.penalties:
            raise ValueError("empty search space: no penalty kinds")
        if self.lambda_mode not in ("fixed", "auto"):
            raise ValueError("lambda_mode must be 'fixed' or 'auto'")
        lo, hi = self.lam_range
        if not LAMBDA_BOUNDS[0] <= lo <= hi <= LAMBDA_BOUNDS[1]:
            raise ValueError(f"lambda range must lie in {list(LAMBDA_BOUNDS)}")
        lo, hi = self.constraint_range
        if not CONSTRAINT_BOUNDS[0] <= lo < hi <= CONSTRAINT_BOUNDS[1]:
            raise ValueError("constraint range must lie in (0.1, 10]")
        lo, hi = self.horizon_range
        if not HORIZON_BOUNDS[0] <= lo <= hi <= HORIZON_BOUNDS[1]:
            raise ValueError(f"horizon range must lie in {list(HORIZON_BOUNDS)}")
        lo, hi = self.n_models_range
        if not MODELS_BOUNDS[0] <= lo <= hi <= MODELS_BOUNDS[1]:
            raise ValueError(f"model-count range must lie in {list(MODELS_BOUNDS)}")

    def sample(self, rng: np.random.Generator) -> TrialConfig:
        kind = self.penalties[int(rng.integers(len(self.penalties)))]
        h = int(rng.integers(self.horizon_range[0], self.horizon_range[1] + 1))
        n = int(rng.integers(self.n_models_range[0], self.n_models_range[1] + 1))
        u = rng.random()
        if self.lambda_mode == "fixed":
            lo, hi = self.lam_range
            lam = float(math.exp(math.log(lo) + u * (math.log(hi) - math.log(lo))))
            return TrialConfig(kind, "fixed", lam=lam, horizon=h, n_models=n)
        lo, hi = self.constraint_range
        # u in [0, 1) maps onto (lo, hi], log-uniformly
        c = float(hi * (lo / hi) ** u)
        return TrialConfig(kind, "auto", constraint=c, horizon=h, n_models=n)

    def contains(self, cfg: TrialConfig) -> bool:
        if cfg.penalty not in self.penalties or cfg.lambda_mode != self.lambda_mode:
            return False
        if cfg.lambda_mode == "fixed" and not self.lam_range[0] <= cfg.lam <= self.lam_range[1]:
            return False
        if cfg.lambda_mode == "auto" and not self.constraint_range[0] < cfg.constraint <= self.constraint_range[1]:
            return False
        return (self.horizon_range[0] <= cfg.horizon <= self.horizon_range[1]
                and self.n_models_range[0] <= cfg.n_models <= self.n_models_range[1])


@dataclass(frozen=True)
class TrialBudget:
    """Compute spent by one trial; the unit scaled by successive halving is ``iterations``."""

    iterations: int = 12
    final_k: int = 10
    eval_episodes: int = 1
    eval_steps: int | None = None
    rollouts_per_batch: int = 8
    population: int = 16
    elite_frac: float = 0.25
    cem_iterations: int = 2
    init_std: float = 0.5
    model_epochs: int = 40
    alpha: float = 0.5
    hidden_sizes: tuple = (64, 64)

    def __post_init__(self):
        if self.iterations < 1 or self.final_k < 1 or self.eval_episodes < 1:
            raise ValueError("iterations, final_k and eval_episodes must be >= 1")

    def scaled(self, fraction: float) -> "TrialBudget":
        return replace(self, iterations=max(1, math.ceil(self.iterations * fraction - 1e-9)))

    def to_dict(self):
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass
class Trial:
    config: TrialConfig
    seed: int
    objective: float | None = None
    status: str = "pending"
    log: list = field(default_factory=list)
    budget: dict = field(default_factory=dict)
    rung: int = 0
    error: str | None = None
    wall_time: float = 0.0

    @property
    def trial_id(self) -> str:
        return trial_id(self.config, self.seed, self.budget)

    def to_dict(self):
        return {"trial_id": self.trial_id, "config": self.config.to_dict(), "config_hash": self.config.key(),
                "seed": self.seed, "objective": self.objective, "status": self.status, "rung": self.rung,
                "budget": self.budget, "error": self.error, "log": self.log, "wall_time": self.wall_time}

    @classmethod
    def from_dict(cls, d) -> "Trial":
        return cls(TrialConfig.from_dict(d["config"]), d["seed"], d["objective"], d["status"], d["log"],
                   d["budget"], d.get("rung", 0), d.get("error"), d.get("wall_time", 0.0))


def trial_id(config: TrialConfig, seed: int, budget: dict) -> str:
    blob = dumps_json({"config": config.to_dict(), "seed": int(seed), "budget": budget})
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def recompute_objective(log: list) -> float:
    """Objective from a trial's evaluation log: mean over datasets of the
    mean normalised return of the final batches."""
    per_ds = [float(np.mean([np.mean(b["normalized"]) for b in entry["eval"]])) for entry in log]
    return float(np.mean(per_ds))


# ---------------------------------------------------------------------------


def _as_dataset_list(datasets) -> list[Dataset]:
    if isinstance(datasets, Dataset):
        return [datasets]
    if isinstance(datasets, dict):
        return [datasets[k] for k in sorted(datasets)]
    out = list(datasets)
    if not out:
        raise ValueError("no datasets given")
    return out


def _run_one_dataset(env: OracleEnv, ds: Dataset, config: TrialConfig, seed: int, budget: TrialBudget,
                     index: int) -> dict:
    ss = np.random.SeedSequence([int(seed), index])
    train_seed, roll_seed, eval_seed, pen_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    mcfg = ModelConfig(n_total=config.n_models, n_elite=config.elites, hidden_sizes=tuple(budget.hidden_sizes),
                       epochs=budget.model_epochs, seed=train_seed)
    model = train_ensemble(ds, mcfg)
    pcfg = PMDPConfig(penalty_kind=config.penalty, lambda_mode=config.lambda_mode, lam=config.lam,
                      constraint=config.constraint, alpha=budget.alpha, horizon=config.horizon,
                      rollouts_per_batch=budget.rollouts_per_batch, seed=roll_seed)
    ctx = PenaltyContext(seed=pen_seed)
    dyn = ModelDynamics(model, config.penalty, ctx, pcfg.state_clip, env.spec.action_low, env.spec.action_high)
    cem = CEMConfig(plan_horizon=config.horizon, population=budget.population, elite_frac=budget.elite_frac,
                    iterations=budget.cem_iterations, init_std=budget.init_std, seed=roll_seed)
    tuner = PenaltyWeightTuner(pcfg)
    rng = np.random.default_rng(roll_seed)
    lams, pen_returns, raw_returns, charges = [], [], [], []
    for _ in range(budget.iterations):
        lam = tuner.lam
        lams.append(lam)
        policy = CEMPolicy(dyn, cem, lam=lam, warm_start=True)
        records = rollout(model, policy, ds, pcfg, rng, lam=lam, record_kinds=(), ctx=ctx, env=env)
        pen_returns.append(float(np.mean([penalized_return(r, pcfg.gamma) for r in records])))
        raw_returns.append(float(np.mean([model_return(r, pcfg.gamma) for r in records])))
        charges.append(float(np.mean(np.concatenate([lam * r.penalty for r in records]))))
        tuner.update(records)
    # the final batches are independent given their weights: run them as one
    # lock-step batch of episodes with a per-row weight
    k = min(budget.final_k, budget.iterations)
    eval_lams = np.repeat(lams[-k:], budget.eval_episodes)
    starts_seeds = np.random.SeedSequence(eval_seed).generate_state(len(eval_lams))
    starts = np.stack([env.reset(int(x)) for x in starts_seeds])
    policy = CEMPolicy(dyn, cem, lam=eval_lams, warm_start=True)
    steps = budget.eval_steps or env.spec.episode_length
    raw = run_episodes(policy, OracleDynamics(env), starts, steps, eval_seed)
    norm = normalized_score(raw, env.spec)
    batches = []
    for b in range(k):
        sl = slice(b * budget.eval_episodes, (b + 1) * budget.eval_episodes)
        batches.append({"iteration": budget.iterations - k + b, "lam": float(lams[budget.iterations - k + b]),
                        "raw": raw[sl].tolist(), "normalized": norm[sl].tolist()})
    return {"env_id": env.spec.env_id, "tier": ds.meta.get("tier"), "dataset_seed": ds.meta.get("seed"),
            "val_mse": model.train_meta["val_mse"], "lams": lams, "penalty_charge": charges,
            "model_penalized_return": pen_returns, "model_return": raw_returns, "eval": batches}


def run_trial(env: OracleEnv | str, datasets, config: TrialConfig, seed: int,
              budget: TrialBudget | None = None, rung: int = 0) -> Trial:
    """Train, tune and evaluate ``config`` on every dataset; deterministic in ``seed``."""
    env = make_env(env) if isinstance(env, str) else env
    budget = budget or TrialBudget()
    calibrate_reference_returns(env)
    trial = Trial(config, int(seed), budget=budget.to_dict(), rung=rung)
    t0 = time.perf_counter()
    try:
        log = [_run_one_dataset(env, ds, config, seed, budget, i) for i, ds in enumerate(_as_dataset_list(datasets))]
        obj = recompute_objective(log)
        if not math.isfinite(obj):
            raise FloatingPointError("non-finite objective")
        trial.log, trial.objective, trial.status = log, obj, "ok"
    except Exception as exc:  # recorded, not raised: a failed trial ranks last
        trial.status, trial.error, trial.objective = "failed", f"{type(exc).__name__}: {exc}", None
    trial.wall_time = round(time.perf_counter() - t0, 3)
    return trial


# ---------------------------------------------------------------------------
# strategies


DEFAULT_LATTICE = {"penalty": [k.value for k in ALL_KINDS], "lam": [1.0, 10.0, 100.0],
                   "horizon": [5, 20], "n_models": [7]}


@dataclass(frozen=True)
class GridStrategy:
    lattice: dict = field(default_factory=lambda: dict(DEFAULT_LATTICE))

    def configs(self, space: SearchSpace) -> list[TrialConfig]:
        keys = sorted(self.lattice)
        if any(len(self.lattice[k]) == 0 for k in keys):
            raise ValueError("empty search space: a lattice axis has no values")
        out = []
        for values in product(*(self.lattice[k] for k in keys)):
            d = dict(zip(keys, values))
            d.setdefault("lambda_mode", space.lambda_mode)
            cfg = TrialConfig(**d)
            if not space.contains(cfg):
                raise ValueError(f"lattice point outside the search space: {cfg.to_dict()}")
            out.append(cfg)
        return out


@dataclass(frozen=True)
class RandomStrategy:
    k: int
    seed: int = 0

    def configs(self, space: SearchSpace) -> list[TrialConfig]:
        if self.k < 1:
            raise ValueError("random search needs k >= 1")
        rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), 31]))
        return [space.sample(rng) for _ in range(self.k)]


@dataclass(frozen=True)
class HalvingStrategy:
    k: int
    eta: int = 3
    seed: int = 0

    def rung_sizes(self) -> list[int]:
        if self.k < 1 or self.eta < 2:
            raise ValueError("halving needs k >= 1 and eta >= 2")
        sizes = [self.k]
        while sizes[-1] > 1:
            sizes.append(max(1, sizes[-1] // self.eta))
        return sizes

    def configs(self, space: SearchSpace) -> list[TrialConfig]:
        return RandomStrategy(self.k, self.seed).configs(space)


def parse_strategy(spec, seed: int = 0, lattice: dict | None = None):
    """``"grid"``, ``"random(k)"`` or ``"halving(k, eta)"``."""
    if not isinstance(spec, str):
        return spec
    s = spec.replace(" ", "").lower()
    if s == "grid":
        return GridStrategy(lattice or dict(DEFAULT_LATTICE))
    m = re.fullmatch(r"random\((\d+)\)", s)
    if m:
        return RandomStrategy(int(m.group(1)), seed)
    m = re.fullmatch(r"halving\((\d+)(?:,(\d+))?\)", s)
    if m:
        return HalvingStrategy(int(m.group(1)), int(m.group(2) or 3), seed)
    raise ValueError(f"unknown strategy {spec!r}")


class TrialLog:
    """Append-only JSON-lines log; trials already present are not re-run."""

    def __init__(self, path):
        self.path = Path(path)
        self.done: dict[str, Trial] = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    t = Trial.from_dict(json.loads(line))
                    self.done[t.trial_id] = t

    def append(self, trial: Trial):
        if trial.trial_id in self.done:
            return
        self.done[trial.trial_id] = trial
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(trial.to_dict(), sort_keys=True, allow_nan=False) + "\n")


def _rank_key(t: Trial):
    obj = t.objective if t.objective is not None else -math.inf
    return (-t.rung, -obj, t.config.key(), t.seed)


def _execute(jobs, evaluate, log: TrialLog | None, workers: int) -> list[Trial]:
    """Run ``(config, seed, budget, rung)`` jobs; results keep job order."""
    results: list[Trial | None] = [None] * len(jobs)
    pending = []
    for i, (cfg, seed, budget, rung) in enumerate(jobs):
        tid = trial_id(cfg, seed, budget.to_dict())
        if log is not None and tid in log.done:
            cached = log.done[tid]
            cached.rung = rung
            results[i] = cached
        else:
            pending.append(i)
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = {i: pool.submit(evaluate, jobs[i][0], jobs[i][1], jobs[i][2], jobs[i][3]) for i in pending}
            for i in pending:
                results[i] = futs[i].result()
    else:
        for i in pending:
            results[i] = evaluate(*jobs[i])
    if log is not None:
        for i in pending:
            log.append(results[i])
    return results


def search(space: SearchSpace, strategy, budget: TrialBudget, seeds, evaluate,
           log_path=None, workers: int = 1) -> list[Trial]:
    """Run a strategy and return every executed trial, best first.

    ``evaluate(config, seed, budget, rung) -> Trial`` runs one trial (see
    ``TrialEvaluator``).  Ordering: later halving rung first, then objective
    descending, ties broken by config hash.
    """
    strategy = parse_strategy(strategy)
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    if budget.iterations < 1:
        raise ValueError("budget must be >= 1")
    log = TrialLog(log_path) if log_path is not None else None
    configs = strategy.configs(space)
    if not configs:
        raise ValueError("empty search space")
    if not isinstance(strategy, HalvingStrategy):
        jobs = [(c, s, budget, 0) for c in configs for s in seeds]
        return sorted(_execute(jobs, evaluate, log, workers), key=_rank_key)
    sizes = strategy.rung_sizes()
    last = len(sizes) - 1
    alive = configs
    trials = []
    for r, size in enumerate(sizes):
        alive = alive[:size]
        b = budget.scaled(strategy.eta ** (r - last))
        res = _execute([(c, s, b, r) for c in alive for s in seeds], evaluate, log, workers)
        trials.extend(res)
        score = {}
        for t in res:
            score.setdefault(t.config.key(), []).append(t.objective if t.objective is not None else -math.inf)
        alive = sorted(alive, key=lambda c: (-float(np.mean(score[c.key()])), c.key()))
    return sorted(trials, key=_rank_key)


class TrialEvaluator:
    """Picklable ``evaluate`` callable binding an environment and its datasets."""

    def __init__(self, env_id: str, datasets):
        self.env_id = env_id
        self.datasets = _as_dataset_list(datasets)

    def __call__(self, config, seed, budget, rung=0):
        return run_trial(make_env(self.env_id), self.datasets, config, seed, budget, rung)


# ---------------------------------------------------------------------------
# fixed single setup across environments


SINGLE_SETUP = TrialConfig(PenaltyKind.ENSEMBLE_STD, "auto", constraint=1.0, horizon=20, n_models=10)
SECOND_SETUP = TrialConfig(PenaltyKind.ENSEMBLE_STD, "auto", constraint=0.5, horizon=10, n_models=10)
BASELINE = TrialConfig(PenaltyKind.MAX_ALEATORIC, "fixed", lam=1.0, horizon=5, n_models=7)


@dataclass
class SingleSetupResult:
    scores: dict  # setup name -> {task: [objective per seed]}
    report: stats.AggregateReport
    trials: list = field(default_factory=list)
    per_env: dict = field(default_factory=dict)  # setup -> env -> mean score

    def to_dict(self):
        return {"scores": self.scores, "report": self.report.to_dict(), "per_env": self.per_env,
                "trials": [t.to_dict() | {"wall_time": None} for t in self.trials]}


def _task_name(env_id, ds: Dataset) -> str:
    return f"{env_id}/{ds.meta.get('tier')}"


def single_setup_run(tasks, seeds, budget: TrialBudget | None = None, setup: TrialConfig = SINGLE_SETUP,
                     baseline: TrialConfig | None = BASELINE, two_setup: bool = False,
                     resamples: int = 2000, workers: int = 1) -> SingleSetupResult:
    """Run one configuration on every (environment, dataset) task.

    ``tasks`` is a list of ``(env_id, Dataset)`` pairs.  With ``baseline`` the
    report includes the probability of improving on it; with ``two_setup`` a
    per-environment argmax over this setup and the ``(h=10, constraint=0.5)``
    alternative is also scored.
    """
    budget = budget or TrialBudget()
    seeds = [int(s) for s in seeds]
    setups = {"single": setup}
    if baseline is not None:
        setups["baseline"] = baseline
    if two_setup:
        setups["second"] = SECOND_SETUP
    names = [_task_name(e, ds) for e, ds in tasks]
    if len(set(names)) != len(names):
        raise ValueError("duplicate (env, tier) task")
    jobs, where = [], []
    for name, cfg in setups.items():
        for (env_id, ds), tname in zip(tasks, names):
            for s in seeds:
                jobs.append((env_id, ds, cfg, s))
                where.append((name, tname))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(run_trial, e, [d], c, s, budget) for e, d, c, s in jobs]
            trials = [f.result() for f in futs]
    else:
        trials = [run_trial(e, [d], c, s, budget) for e, d, c, s in jobs]
    scores = {n: {t: [] for t in names} for n in setups}
    for (name, tname), tr in zip(where, trials):
        if tr.status != "ok":
            raise RuntimeError(f"trial failed on {tname}: {tr.error}")
        scores[name][tname].append(tr.objective)
    per_env = {}
    for n in scores:
        envs = {}
        for tname, vals in scores[n].items():
            envs.setdefault(tname.split("/")[0], []).extend(vals)
        per_env[n] = {e: float(np.mean(v)) for e, v in envs.items()}
    if two_setup:
        pick = {e: ("single" if per_env["single"][e] >= per_env["second"][e] else "second") for e in per_env["single"]}
        scores["argmax"] = {t: scores[pick[t.split("/")[0]]][t] for t in names}
        per_env["argmax"] = {e: per_env[pick[e]][e] for e in pick}
    report = stats.aggregate(scores["single"], scores.get("baseline"), resamples=resamples, seed=0)
    return SingleSetupResult(scores, report, trials, per_env)
