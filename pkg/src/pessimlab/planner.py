"""Cross-entropy-method model-predictive control.

The same planner generates behaviour data on the true environment, builds
exploitative policies inside a model (no penalty) and acts in the
pessimistic MDP (penalised rewards).  Any object with ``step``, ``d_s``,
``d_a``, ``action_low`` and ``action_high`` can serve as dynamics.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Dataset
from .envlab import EnvSpec, OracleEnv
from .pmdp import ModelDynamics, OracleDynamics, PMDPConfig, as_dynamics


@dataclass(frozen=True)
class CEMConfig:
    plan_horizon: int = 10
    population: int = 64
    elite_frac: float = 0.125
    iterations: int = 4
    init_std: float = 0.5
    action_noise: float = 0.0
    seed: int = 0
    gamma: float = 0.99

    def __post_init__(self):
        if self.plan_horizon < 1:
            raise ValueError("plan_horizon must be >= 1")
        if not 0.0 < self.elite_frac < 1.0:
            raise ValueError("elite_frac must lie in (0, 1)")
        if math.ceil(self.elite_frac * self.population) < 2:
            raise ValueError("need at least two elites per CEM iteration")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.action_noise < 0 or self.init_std <= 0:
            raise ValueError("init_std must be > 0 and action_noise >= 0")

    @property
    def n_elite(self) -> int:
        return math.ceil(self.elite_frac * self.population)

    def to_dict(self):
        return asdict(self)


def score_sequences(dyn, states, seqs, rng, lam, gamma):
    """Discounted (penalised) return of each action sequence.

    ``states`` is ``(M, d_s)`` and ``seqs`` ``(M, L, d_a)``.
    """
    M, L, _ = seqs.shape
    need_pen = np.any(np.asarray(lam) != 0)
    total = np.zeros(M)
    s = states
    disc = 1.0
    for t in range(L):
        out = dyn.step(s, seqs[:, t], rng, need_penalty=need_pen)
        r = out.reward - lam * out.penalty if need_pen else out.reward
        total = total + disc * r
        disc *= gamma
        s = out.next_state
    return total


def cem_plan_batch(dynamics, states, cfg: CEMConfig, rng: np.random.Generator, lam=0.0,
                   trace: list | None = None, init_mean=None, return_mean=False):
    """Plan one action for each row of ``states``.

    Every iteration samples ``population`` clipped Gaussian sequences per
    row, re-inserts the best sequence found so far, scores them and refits
    the mean/std to the elite set.  A row whose scores are all equal keeps
    its previous distribution.  ``trace``, when given, receives each
    iteration's top score as a ``(B,)`` array; on deterministic dynamics the
    re-inserted incumbent makes it non-decreasing.

    ``init_mean`` (``(B, L, d_a)``) seeds the sampling mean, e.g. with the
    previous step's solution shifted by one.  With ``return_mean`` the final
    mean sequences are returned alongside the actions.
    """
    dyn = as_dynamics(dynamics)
    S = np.atleast_2d(np.asarray(states, dtype=np.float64))
    B = S.shape[0]
    P, L, d_a = cfg.population, cfg.plan_horizon, dyn.d_a
    low, high = np.asarray(dyn.action_low, float), np.asarray(dyn.action_high, float)
    center, half = (low + high) / 2.0, (high - low) / 2.0
    if init_mean is None:
        mean = np.broadcast_to(center, (B, L, d_a)).copy()
    else:
        mean = np.clip(np.asarray(init_mean, dtype=np.float64), low, high).reshape(B, L, d_a).copy()
    std = np.broadcast_to(cfg.init_std * half, (B, L, d_a)).copy()
    lam_rows = np.broadcast_to(np.asarray(lam, dtype=np.float64), (B,))
    lam_flat = np.repeat(lam_rows, P)
    flat_states = np.repeat(S, P, axis=0)
    best_seq = None
    best_score = np.full(B, -np.inf)
    rows = np.arange(B)
    for _ in range(cfg.iterations):
        z = rng.standard_normal((B, P, L, d_a))
        seqs = np.clip(mean[:, None] + std[:, None] * z, low, high)
        if best_seq is not None:
            seqs[:, 0] = best_seq
        scores = score_sequences(dyn, flat_states, seqs.reshape(B * P, L, d_a), rng, lam_flat,
                                 cfg.gamma).reshape(B, P)
        scores = np.where(np.isfinite(scores), scores, -np.inf)
        order = np.argsort(-scores, axis=1, kind="stable")
        elite = seqs[rows[:, None], order[:, : cfg.n_elite]]
        flat = (scores.max(axis=1) == scores.min(axis=1)) | ~np.isfinite(scores.max(axis=1))
        new_mean = elite.mean(axis=1)
        new_std = np.maximum(elite.std(axis=1), 1e-3 * half)
        mean = np.where(flat[:, None, None], mean, new_mean)
        std = np.where(flat[:, None, None], std, new_std)
        top = scores[rows, order[:, 0]]
        better = top > best_score
        cand = seqs[rows, order[:, 0]]
        best_seq = cand if best_seq is None else np.where(better[:, None, None], cand, best_seq)
        best_score = np.where(better, top, best_score)
        if trace is not None:
            trace.append(top.copy())
    action = mean[:, 0]
    if cfg.action_noise > 0:
        action = action + cfg.action_noise * half * rng.standard_normal(action.shape)
    action = np.clip(action, low, high)
    return (action, mean) if return_mean else action


def cem_plan(dynamics, s, cfg: CEMConfig, rng: np.random.Generator, lam=0.0, trace=None) -> np.ndarray:
    return cem_plan_batch(dynamics, np.asarray(s, dtype=np.float64)[None], cfg, rng, lam, trace)[0]


class CEMPolicy:
    """MPC policy: replans with CEM at every call.

    ``lam`` may be a scalar or one weight per row of the state batch.  With
    ``warm_start`` each call starts from the previous solution shifted by one
    step; call ``reset`` between episodes.
    """

    def __init__(self, dynamics, cfg: CEMConfig, lam=0.0, warm_start=False):
        self.dynamics = as_dynamics(dynamics)
        self.cfg = cfg
        self.lam = lam
        self.warm_start = warm_start
        self._mean = None

    def reset(self):
        self._mean = None

    def __call__(self, states, rng):
        if not self.warm_start:
            return cem_plan_batch(self.dynamics, states, self.cfg, rng, self.lam)
        init = None
        B = np.atleast_2d(states).shape[0]
        if self._mean is not None and self._mean.shape[0] == B:
            center = (np.asarray(self.dynamics.action_low) + np.asarray(self.dynamics.action_high)) / 2.0
            init = np.concatenate([self._mean[:, 1:], np.broadcast_to(center, self._mean[:, :1].shape)], axis=1)
        action, self._mean = cem_plan_batch(self.dynamics, states, self.cfg, rng, self.lam,
                                            init_mean=init, return_mean=True)
        return action

    def to_dict(self):
        return {"type": "cem", "cem": self.cfg.to_dict(), "lam": np.asarray(self.lam).tolist(),
                "warm_start": self.warm_start, "dynamics": type(self.dynamics).__name__}


class UniformPolicy:
    def __init__(self, low, high):
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)

    def __call__(self, states, rng):
        B = np.atleast_2d(states).shape[0]
        return rng.uniform(self.low, self.high, size=(B, self.low.shape[0]))

    def to_dict(self):
        return {"type": "uniform", "low": self.low.tolist(), "high": self.high.tolist()}


@dataclass
class EvalResult:
    model_return: float
    true_return: float
    returns: list = field(default_factory=list)
    seed: int = 0

    @property
    def gap(self) -> float:
        return self.model_return - self.true_return

    def to_dict(self):
        return {"model_return": self.model_return, "true_return": self.true_return, "gap": self.gap,
                "returns": list(self.returns), "seed": self.seed}


def run_episodes(policy, dynamics, starts, steps, seed):
    """Roll ``policy`` in lock-step from each start; returns undiscounted returns.

    Planning and transition sampling use separate generators so the same
    policy seed produces the same plans whatever dynamics it is executed in.
    """
    dyn = as_dynamics(dynamics)
    plan_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    step_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    s = np.atleast_2d(np.asarray(starts, dtype=np.float64)).copy()
    total = np.zeros(s.shape[0])
    if hasattr(policy, "reset"):
        policy.reset()
    for _ in range(steps):
        a = policy(s, plan_rng)
        out = dyn.step(s, a, step_rng, need_penalty=False)
        total += out.reward
        s = out.next_state
    return total


def evaluate_policy(policy, env: OracleEnv, episodes: int, seed: int, steps: int | None = None) -> np.ndarray:
    """Raw undiscounted returns of ``episodes`` true-environment episodes."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    seeds = np.random.SeedSequence(int(seed)).generate_state(episodes)
    starts = np.stack([env.reset(int(x)) for x in seeds])
    return run_episodes(policy, OracleDynamics(env), starts, steps or env.spec.episode_length, seed)


@dataclass
class Exploiter:
    policy: CEMPolicy
    seed: int
    result: EvalResult


def train_exploiters(model, env: OracleEnv, ds: Dataset, k_policies: int, cfg: CEMConfig,
                     steps: int | None = None, pmdp: PMDPConfig | None = None, seed: int = 0) -> list[Exploiter]:
    """Build ``k_policies`` unpenalised CEM policies inside ``model`` and rank them by gap.

    Each policy starts from a dataset state and is run twice with the same
    planning seed: once in the model (``model_return``) and once in the true
    environment (``true_return``).  The list is sorted by ``model_return -
    true_return``, largest first.
    """
    if k_policies < 1:
        raise ValueError("k_policies must be >= 1")
    cfg_pmdp = pmdp or PMDPConfig(lambda_mode="fixed", lam=0.0)
    dyn = as_dynamics(model, cfg_pmdp, env=env)
    steps = steps or env.spec.episode_length
    seeds = [int(x) for x in np.random.SeedSequence(int(seed)).generate_state(k_policies)]
    out = []
    for k, pseed in enumerate(seeds):
        policy = CEMPolicy(dyn, CEMConfig(**{**cfg.to_dict(), "seed": pseed}), lam=0.0)
        start = ds.states[np.random.default_rng(pseed).integers(len(ds))]
        m_ret = float(run_episodes(policy, dyn, start, steps, pseed)[0])
        t_ret = float(run_episodes(policy, OracleDynamics(env), start, steps, pseed)[0])
        out.append(Exploiter(policy, pseed, EvalResult(m_ret, t_ret, [t_ret], pseed)))
    out.sort(key=lambda e: (-e.result.gap, e.seed))
    return out


def normalized_score(raw, spec: EnvSpec):
    refs = spec.reference_returns
    if "random" not in refs or "expert" not in refs:
        raise ValueError(f"reference returns missing for {spec.env_id}")
    lo, hi = refs["random"], refs["expert"]
    if not np.isfinite(lo) or not np.isfinite(hi) or hi == lo:
        raise ValueError("degenerate reference returns")
    return 100.0 * (np.asarray(raw, dtype=np.float64) - lo) / (hi - lo)


__all__ = ["CEMConfig", "CEMPolicy", "UniformPolicy", "EvalResult", "Exploiter", "cem_plan",
           "cem_plan_batch", "evaluate_policy", "train_exploiters", "normalized_score",
           "run_episodes", "ModelDynamics", "OracleDynamics"]
