"""Analytic deterministic environments and tiered offline dataset generation.

Every environment exposes ``step_from(state, action)``, a pure function of
its inputs, so any (state, action) pair hallucinated by a learned model can
be replayed exactly against the true dynamics.

Environments
------------
pointmass2d
    State ``(x, y, vx, vy)``, action ``(ax, ay) in [-1, 1]^2``.
    ``v' = clip(v + 0.1 a, -1, 1)``, ``p' = clip(p + 0.1 v', -5, 5)``,
    reward ``-||p' - (3, 3)||``.  Episodes last 100 steps and start at rest
    with ``p ~ U([-1, 1]^2)``.
pendulum1d
    State ``(cos th, sin th, thdot)``, torque in ``[-2, 2]``.  Gravity
    pendulum with ``g = 10``, ``m = l = 1``, ``dt = 0.05``, ``|thdot| <= 8``;
    reward ``-(th^2 + 0.1 thdot^2 + 0.001 u^2)`` on the pre-step angle.
    Episodes last 200 steps from ``th ~ U(-pi, pi)``, ``thdot ~ U(-1, 1)``.
cliffcar
    pointmass2d with a band ``1.4 <= x' <= 1.6``: landing in it zeroes the
    velocity and costs an extra 1.0 reward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import TIERS, Dataset

GOAL = np.array([3.0, 3.0])
BAND = (1.4, 1.6)
BAND_COST = 1.0


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    d_s: int
    d_a: int
    state_bounds: np.ndarray  # (d_s, 2)
    action_bounds: np.ndarray  # (d_a, 2)
    episode_length: int
    reference_returns: dict = field(default_factory=dict)

    @property
    def action_low(self) -> np.ndarray:
        return self.action_bounds[:, 0]

    @property
    def action_high(self) -> np.ndarray:
        return self.action_bounds[:, 1]

    @property
    def state_low(self) -> np.ndarray:
        return self.state_bounds[:, 0]

    @property
    def state_high(self) -> np.ndarray:
        return self.state_bounds[:, 1]


class OracleEnv:
    """Base class: subclasses implement the vectorised ``_step``."""

    spec: EnvSpec

    def step_from(self, state, action) -> tuple[np.ndarray, float]:
        s = np.asarray(state, dtype=np.float64).reshape(1, self.spec.d_s)
        a = np.asarray(action, dtype=np.float64).reshape(1, self.spec.d_a)
        self._check_action(a)
        sn, r = self._step(s, a)
        return sn[0], float(r[0])

    def step_batch(self, states, actions) -> tuple[np.ndarray, np.ndarray]:
        s = np.asarray(states, dtype=np.float64)
        a = np.asarray(actions, dtype=np.float64)
        self._check_action(a)
        return self._step(s, a)

    def reset(self, seed) -> np.ndarray:
        return self._reset(np.random.default_rng(seed))

    def clip_state(self, states) -> np.ndarray:
        return np.clip(states, self.spec.state_low, self.spec.state_high)

    def _check_action(self, a):
        if not np.isfinite(a).all():
            raise ValueError("non-finite action")
        if (a < self.spec.action_low).any() or (a > self.spec.action_high).any():
            raise ValueError("action out of bounds")

    def _step(self, s, a):
        raise NotImplementedError

    def _reset(self, rng):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.spec.env_id!r})"


class PointMass2D(OracleEnv):
    band = False

    def __init__(self, env_id="pointmass2d"):
        self.spec = EnvSpec(
            env_id=env_id, d_s=4, d_a=2,
            state_bounds=np.array([[-5.0, 5.0], [-5.0, 5.0], [-1.0, 1.0], [-1.0, 1.0]]),
            action_bounds=np.array([[-1.0, 1.0], [-1.0, 1.0]]),
            episode_length=100,
        )

    def _step(self, s, a):
        v = np.clip(s[:, 2:4] + 0.1 * a, -1.0, 1.0)
        p = np.clip(s[:, 0:2] + 0.1 * v, -5.0, 5.0)
        dx = p[:, 0] - GOAL[0]
        dy = p[:, 1] - GOAL[1]
        r = -np.sqrt(dx * dx + dy * dy)
        if self.band:
            hit = (p[:, 0] >= BAND[0]) & (p[:, 0] <= BAND[1])
            v = np.where(hit[:, None], 0.0, v)
            r = np.where(hit, r - BAND_COST, r)
        return np.concatenate([p, v], axis=1), r

    def _reset(self, rng):
        return np.concatenate([rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])


class CliffCar(PointMass2D):
    band = True

    def __init__(self):
        super().__init__("cliffcar")


class Pendulum1D(OracleEnv):
    g = 10.0
    m = 1.0
    length = 1.0
    dt = 0.05
    max_speed = 8.0

    def __init__(self):
        self.spec = EnvSpec(
            env_id="pendulum1d", d_s=3, d_a=1,
            state_bounds=np.array([[-1.0, 1.0], [-1.0, 1.0], [-self.max_speed, self.max_speed]]),
            action_bounds=np.array([[-2.0, 2.0]]),
            episode_length=200,
        )

    def _step(self, s, a):
        th = np.arctan2(s[:, 1], s[:, 0])
        thdot = s[:, 2]
        u = a[:, 0]
        cost = th * th + 0.1 * thdot * thdot + 0.001 * u * u
        newthdot = thdot + (3.0 * self.g / (2.0 * self.length) * np.sin(th)
                            + 3.0 / (self.m * self.length ** 2) * u) * self.dt
        newthdot = np.clip(newthdot, -self.max_speed, self.max_speed)
        newth = th + newthdot * self.dt
        return np.stack([np.cos(newth), np.sin(newth), newthdot], axis=1), -cost

    def _reset(self, rng):
        th = rng.uniform(-math.pi, math.pi)
        thdot = rng.uniform(-1.0, 1.0)
        return np.array([math.cos(th), math.sin(th), thdot])


_ENVS = {"pointmass2d": PointMass2D, "pendulum1d": Pendulum1D, "cliffcar": CliffCar}
ENV_IDS = tuple(_ENVS)


def make_env(env_id: str) -> OracleEnv:
    try:
        return _ENVS[env_id]()
    except KeyError:
        raise ValueError(f"unknown env_id {env_id!r}; choose from {sorted(_ENVS)}") from None


# ---------------------------------------------------------------------------
# behaviour policies and dataset tiers

def expert_cem_config(seed=0):
    from .planner import CEMConfig
    return CEMConfig(plan_horizon=25, population=200, elite_frac=0.1, iterations=5,
                     init_std=0.6, action_noise=0.0, seed=seed)


def medium_cem_config(seed=0):
    from .planner import CEMConfig
    return CEMConfig(plan_horizon=10, population=40, elite_frac=0.2, iterations=2,
                     init_std=0.6, action_noise=0.6, seed=seed)


def behaviour_policy(env: OracleEnv, kind: str):
    from .planner import CEMPolicy, OracleDynamics, UniformPolicy

    if kind == "random":
        return UniformPolicy(env.spec.action_low, env.spec.action_high)
    if kind == "expert":
        return CEMPolicy(OracleDynamics(env), expert_cem_config())
    if kind == "medium":
        return CEMPolicy(OracleDynamics(env), medium_cem_config())
    raise ValueError(f"unknown behaviour policy {kind!r}")


def _collect(env: OracleEnv, kind: str, n: int, rng: np.random.Generator):
    """Roll the named behaviour policy until ``n`` transitions exist.

    Returns a list of episodes, each a dict of column arrays.
    """
    policy = behaviour_policy(env, kind)
    T = env.spec.episode_length
    n_ep = -(-n // T)
    # all episodes advance in lock-step so the planner runs batched
    s = np.stack([env.reset(int(rng.integers(2**63 - 1))) for _ in range(n_ep)])
    cols = {k: [] for k in ("s", "a", "r", "sn")}
    for _ in range(T):
        a = policy(s, rng)
        sn = np.empty_like(s)
        r = np.empty(n_ep)
        for i in range(n_ep):
            sn[i], r[i] = env.step_from(s[i], a[i])
        cols["s"].append(s)
        cols["a"].append(a)
        cols["r"].append(r)
        cols["sn"].append(sn)
        s = sn
    episodes = []
    remaining = n
    for i in range(n_ep):
        length = min(T, remaining)
        remaining -= length
        episodes.append({
            "policy": kind,
            "complete": length == T,
            "s": np.stack([c[i] for c in cols["s"][:length]]),
            "a": np.stack([c[i] for c in cols["a"][:length]]),
            "r": np.array([c[i] for c in cols["r"][:length]]),
            "sn": np.stack([c[i] for c in cols["sn"][:length]]),
        })
    return episodes


def _assemble(env, tier, seed, episodes):
    states, actions, rewards, nexts, terms, tags = [], [], [], [], [], []
    start = 0
    for ep in episodes:
        n = len(ep["r"])
        states.append(ep["s"])
        actions.append(ep["a"])
        rewards.append(ep["r"])
        nexts.append(ep["sn"])
        t = np.zeros(n, dtype=bool)
        t[-1] = True
        terms.append(t)
        tags.append({"policy": ep["policy"], "start": start, "length": n,
                     "complete": ep["complete"], "return": float(ep["r"].sum())})
        start += n
    meta = {"env_id": env.spec.env_id, "tier": tier, "seed": int(seed),
            "episodes": tags, "behavior_policies": sorted({t["policy"] for t in tags})}
    return Dataset(np.concatenate(states), np.concatenate(actions), np.concatenate(rewards),
                   np.concatenate(nexts), np.concatenate(terms), meta=meta)


def generate_dataset(env: OracleEnv, tier: str, size: int, seed: int) -> Dataset:
    """Collect ``size`` transitions with the behaviour policy of ``tier``.

    ``random``, ``medium`` and ``expert`` use a single behaviour policy;
    ``mixed`` shuffles random and medium episodes together and
    ``medium-expert`` concatenates medium then expert transitions.
    """
    if tier not in TIERS:
        raise ValueError(f"unknown tier {tier!r}; choose from {TIERS}")
    if size < 1:
        raise ValueError("dataset size must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), TIERS.index(tier)]))
    if tier in ("random", "medium", "expert"):
        episodes = _collect(env, tier, size, rng)
    elif tier == "mixed":
        half = size // 2
        episodes = _collect(env, "random", size - half, rng) + (_collect(env, "medium", half, rng) if half else [])
        order = rng.permutation(len(episodes))
        episodes = [episodes[i] for i in order]
    else:
        half = size // 2
        episodes = (_collect(env, "medium", half, rng) if half else []) + _collect(env, "expert", size - half, rng)
    ds = _assemble(env, tier, seed, episodes)
    if tier in ("random", "expert"):
        full = [e["r"].sum() for e in episodes if e["complete"]]
        if full:
            env.spec.reference_returns[tier] = float(np.mean(full))
    return ds


REFERENCE_SEED = 12345
REFERENCE_EPISODES = 5


def calibrate_reference_returns(env: OracleEnv, episodes=REFERENCE_EPISODES, seed=REFERENCE_SEED) -> dict:
    """Fill ``env.spec.reference_returns`` from fixed-seed random and expert runs.

    The result is memoised per env id, so normalised scores do not depend on
    which datasets a caller happened to generate earlier.
    """
    key = (env.spec.env_id, episodes, seed)
    if key not in _REFERENCE_CACHE:
        refs = {}
        for tier in ("random", "expert"):
            ds = generate_dataset(env, tier, episodes * env.spec.episode_length, seed)
            refs[tier] = float(ds.episode_returns().mean())
        if not refs["expert"] > refs["random"]:
            raise RuntimeError(f"expert reference return does not exceed random on {env.spec.env_id}")
        _REFERENCE_CACHE[key] = refs
    env.spec.reference_returns.update(_REFERENCE_CACHE[key])
    return dict(_REFERENCE_CACHE[key])


_REFERENCE_CACHE: dict = {}
