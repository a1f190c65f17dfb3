"""Pessimistic-MDP rollouts inside a learned ensemble and penalty-weight tuning."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core import Dataset, dumps_json
from .dynamics import EnsembleModel, sample_next_batch
from .envlab import OracleEnv
from .penalty import ALL_KINDS, PenaltyContext, PenaltyKind, penalty_batch

DEFAULT_STATE_CLIP = (-10.0, 10.0)


@dataclass(frozen=True)
class PMDPConfig:
    penalty_kind: PenaltyKind = PenaltyKind.MAX_ALEATORIC
    lambda_mode: str = "fixed"
    lam: float = 1.0
    constraint: float = 1.0
    alpha: float = 0.5
    horizon: int = 5
    gamma: float = 0.99
    state_clip: tuple = DEFAULT_STATE_CLIP
    rollouts_per_batch: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "penalty_kind", PenaltyKind.parse(self.penalty_kind))
        clip = np.asarray(self.state_clip, dtype=np.float64)
        if clip.shape[-1] != 2 or not np.isfinite(clip).all() or (clip[..., 0] >= clip[..., 1]).any():
            raise ValueError("state_clip must be finite (low, high) pairs with low < high")
        object.__setattr__(self, "state_clip", tuple(map(tuple, clip)) if clip.ndim == 2 else tuple(clip))
        if self.lambda_mode not in ("fixed", "auto"):
            raise ValueError("lambda_mode must be 'fixed' or 'auto'")
        if self.lambda_mode == "fixed" and not self.lam >= 0:
            raise ValueError("fixed lambda must be >= 0")
        if self.lambda_mode == "auto" and not (self.constraint > 0 and self.alpha > 0):
            raise ValueError("auto lambda needs constraint > 0 and alpha > 0")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.rollouts_per_batch < 1:
            raise ValueError("rollouts_per_batch must be >= 1")

    @property
    def initial_lambda(self) -> float:
        return 1.0 if self.lambda_mode == "auto" else float(self.lam)

    def clip_bounds(self, d_s):
        clip = np.asarray(self.state_clip, dtype=np.float64)
        if clip.ndim == 1:
            clip = np.tile(clip, (d_s, 1))
        return clip[:, 0], clip[:, 1]

    def to_dict(self):
        return {
            "penalty_kind": self.penalty_kind.value, "lambda_mode": self.lambda_mode,
            "lam": self.lam, "constraint": self.constraint, "alpha": self.alpha,
            "horizon": self.horizon, "gamma": self.gamma, "state_clip": list(self.state_clip),
            "rollouts_per_batch": self.rollouts_per_batch, "seed": self.seed,
        }


class StepResult(NamedTuple):
    next_state: np.ndarray
    reward: np.ndarray
    penalty: np.ndarray
    member: np.ndarray
    penalties: dict


class ModelDynamics:
    """The P-MDP transition: sample from an elite, charge the chosen penalty."""

    deterministic = False

    def __init__(self, model: EnsembleModel, penalty_kind=PenaltyKind.MAX_ALEATORIC,
                 ctx: PenaltyContext | None = None, state_clip=DEFAULT_STATE_CLIP,
                 action_low=None, action_high=None):
        self.model = model
        self.kind = PenaltyKind.parse(penalty_kind)
        self.ctx = ctx or PenaltyContext()
        self.d_s, self.d_a = model.d_s, model.d_a
        clip = np.asarray(state_clip, dtype=np.float64)
        if clip.ndim == 1:
            clip = np.tile(clip, (self.d_s, 1))
        self.clip_low, self.clip_high = clip[:, 0], clip[:, 1]
        self.action_low = np.full(self.d_a, -1.0) if action_low is None else np.asarray(action_low, float)
        self.action_high = np.full(self.d_a, 1.0) if action_high is None else np.asarray(action_high, float)

    def step(self, states, actions, rng, need_penalty=True, record_kinds=()) -> StepResult:
        means, variances = self.model.predict_arrays(states, actions)
        B = means.shape[1]
        u = (penalty_batch(self.kind, means, variances, self.ctx, self.model.elite_mask, rng)
             if need_penalty else np.zeros(B))
        extra = {}
        for k in record_kinds:
            k = PenaltyKind.parse(k)
            extra[k] = u if (k == self.kind and need_penalty) else penalty_batch(
                k, means, variances, self.ctx, self.model.elite_mask, rng)
        sn, r, which = sample_next_batch(self.model, states, actions, rng, means, variances)
        sn = np.clip(sn, self.clip_low, self.clip_high)
        return StepResult(sn, r, u, which, extra)


class OracleDynamics:
    """Wrap a true environment behind the same ``step`` interface (zero penalty)."""

    deterministic = True

    def __init__(self, env: OracleEnv):
        self.env = env
        self.d_s, self.d_a = env.spec.d_s, env.spec.d_a
        self.action_low, self.action_high = env.spec.action_low, env.spec.action_high

    def step(self, states, actions, rng=None, need_penalty=True, record_kinds=()) -> StepResult:
        sn, r = self.env.step_batch(states, actions)
        B = sn.shape[0]
        zero = np.zeros(B)
        return StepResult(sn, r, zero, np.full(B, -1), {PenaltyKind.parse(k): zero for k in record_kinds})


def as_dynamics(obj, cfg: PMDPConfig | None = None, ctx=None, env: OracleEnv | None = None):
    if hasattr(obj, "step") and hasattr(obj, "d_s") and not isinstance(obj, OracleEnv):
        return obj
    if isinstance(obj, OracleEnv):
        return OracleDynamics(obj)
    if isinstance(obj, EnsembleModel):
        cfg = cfg or PMDPConfig()
        low = high = None
        if env is not None:
            low, high = env.spec.action_low, env.spec.action_high
        return ModelDynamics(obj, cfg.penalty_kind, ctx, cfg.state_clip, low, high)
    raise TypeError(f"cannot use {type(obj).__name__} as dynamics")


@dataclass
class RolloutRecord:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    model_reward: np.ndarray
    penalty: np.ndarray
    penalized_reward: np.ndarray
    lam: np.ndarray
    member_index: np.ndarray
    start_index: int
    penalties: dict = field(default_factory=dict)
    truncated: bool = False
    true_mse: np.ndarray | None = None
    dist_error: np.ndarray | None = None
    replay_clipped: np.ndarray | None = None

    def __len__(self):
        return len(self.model_reward)

    @property
    def horizon(self):
        return len(self)


def rollout(model, policy, ds: Dataset, cfg: PMDPConfig, rng: np.random.Generator,
            lam=None, record_kinds=ALL_KINDS, ctx: PenaltyContext | None = None,
            env: OracleEnv | None = None) -> list[RolloutRecord]:
    """Branched ``horizon``-step rollouts from dataset start states.

    Each step charges ``lam * u`` against the sampled model reward and clips
    the next state into ``cfg.state_clip``.  Rollouts never terminate early;
    a row whose model output turns non-finite is truncated and flagged.
    """
    dyn = as_dynamics(model, cfg, ctx, env)
    if dyn.d_s != ds.d_s or dyn.d_a != ds.d_a:
        raise ValueError("model and dataset dimensions disagree")
    lam = cfg.initial_lambda if lam is None else float(lam)
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    B, h = cfg.rollouts_per_batch, cfg.horizon
    starts = rng.integers(len(ds), size=B)
    s = ds.states[starts].copy()
    low, high = cfg.clip_bounds(ds.d_s)
    kinds = [PenaltyKind.parse(k) for k in record_kinds]
    cols = {k: [] for k in ("s", "a", "sn", "r", "u", "m")}
    extra = {k: [] for k in kinds}
    alive_len = np.full(B, h)
    if hasattr(policy, "reset"):
        policy.reset()
    for t in range(h):
        a = np.asarray(policy(s, rng), dtype=np.float64)
        out = dyn.step(s, a, rng, need_penalty=True, record_kinds=kinds)
        sn = np.clip(out.next_state, low, high)
        bad = ~(np.isfinite(sn).all(axis=1) & np.isfinite(out.reward) & np.isfinite(out.penalty))
        newly = bad & (alive_len == h)
        alive_len[newly] = t
        cols["s"].append(s)
        cols["a"].append(a)
        cols["sn"].append(sn)
        cols["r"].append(out.reward)
        cols["u"].append(out.penalty)
        cols["m"].append(out.member)
        for k in kinds:
            extra[k].append(out.penalties[k])
        s = np.where(bad[:, None], ds.states[starts], sn)
    records = []
    for i in range(B):
        n = int(alive_len[i])
        r_hat = np.array([c[i] for c in cols["r"][:n]])
        u = np.array([c[i] for c in cols["u"][:n]])
        records.append(RolloutRecord(
            states=np.array([c[i] for c in cols["s"][:n]]).reshape(n, ds.d_s),
            actions=np.array([c[i] for c in cols["a"][:n]]).reshape(n, ds.d_a),
            next_states=np.array([c[i] for c in cols["sn"][:n]]).reshape(n, ds.d_s),
            model_reward=r_hat,
            penalty=u,
            penalized_reward=r_hat - lam * u,
            lam=np.full(n, lam),
            member_index=np.array([c[i] for c in cols["m"][:n]], dtype=int),
            start_index=int(starts[i]),
            penalties={k: np.array([c[i] for c in extra[k][:n]]) for k in kinds},
            truncated=n < h,
        ))
    return records


def auto_lambda_update(log_lam: float, penalties, constraint: float, alpha: float) -> float:
    """One log-space step towards ``mean(lam * u) == constraint``.

    The weight rises while the realised penalty charge is below the
    constraint and falls while it is above.
    """
    u = np.asarray(penalties, dtype=np.float64)
    if u.size == 0:
        raise ValueError("empty penalty batch")
    if not np.isfinite(u).all():
        raise ValueError("non-finite penalties")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    charge = float(np.mean(math.exp(log_lam) * u))
    return log_lam + alpha * (constraint - charge)


class PenaltyWeightTuner:
    """Holds the penalty weight; in auto mode it is updated once per rollout batch."""

    def __init__(self, cfg: PMDPConfig):
        self.cfg = cfg
        self.log_lam = math.log(cfg.initial_lambda) if cfg.initial_lambda > 0 else -math.inf
        self.history = [self.lam]

    @property
    def lam(self) -> float:
        return math.exp(self.log_lam)

    def update(self, records_or_penalties) -> float:
        if self.cfg.lambda_mode != "auto":
            return self.lam
        if isinstance(records_or_penalties, list) and records_or_penalties and isinstance(records_or_penalties[0], RolloutRecord):
            u = np.concatenate([r.penalty for r in records_or_penalties])
        else:
            u = np.asarray(records_or_penalties, dtype=np.float64)
        self.log_lam = auto_lambda_update(self.log_lam, u, self.cfg.constraint, self.cfg.alpha)
        self.history.append(self.lam)
        return self.lam


def penalized_return(record: RolloutRecord, gamma: float) -> float:
    if len(record) == 0:
        raise ValueError("empty rollout record")
    disc = gamma ** np.arange(len(record))
    return float((disc * record.penalized_reward).sum())


def model_return(record: RolloutRecord, gamma: float) -> float:
    disc = gamma ** np.arange(len(record))
    return float((disc * record.model_reward).sum())


# ---------------------------------------------------------------------------
# persistence: per-step CSV rows plus a JSON sidecar


def _f(x) -> str:
    return "" if x is None else "%.17g" % x


def records_write(records: list[RolloutRecord], path, meta: dict | None = None) -> tuple[Path, Path]:
    if not records:
        raise ValueError("no rollout records to write")
    prefix = Path(path)
    if prefix.name.endswith(".csv"):
        prefix = prefix.with_name(prefix.name[:-4])
    prefix.parent.mkdir(parents=True, exist_ok=True)
    d_s, d_a = records[0].states.shape[1], records[0].actions.shape[1]
    kinds = list(records[0].penalties)
    header = (["record", "t", "start_index", "member"] + [f"s_{i}" for i in range(d_s)]
              + [f"a_{i}" for i in range(d_a)] + [f"sn_{i}" for i in range(d_s)]
              + ["r_model", "penalty", "r_penalized", "lam"] + [f"pen_{k.value}" for k in kinds]
              + ["true_mse", "dist_error", "replay_clipped"])
    csv_path = prefix.with_name(prefix.name + ".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, rec in enumerate(records):
            for t in range(len(rec)):
                row = [i, t, rec.start_index, int(rec.member_index[t])]
                row += [_f(v) for v in rec.states[t]] + [_f(v) for v in rec.actions[t]]
                row += [_f(v) for v in rec.next_states[t]]
                row += [_f(rec.model_reward[t]), _f(rec.penalty[t]), _f(rec.penalized_reward[t]), _f(rec.lam[t])]
                row += [_f(rec.penalties[k][t]) for k in kinds]
                row += [_f(None if rec.true_mse is None else rec.true_mse[t]),
                        _f(None if rec.dist_error is None else rec.dist_error[t]),
                        "" if rec.replay_clipped is None else str(int(rec.replay_clipped[t]))]
                w.writerow(row)
    doc = {"d_s": d_s, "d_a": d_a, "kinds": [k.value for k in kinds], "n_records": len(records),
           "lengths": [len(r) for r in records], "truncated": [r.truncated for r in records],
           "meta": meta or {}}
    meta_path = prefix.with_name(prefix.name + ".meta.json")
    meta_path.write_text(dumps_json(doc))
    return csv_path, meta_path


def records_read(path) -> tuple[list[RolloutRecord], dict]:
    prefix = Path(path)
    if prefix.name.endswith(".csv"):
        prefix = prefix.with_name(prefix.name[:-4])
    doc = json.loads(prefix.with_name(prefix.name + ".meta.json").read_text())
    d_s, d_a = doc["d_s"], doc["d_a"]
    kinds = [PenaltyKind.parse(k) for k in doc["kinds"]]
    rows = {i: [] for i in range(doc["n_records"])}
    with open(prefix.with_name(prefix.name + ".csv"), newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows[int(row["record"])].append(row)
    records = []
    for i in range(doc["n_records"]):
        rr = sorted(rows[i], key=lambda r: int(r["t"]))

        def col(name, rr=rr):
            return np.array([float(r[name]) for r in rr])

        def vec(prefix_, d, rr=rr):
            return np.array([[float(r[f"{prefix_}_{j}"]) for j in range(d)] for r in rr]).reshape(len(rr), d)

        has_err = bool(rr) and rr[0]["true_mse"] != ""
        records.append(RolloutRecord(
            states=vec("s", d_s), actions=vec("a", d_a), next_states=vec("sn", d_s),
            model_reward=col("r_model"), penalty=col("penalty"), penalized_reward=col("r_penalized"),
            lam=col("lam"), member_index=np.array([int(r["member"]) for r in rr], dtype=int),
            start_index=int(rr[0]["start_index"]) if rr else -1,
            penalties={k: col(f"pen_{k.value}") for k in kinds},
            truncated=bool(doc["truncated"][i]),
            true_mse=col("true_mse") if has_err else None,
            dist_error=col("dist_error") if has_err else None,
            replay_clipped=np.array([r["replay_clipped"] == "1" for r in rr]) if has_err else None,
        ))
    return records, doc.get("meta", {})
