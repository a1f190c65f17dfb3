"""Evaluation protocols: transfer calibration, true-dynamics replay and OOD
event detection.

Transfer calibration scores a trained ensemble on a dataset collected by a
different behaviour policy and correlates each penalty against the squared
error of the elite-mixture mean.  Replay re-executes imagined (state, action)
pairs through the oracle environment to get the true per-step error, and the
distance of each pair to its nearest neighbour in the offline data.  OOD
detection treats each penalty as a classifier for steps whose error exceeds a
percentile of the pooled errors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import stats
from .core import Dataset, write_rows_csv
from .dynamics import EnsembleModel
from .envlab import OracleEnv
from .penalty import (ALL_KINDS, LOG2PI, DegeneratePenaltyWarning, PenaltyContext, PenaltyKind,
                      normalize_penalties, penalty_batch)
from .pmdp import PMDPConfig, RolloutRecord, rollout
from .planner import CEMConfig, train_exploiters

PERCENTILES = (90, 95, 99)
ERROR_TYPES = ("dynamics", "distribution")
TRUE_ERROR = "true_error"
DEGENERATE_ERRORS = "degenerate: zero-variance errors"
IN_DISTRIBUTION = "in-distribution"


def _kinds(kinds):
    return [PenaltyKind.parse(k) for k in kinds]


def _shape_and_correlation(u: np.ndarray, e: np.ndarray, errors_degenerate: bool) -> dict:
    out = {"spearman": None, "pearson": None, "skew": None, "kurtosis": None}
    try:
        out["skew"] = stats.skewness(u)
        out["kurtosis"] = stats.kurtosis(u)
    except (stats.UndefinedStatistic, ValueError):
        pass
    if not errors_degenerate:
        try:
            out["spearman"] = stats.spearman(u, e)
            out["pearson"] = stats.pearson(u, e)
        except stats.UndefinedStatistic:
            pass
    return out


@dataclass
class CalibrationReport:
    """Per-transition (penalty, error) pairs and the statistics derived from them."""

    errors: np.ndarray
    penalties: dict  # PenaltyKind -> (n,) array
    statistics: dict = field(default_factory=dict)  # kind value -> dict
    flags: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    error_name: str = "mse"

    def __post_init__(self):
        if not self.statistics:
            self.statistics = self.recompute()

    @property
    def degenerate(self) -> bool:
        return DEGENERATE_ERRORS in self.flags

    def recompute(self) -> dict:
        e = np.asarray(self.errors, dtype=np.float64)
        flat = bool(np.all(e == e[0]))
        if flat and DEGENERATE_ERRORS not in self.flags:
            self.flags.append(DEGENERATE_ERRORS)
        return {k.value: _shape_and_correlation(np.asarray(u), e, flat) for k, u in self.penalties.items()}

    def to_dict(self):
        return {
            "error_name": self.error_name,
            "flags": list(self.flags),
            "meta": self.meta,
            "statistics": self.statistics,
            "pairs": {"error": np.asarray(self.errors).tolist(),
                      **{k.value: np.asarray(u).tolist() for k, u in self.penalties.items()}},
        }

    @classmethod
    def from_dict(cls, doc) -> "CalibrationReport":
        pairs = dict(doc["pairs"])
        errors = np.asarray(pairs.pop("error"), dtype=np.float64)
        pens = {PenaltyKind.parse(k): np.asarray(v, dtype=np.float64) for k, v in pairs.items()}
        return cls(errors, pens, dict(doc["statistics"]), list(doc["flags"]), dict(doc["meta"]),
                   doc.get("error_name", "mse"))


def _same_dataset(model: EnsembleModel, ds: Dataset) -> bool:
    trained = model.train_meta.get("dataset", {})
    return all(trained.get(k) == ds.meta.get(k) for k in ("env_id", "tier", "seed", "size"))


def _predict_chunks(model, S, A, chunk=4096):
    for lo in range(0, len(S), chunk):
        sl = slice(lo, lo + chunk)
        yield sl, model.predict_arrays(S[sl], A[sl])


def transfer_calibration(model: EnsembleModel, ds: Dataset, kinds=ALL_KINDS,
                         ctx: PenaltyContext | None = None, error_mode: str = "mixture",
                         seed: int = 0) -> CalibrationReport:
    """Correlate penalties with the squared state error of the elite-mixture mean.

    ``error_mode="sampled"`` instead measures the error of one uniformly
    chosen elite's mean per transition.
    """
    if model.d_s != ds.d_s or model.d_a != ds.d_a:
        raise ValueError("model and dataset dimensions disagree")
    if error_mode not in ("mixture", "sampled"):
        raise ValueError("error_mode must be 'mixture' or 'sampled'")
    ctx = ctx or PenaltyContext(seed=seed)
    kinds = _kinds(kinds)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    elites = model.elite_indices
    errors = np.empty(len(ds))
    pens = {k: np.empty(len(ds)) for k in kinds}
    for sl, (means, variances) in _predict_chunks(model, ds.states, ds.actions):
        state_means = means[elites, :, : ds.d_s]
        if error_mode == "mixture":
            # offset form: exact when all elites agree
            mu = state_means[0] + (state_means - state_means[0]).mean(axis=0)
        else:
            pick = rng.integers(elites.size, size=state_means.shape[1])
            mu = state_means[pick, np.arange(state_means.shape[1])]
        d = mu - ds.next_states[sl]
        errors[sl] = (d * d).sum(axis=1)
        for k in kinds:
            pens[k][sl] = penalty_batch(k, means, variances, ctx, model.elite_mask)
    flags = [IN_DISTRIBUTION] if _same_dataset(model, ds) else []
    meta = {"train": model.train_meta.get("dataset", {}),
            "eval": {k: ds.meta.get(k) for k in ("env_id", "tier", "seed", "size")},
            "n_total": model.n_members, "n_elite": int(model.elite_mask.sum()),
            "error_mode": error_mode, "seed": int(seed)}
    return CalibrationReport(errors, pens, flags=flags, meta=meta, error_name="mse")


def mixture_nll(means, variances, targets) -> np.ndarray:
    """Negative log density of each target row under the equal-weight mixture.

    ``means``/``variances`` are ``(N, B, D)``, ``targets`` is ``(B, D)``.
    """
    var = np.maximum(variances, 1e-300)
    comp = -0.5 * (LOG2PI + np.log(var) + (targets[None] - means) ** 2 / var).sum(axis=-1)
    return -(logsumexp(comp, axis=0) - np.log(means.shape[0]))


def log_likelihood_calibration(model: EnsembleModel, ds: Dataset, kinds=ALL_KINDS,
                               ctx: PenaltyContext | None = None, seed: int = 0) -> CalibrationReport:
    """Correlate penalties with the elite-mixture NLL of the observed ``(s', r)``."""
    if model.d_s != ds.d_s or model.d_a != ds.d_a:
        raise ValueError("model and dataset dimensions disagree")
    ctx = ctx or PenaltyContext(seed=seed)
    kinds = _kinds(kinds)
    elites = model.elite_indices
    targets = np.concatenate([ds.next_states, ds.rewards[:, None]], axis=1)
    errors = np.empty(len(ds))
    pens = {k: np.empty(len(ds)) for k in kinds}
    for sl, (means, variances) in _predict_chunks(model, ds.states, ds.actions):
        errors[sl] = mixture_nll(means[elites], variances[elites], targets[sl])
        for k in kinds:
            pens[k][sl] = penalty_batch(k, means, variances, ctx, model.elite_mask)
    flags = [IN_DISTRIBUTION] if _same_dataset(model, ds) else []
    meta = {"train": model.train_meta.get("dataset", {}),
            "eval": {k: ds.meta.get(k) for k in ("env_id", "tier", "seed", "size")},
            "n_total": model.n_members, "n_elite": int(model.elite_mask.sum()), "seed": int(seed)}
    return CalibrationReport(errors, pens, flags=flags, meta=meta, error_name="nll")


# ---------------------------------------------------------------------------
# replay against the oracle


def nearest_distances(queries, data, chunk_bytes=32 << 20) -> np.ndarray:
    """Exact Euclidean distance from each query row to its nearest data row."""
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    X = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if Q.shape[1] != X.shape[1]:
        raise ValueError("query and data dimensions disagree")
    step = max(1, chunk_bytes // (8 * X.shape[0] * X.shape[1]))
    out = np.empty(len(Q))
    for lo in range(0, len(Q), step):
        d = Q[lo:lo + step, None, :] - X[None]
        out[lo:lo + step] = (d * d).sum(axis=-1).min(axis=1)
    return np.sqrt(out)


def replay_rollouts(records: list[RolloutRecord], env: OracleEnv, ds: Dataset) -> list[RolloutRecord]:
    """Attach ``true_mse``, ``dist_error`` and ``replay_clipped`` to each record.

    States (and actions) outside the environment's domain are clipped into it
    before replay and the step is flagged.
    """
    if env.spec.d_s != ds.d_s or env.spec.d_a != ds.d_a:
        raise ValueError("environment and dataset dimensions disagree")
    if ds.meta.get("env_id") not in (None, env.spec.env_id):
        raise ValueError(f"dataset was collected on {ds.meta.get('env_id')!r}, not {env.spec.env_id!r}")
    data = ds.inputs
    for rec in records:
        n = len(rec)
        s = env.clip_state(rec.states)
        a = np.clip(rec.actions, env.spec.action_low, env.spec.action_high)
        clipped = (s != rec.states).any(axis=1) | (a != rec.actions).any(axis=1)
        mse = np.empty(n)
        for t in range(n):
            sn, _ = env.step_from(s[t], a[t])
            d = rec.next_states[t] - sn
            mse[t] = d @ d
        rec.true_mse = mse
        rec.dist_error = nearest_distances(np.concatenate([rec.states, rec.actions], axis=1), data) if n else np.empty(0)
        rec.replay_clipped = clipped
    return records


def oracle_rollouts(env: OracleEnv, policy, ds: Dataset, horizon: int, rollouts: int, seed: int,
                    kinds=ALL_KINDS) -> list[RolloutRecord]:
    """Rollouts generated by the true environment itself (zero penalties)."""
    cfg = PMDPConfig(lambda_mode="fixed", lam=0.0, horizon=horizon, rollouts_per_batch=rollouts,
                     state_clip=tuple(map(tuple, env.spec.state_bounds)), seed=seed)
    return rollout(env, policy, ds, cfg, np.random.default_rng(seed), record_kinds=kinds)


def true_model_based_records(model: EnsembleModel, env: OracleEnv, ds: Dataset, cem: CEMConfig,
                             horizon: int = 20, rollouts: int = 16, k_policies: int = 6, top: int = 5,
                             seed: int = 0, kinds=ALL_KINDS,
                             ctx: PenaltyContext | None = None) -> tuple[list[RolloutRecord], list]:
    """Exploit the model with unpenalised planners, then replay their rollouts.

    ``k_policies`` planners are ranked by how much the model over-estimates
    their return; the ``top`` most exploitative each produce ``rollouts``
    imagined trajectories of length ``horizon`` that are replayed in ``env``.
    ``ctx`` sets how the recorded penalties read the ensemble.
    """
    exploiters = train_exploiters(model, env, ds, k_policies, cem, steps=horizon, seed=seed)
    chosen = exploiters[:top]
    records = []
    for ex in chosen:
        cfg = PMDPConfig(lambda_mode="fixed", lam=0.0, horizon=horizon, rollouts_per_batch=rollouts, seed=ex.seed)
        recs = rollout(model, ex.policy, ds, cfg, np.random.default_rng(ex.seed), record_kinds=kinds,
                       ctx=ctx, env=env)
        records.extend(recs)
    return replay_rollouts(records, env, ds), chosen


# ---------------------------------------------------------------------------
# OOD events


@dataclass
class OODReport:
    """Detector quality per (percentile, error type, penalty)."""

    entries: dict = field(default_factory=dict)  # (p, error_type, kind) -> {"auc", "ap", "pr"}
    labels: dict = field(default_factory=dict)  # (p, error_type) -> {"threshold", "n_positive"}
    n_steps: int = 0
    meta: dict = field(default_factory=dict)

    def auc(self, percentile, error_type, kind) -> float:
        return self.entries[(percentile, error_type, _key(kind))]["auc"]

    def ap(self, percentile, error_type, kind) -> float:
        return self.entries[(percentile, error_type, _key(kind))]["ap"]

    def to_dict(self):
        rows = []
        for (p, et, k), v in self.entries.items():
            rows.append({"percentile": p, "error_type": et, "kind": k, "auc": v["auc"], "ap": v["ap"]})
        labels = [{"percentile": p, "error_type": et, **v} for (p, et), v in self.labels.items()]
        return {"n_steps": self.n_steps, "meta": self.meta, "labels": labels, "detectors": rows}

    def pr_rows(self):
        for (p, et, k), v in self.entries.items():
            for recall, precision, thr in v["pr"]:
                yield [p, et, k, "%.17g" % recall, "%.17g" % precision, "%.17g" % thr]

    def write_pr_csv(self, path):
        return write_rows_csv(path, ["percentile", "error_type", "kind", "recall", "precision", "threshold"],
                              self.pr_rows())


def _key(kind) -> str:
    return TRUE_ERROR if kind == TRUE_ERROR else PenaltyKind.parse(kind).value


def pooled_steps(records: list[RolloutRecord], kinds) -> tuple[dict, dict]:
    """Concatenate per-step errors and penalties over all records."""
    if any(r.true_mse is None for r in records):
        raise ValueError("records must be replayed before OOD evaluation")
    errors = {"dynamics": np.concatenate([r.true_mse for r in records]),
              "distribution": np.concatenate([r.dist_error for r in records])}
    pens = {k: np.concatenate([r.penalties[k] for r in records]) for k in kinds}
    return errors, pens


def percentile_labels(errors, percentile) -> tuple[np.ndarray, float]:
    thr = float(np.percentile(errors, percentile))
    labels = errors > thr
    if labels.all() or not labels.any():
        raise ValueError(f"degenerate percentile {percentile}: only one class")
    return labels, thr


def ood_event_report(records: list[RolloutRecord], percentiles=PERCENTILES, kinds=ALL_KINDS,
                     error_types=ERROR_TYPES, min_steps: int = 100) -> OODReport:
    """Score each penalty (min-max normalised over the pooled steps) as an
    OOD-event detector.  The true error itself is included as ``true_error``.
    """
    kinds = _kinds(kinds)
    errors, pens = pooled_steps(records, kinds)
    n = len(errors["dynamics"])
    if n < min_steps:
        raise ValueError(f"need at least {min_steps} labelled steps, got {n}")
    rep = OODReport(n_steps=n, meta={"percentiles": list(percentiles), "kinds": [k.value for k in kinds],
                                     "n_records": len(records)})
    for et in error_types:
        err = errors[et]
        for p in percentiles:
            labels, thr = percentile_labels(err, p)
            rep.labels[(p, et)] = {"threshold": thr, "n_positive": int(labels.sum())}
            scores = {k.value: pens[k] for k in kinds}
            scores[TRUE_ERROR] = err
            for name, raw in scores.items():
                lo, hi = float(raw.min()), float(raw.max())
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", DegeneratePenaltyWarning)
                    norm = normalize_penalties(raw, "minmax_01")
                # rank metrics are invariant to the (increasing) normalisation;
                # use raw values so rounding cannot merge distinct scores
                curve = stats.pr_curve(raw, labels)
                scale = hi - lo if hi > lo else 1.0
                rep.entries[(p, et, name)] = {
                    "auc": stats.roc_auc(raw, labels),
                    "ap": stats.average_precision(raw, labels),
                    "pr": [(r, pr, (t - lo) / scale) for r, pr, t in curve],
                    "normalized_range": [float(norm.min()), float(norm.max())],
                }
    return rep


def error_curves(records: list[RolloutRecord], kinds=ALL_KINDS) -> dict:
    """Median true and distribution error per timestep plus z-scored penalty traces."""
    if not records:
        raise ValueError("no records")
    h = len(records[0])
    if any(len(r) != h for r in records):
        raise ValueError("records must share a horizon")
    if any(r.true_mse is None for r in records):
        raise ValueError("records must be replayed first")
    kinds = _kinds(kinds)
    out = {
        "true_mse": np.median(np.stack([r.true_mse for r in records]), axis=0),
        "dist_error": np.median(np.stack([r.dist_error for r in records]), axis=0),
        "traces": [],
    }
    for r in records:
        tr = {}
        for k in kinds:
            u = r.penalties[k]
            tr[k.value] = normalize_penalties(u, "zscore") if u.std() > 0 else np.zeros_like(u)
        out["traces"].append(tr)
    return out
