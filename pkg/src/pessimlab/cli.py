"""Command-line front end.

Every command takes ``--config <json> --out <dir>`` (plus optional
``--seed`` and ``--workers``), validates the config against a strict schema,
writes its outputs under ``--out`` and finishes with ``manifest.json`` that
lists each produced file with its SHA-256 and the exact config used.

Exit codes: 0 success, 1 invalid config or missing input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .core import dataset_read, dataset_write, dumps_json, to_jsonable, write_rows_csv
from .dynamics import ModelConfig, load_model, save_model, train_ensemble
from .envlab import ENV_IDS, generate_dataset, make_env
from .penalty import ALL_KINDS, PenaltyContext, PenaltyKind
from .planner import CEMConfig, CEMPolicy, UniformPolicy
from .pmdp import PenaltyWeightTuner, PMDPConfig, as_dynamics, records_read, records_write, rollout
from . import protocols, search, stats

MANIFEST = "manifest.json"
KIND_NAMES = [k.value for k in ALL_KINDS]
TIER_NAMES = ["random", "medium", "expert", "mixed", "medium-expert"]


class ConfigError(ValueError):
    pass


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_INT = {"type": "integer"}
_NUM = {"type": "number"}
_STR = {"type": "string"}
_BOOL = {"type": "boolean"}
_KINDS = {"type": "array", "items": {"enum": KIND_NAMES}, "minItems": 1, "uniqueItems": True}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

MODEL_SCHEMA = _obj({
    "n_total": {"type": "integer", "minimum": 1, "maximum": 15},
    "n_elite": {"type": "integer", "minimum": 1, "maximum": 15},
    "hidden_sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
    "learning_rate": {"type": "number", "exclusiveMinimum": 0},
    "weight_decay": {"type": "array", "items": {"type": "number", "minimum": 0}},
    "epochs": {"type": "integer", "minimum": 1},
    "batch_size": {"type": "integer", "minimum": 1},
    "logvar_clamp": _PAIR,
    "validation_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
})
PMDP_SCHEMA = _obj({
    "penalty_kind": {"enum": KIND_NAMES},
    "lambda_mode": {"enum": ["fixed", "auto"]},
    "lam": {"type": "number", "minimum": 0},
    "constraint": {"type": "number", "exclusiveMinimum": 0},
    "alpha": {"type": "number", "exclusiveMinimum": 0},
    "horizon": {"type": "integer", "minimum": 1},
    "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "state_clip": _PAIR,
    "rollouts_per_batch": {"type": "integer", "minimum": 1},
})
CEM_SCHEMA = _obj({
    "plan_horizon": {"type": "integer", "minimum": 1},
    "population": {"type": "integer", "minimum": 2},
    "elite_frac": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "iterations": {"type": "integer", "minimum": 1},
    "init_std": {"type": "number", "exclusiveMinimum": 0},
    "action_noise": {"type": "number", "minimum": 0},
})
CONTEXT_SCHEMA = _obj({
    "dims_used": {"enum": ["state_and_reward", "state_only"]},
    "use_all_members": _BOOL,
    "aleatoric_norm": {"enum": ["variance", "std"]},
})
BUDGET_SCHEMA = _obj({k: _INT for k in ("iterations", "final_k", "eval_episodes", "eval_steps",
                                          "rollouts_per_batch", "population", "cem_iterations",
                                          "model_epochs")}
                     | {"elite_frac": _NUM, "init_std": _NUM, "alpha": _NUM,
                        "hidden_sizes": {"type": "array", "items": _INT, "minItems": 1}})
SPACE_SCHEMA = _obj({
    "penalties": _KINDS,
    "lambda_mode": {"enum": ["fixed", "auto"]},
    "lam_range": _PAIR,
    "constraint_range": _PAIR,
    "horizon_range": {"type": "array", "items": _INT, "minItems": 2, "maxItems": 2},
    "n_models_range": {"type": "array", "items": _INT, "minItems": 2, "maxItems": 2},
})

SCHEMAS = {
    "gen-data": _obj({
        "env_id": {"enum": list(ENV_IDS)},
        "tiers": {"type": "array", "items": {"enum": TIER_NAMES}, "minItems": 1, "uniqueItems": True},
        "size": {"type": "integer", "minimum": 1},
        "seed": _INT,
    }, ["env_id", "tiers", "size"]),
    "train-dynamics": _obj({"dataset": _STR, "model": MODEL_SCHEMA, "seed": _INT}, ["dataset"]),
    "eval-transfer": _obj({
        "model": _STR, "dataset": _STR, "kinds": _KINDS,
        "error_mode": {"enum": ["mixture", "sampled"]},
        "likelihood": _BOOL, "context": CONTEXT_SCHEMA, "seed": _INT,
    }, ["model", "dataset"]),
    "run-pmdp": _obj({
        "env_id": {"enum": list(ENV_IDS)},
        "dataset": _STR,
        "model": _STR,
        "pmdp": PMDP_SCHEMA,
        "policy": _obj({
            "type": {"enum": ["uniform", "cem", "exploiters"]},
            "cem": CEM_SCHEMA,
            "k_policies": {"type": "integer", "minimum": 1},
            "top": {"type": "integer", "minimum": 1},
        }, ["type"]),
        "batches": {"type": "integer", "minimum": 1},
        "kinds": _KINDS,
        "context": CONTEXT_SCHEMA,
        "seed": _INT,
    }, ["env_id", "dataset", "model"]),
    "eval-replay": _obj({"env_id": {"enum": list(ENV_IDS)}, "dataset": _STR, "rollouts": _STR,
                         "seed": _INT}, ["env_id", "dataset", "rollouts"]),
    "eval-ood": _obj({
        "rollouts": _STR, "kinds": _KINDS,
        "percentiles": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0,
                                                   "exclusiveMaximum": 100}, "minItems": 1},
        "error_types": {"type": "array", "items": {"enum": list(protocols.ERROR_TYPES)}, "minItems": 1},
        "min_steps": {"type": "integer", "minimum": 1},
        "seed": _INT,
    }, ["rollouts"]),
    "sweep": _obj({
        "env_id": {"enum": list(ENV_IDS)},
        "datasets": {"type": "array", "items": _STR, "minItems": 1},
        "space": SPACE_SCHEMA,
        "strategy": _STR,
        "lattice": {"type": "object"},
        "budget": BUDGET_SCHEMA,
        "seeds": {"type": "array", "items": _INT, "minItems": 1},
        "single_setup": _obj({
            "tasks": {"type": "array", "minItems": 1,
                      "items": _obj({"env_id": {"enum": list(ENV_IDS)}, "dataset": _STR}, ["env_id", "dataset"])},
            "baseline": _BOOL, "two_setup": _BOOL, "resamples": {"type": "integer", "minimum": 100},
        }, ["tasks"]),
        "seed": _INT,
    }),
    "report": _obj({
        "inputs": {"type": "array", "items": _STR, "minItems": 1},
        "resamples": {"type": "integer", "minimum": 100},
        "seed": _INT,
    }, ["inputs"]),
}


# ---------------------------------------------------------------------------
# helpers


class Outputs:
    """Tracks files written under the output directory."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []
        self.volatile: list[str] = []
        root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    def add(self, *paths, volatile=False):
        for p in paths:
            rel = Path(p).resolve().relative_to(self.root.resolve()).as_posix()
            target = self.volatile if volatile else self.files
            if rel not in target:
                target.append(rel)

    def json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(dumps_json(obj))
        self.add(p)
        return p


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Outputs, command: str, config: dict):
    files = [{"name": n, "sha256": _sha256(out.path(n)), "bytes": out.path(n).stat().st_size}
             for n in sorted(out.files)]
    doc = {"tool": "pessimlab", "version": __version__, "command": command, "config": config,
           "files": files, "volatile": sorted(out.volatile)}
    out.path(MANIFEST).write_text(dumps_json(doc))


def _need(path: str, suffixes=("",)) -> str:
    for s in suffixes:
        if not Path(path + s).exists():
            raise ConfigError(f"missing input file {path + s}")
    return path


def _need_dataset(path):
    return _need(path, (".csv", ".meta.json"))


def _need_rollouts(path):
    return _need(path, (".csv", ".meta.json"))


def _model_config(d: dict, seed: int) -> ModelConfig:
    d = dict(d)
    if "logvar_clamp" in d:
        d["logvar_clamp"] = tuple(d["logvar_clamp"])
    if "hidden_sizes" in d:
        d["hidden_sizes"] = tuple(d["hidden_sizes"])
    if "weight_decay" in d:
        d["weight_decay"] = tuple(d["weight_decay"])
    return ModelConfig(**d, seed=seed)


def _context(d: dict | None, seed: int) -> PenaltyContext:
    return PenaltyContext(**(d or {}), seed=seed)


def _kinds(cfg):
    return [PenaltyKind.parse(k) for k in cfg.get("kinds", KIND_NAMES)]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg, out: Outputs, seed, workers):
    env = make_env(cfg["env_id"])
    summary = {}
    for tier in cfg["tiers"]:
        ds = generate_dataset(env, tier, cfg["size"], seed)
        paths = dataset_write(ds, out.path(f"{env.spec.env_id}-{tier}"))
        out.add(*paths)
        summary[tier] = {"size": len(ds), "mean_episode_return": float(ds.episode_returns().mean())}
    out.json("summary.json", {"env_id": env.spec.env_id, "seed": seed, "tiers": summary,
                              "reference_returns": env.spec.reference_returns})


def cmd_train_dynamics(cfg, out: Outputs, seed, workers):
    ds = dataset_read(_need_dataset(cfg["dataset"]))
    model = train_ensemble(ds, _model_config(cfg.get("model", {}), seed))
    out.add(save_model(model, out.path("model.bin")))
    out.json("train_meta.json", {"config": model.config.to_dict(), "train_meta": model.train_meta,
                                 "elite_mask": model.elite_mask.tolist()})


def cmd_eval_transfer(cfg, out: Outputs, seed, workers):
    model = load_model(_need(cfg["model"]))
    ds = dataset_read(_need_dataset(cfg["dataset"]))
    ctx = _context(cfg.get("context"), seed)
    rep = protocols.transfer_calibration(model, ds, _kinds(cfg), ctx, cfg.get("error_mode", "mixture"), seed)
    out.json("calibration.json", rep.to_dict())
    if cfg.get("likelihood", False):
        nll = protocols.log_likelihood_calibration(model, ds, _kinds(cfg), _context(cfg.get("context"), seed), seed)
        out.json("calibration_nll.json", nll.to_dict())


def _load_dynamics_source(cfg, env):
    if cfg["model"] == "oracle":
        return env
    return load_model(_need(cfg["model"]))


def cmd_run_pmdp(cfg, out: Outputs, seed, workers):
    env = make_env(cfg["env_id"])
    ds = dataset_read(_need_dataset(cfg["dataset"]))
    source = _load_dynamics_source(cfg, env)
    pd = dict(cfg.get("pmdp", {}))
    if "state_clip" in pd:
        pd["state_clip"] = tuple(pd["state_clip"])
    if cfg["model"] == "oracle":
        pd.setdefault("state_clip", tuple(map(tuple, env.spec.state_bounds)))
    pcfg = PMDPConfig(**pd, seed=seed)
    ctx = _context(cfg.get("context"), seed)
    kinds = _kinds(cfg)
    pol = cfg.get("policy", {"type": "uniform"})
    cem = CEMConfig(**pol.get("cem", {}), seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    tuner = PenaltyWeightTuner(pcfg)
    records, lam_log, exploit = [], [], []
    if pol["type"] == "exploiters":
        if cfg["model"] == "oracle":
            raise ConfigError("exploiter policies need a learned model")
        recs, chosen = protocols.true_model_based_records(
            source, env, ds, cem, horizon=pcfg.horizon, rollouts=pcfg.rollouts_per_batch,
            k_policies=pol.get("k_policies", 6), top=pol.get("top", 5), seed=seed, kinds=kinds, ctx=ctx)
        records = recs
        exploit = [{"seed": e.seed, **e.result.to_dict()} for e in chosen]
        lam_log = [0.0]
    else:
        for _ in range(cfg.get("batches", 1)):
            lam = tuner.lam
            if pol["type"] == "uniform":
                policy = UniformPolicy(env.spec.action_low, env.spec.action_high)
            else:
                policy = CEMPolicy(as_dynamics(source, pcfg, ctx, env), cem, lam=lam, warm_start=True)
            batch = rollout(source, policy, ds, pcfg, rng, lam=lam, record_kinds=kinds, ctx=ctx, env=env)
            records.extend(batch)
            lam_log.append(lam)
            tuner.update(batch)
    meta = {"env_id": env.spec.env_id, "model": cfg["model"], "pmdp": pcfg.to_dict(), "seed": seed}
    out.add(*records_write(records, out.path("rollouts"), meta))
    out.json("pmdp_summary.json", {"lambda": lam_log, "final_lambda": tuner.lam, "exploiters": exploit,
                                   "n_records": len(records),
                                   "mean_penalized_return": float(np.mean([r.penalized_reward.sum() for r in records]))})


def cmd_eval_replay(cfg, out: Outputs, seed, workers):
    env = make_env(cfg["env_id"])
    ds = dataset_read(_need_dataset(cfg["dataset"]))
    records, meta = records_read(_need_rollouts(cfg["rollouts"]))
    protocols.replay_rollouts(records, env, ds)
    out.add(*records_write(records, out.path("replayed"), meta))
    mse = np.concatenate([r.true_mse for r in records])
    dist = np.concatenate([r.dist_error for r in records])
    summary = {"n_steps": int(mse.size), "max_true_mse": float(mse.max()), "mean_true_mse": float(mse.mean()),
               "zero_error": bool((mse == 0).all()), "median_dist_error": float(np.median(dist)),
               "n_clipped": int(sum(int(r.replay_clipped.sum()) for r in records))}
    lengths = {len(r) for r in records}
    if len(lengths) == 1:
        curves = protocols.error_curves(records, list(records[0].penalties) or ALL_KINDS)
        rows = [[t, "%.17g" % curves["true_mse"][t], "%.17g" % curves["dist_error"][t]]
                for t in range(len(curves["true_mse"]))]
        out.add(write_rows_csv(out.path("error_curves.csv"), ["t", "median_true_mse", "median_dist_error"], rows))
    out.json("replay_summary.json", summary)


def cmd_eval_ood(cfg, out: Outputs, seed, workers):
    records, meta = records_read(_need_rollouts(cfg["rollouts"]))
    if any(r.true_mse is None for r in records):
        raise ConfigError(f"rollouts {cfg['rollouts']} have not been replayed (run eval-replay first)")
    rep = protocols.ood_event_report(records, tuple(cfg.get("percentiles", protocols.PERCENTILES)), _kinds(cfg),
                                     tuple(cfg.get("error_types", protocols.ERROR_TYPES)), cfg.get("min_steps", 100))
    rep.meta["source"] = meta
    out.json("ood.json", rep.to_dict())
    out.add(rep.write_pr_csv(out.path("pr_curves.csv")))


def _budget(d):
    d = dict(d or {})
    if "hidden_sizes" in d:
        d["hidden_sizes"] = tuple(d["hidden_sizes"])
    return search.TrialBudget(**d)


def cmd_sweep(cfg, out: Outputs, seed, workers):
    budget = _budget(cfg.get("budget"))
    seeds = cfg.get("seeds", [seed])
    if "single_setup" in cfg:
        ss = cfg["single_setup"]
        tasks = [(t["env_id"], dataset_read(_need_dataset(t["dataset"]))) for t in ss["tasks"]]
        res = search.single_setup_run(tasks, seeds, budget, baseline=search.BASELINE if ss.get("baseline", True) else None,
                                      two_setup=ss.get("two_setup", False), resamples=ss.get("resamples", 2000),
                                      workers=workers)
        log = out.path("trials.jsonl")
        log.write_text("".join(json.dumps(t.to_dict(), sort_keys=True) + "\n" for t in res.trials))
        out.add(log, volatile=True)
        out.json("single_setup.json", {"scores": res.scores, "per_env": res.per_env, "report": res.report.to_dict()})
        return
    for key in ("env_id", "datasets"):
        if key not in cfg:
            raise ConfigError(f"sweep needs '{key}' unless 'single_setup' is given")
    datasets = [dataset_read(_need_dataset(p)) for p in cfg["datasets"]]
    sp = dict(cfg.get("space", {}))
    for k in ("lam_range", "constraint_range", "horizon_range", "n_models_range"):
        if k in sp:
            sp[k] = tuple(sp[k])
    space = search.SearchSpace(**sp)
    strategy = search.parse_strategy(cfg.get("strategy", "random(4)"), seed, cfg.get("lattice"))
    log = out.path("trials.jsonl")
    trials = search.search(space, strategy, budget, seeds, search.TrialEvaluator(cfg["env_id"], datasets),
                           log_path=log, workers=workers)
    out.add(log, volatile=True)
    ranking = [{k: v for k, v in t.to_dict().items() if k != "wall_time"} for t in trials]
    out.json("ranking.json", {"strategy": str(strategy), "executions": len(trials), "trials": ranking})


def _load_json(path: Path):
    return json.loads(path.read_text())


def cmd_report(cfg, out: Outputs, seed, workers):
    cal_rows, ood_rows, aggregate = [], [], {}
    for src in cfg["inputs"]:
        d = Path(src)
        man = d / MANIFEST
        if not man.exists():
            raise ConfigError(f"missing input file {man}")
        files = {f["name"] for f in _load_json(man)["files"]}
        if "calibration.json" in files:
            rep = protocols.CalibrationReport.from_dict(_load_json(d / "calibration.json"))
            # statistics are recomputed from the stored pairs, not copied
            recomputed = protocols.CalibrationReport(rep.errors, rep.penalties, flags=list(rep.flags), meta=rep.meta,
                                                     error_name=rep.error_name)
            m = rep.meta
            setting = f"{m['train'].get('tier')}->{m['eval'].get('tier')}"
            for kind, st in recomputed.statistics.items():
                cal_rows.append([src, m["eval"].get("env_id"), setting, kind] +
                                ["" if st[s] is None else "%.6f" % st[s] for s in ("spearman", "pearson", "skew", "kurtosis")])
        if "replayed.csv" in files:
            records, _ = records_read(d / "replayed")
            rep = protocols.ood_event_report(records)
            for (p, et, kind), v in rep.entries.items():
                ood_rows.append([src, p, et, kind, "%.6f" % v["auc"], "%.6f" % v["ap"]])
        elif "ood.json" in files:
            for row in _load_json(d / "ood.json")["detectors"]:
                ood_rows.append([src, row["percentile"], row["error_type"], row["kind"],
                                 "%.6f" % row["auc"], "%.6f" % row["ap"]])
        if "single_setup.json" in files:
            doc = _load_json(d / "single_setup.json")
            scores = doc["scores"]
            agg = stats.aggregate(scores["single"], scores.get("baseline"), resamples=cfg.get("resamples", 2000),
                                  seed=seed)
            aggregate[src] = {"report": agg.to_dict(), "per_env": doc["per_env"]}
    if cal_rows:
        out.add(write_rows_csv(out.path("table_calibration.csv"),
                               ["source", "env_id", "setting", "penalty", "spearman", "pearson", "skew", "kurtosis"],
                               cal_rows))
    if ood_rows:
        out.add(write_rows_csv(out.path("table_ood.csv"),
                               ["source", "percentile", "error_type", "penalty", "auc", "ap"], ood_rows))
    out.json("aggregate.json", aggregate)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-dynamics": cmd_train_dynamics,
    "eval-transfer": cmd_eval_transfer,
    "run-pmdp": cmd_run_pmdp,
    "eval-replay": cmd_eval_replay,
    "eval-ood": cmd_eval_ood,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pessimlab", description="Offline model-based RL penalty laboratory.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", required=True, help="JSON config file")
        c.add_argument("--out", required=True, help="output directory")
        c.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        c.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: $PESSIMLAB_WORKERS or 1)")
    return p


def _diag(kind: str, msg: str):
    print(f"pessimlab: {kind}: {' '.join(str(msg).split())}", file=sys.stderr)


def load_config(command: str, path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"missing config file {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(doc, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    return doc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.command, args.config)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        cfg = {**cfg, "seed": seed}
        workers = args.workers if args.workers is not None else int(os.environ.get("PESSIMLAB_WORKERS", "1"))
        if workers < 1:
            raise ConfigError("workers must be >= 1")
    except (ConfigError, ValueError) as exc:
        _diag("config-error", exc)
        return 1
    out = Outputs(Path(args.out))
    try:
        COMMANDS[args.command](cfg, out, seed, workers)
        write_manifest(out, args.command, cfg)
    except (ConfigError, jsonschema.ValidationError) as exc:
        _diag("config-error", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a single diagnostic line
        _diag("runtime-error", f"{type(exc).__name__}: {exc}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
