"""Domain types, the offline dataset container and its on-disk format.

A dataset is persisted as two files sharing a prefix: ``<prefix>.csv`` holds
one row per transition and ``<prefix>.meta.json`` holds provenance and the
input normalization statistics.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

STD_FLOOR = 1e-8
NORM_TOLERANCE = 1e-8
TIERS = ("random", "medium", "expert", "mixed", "medium-expert")


class DatasetError(ValueError):
    """Raised for malformed, inconsistent or unreadable datasets."""


def _frozen(x, dtype=np.float64) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool = False

    def __post_init__(self):
        s = _frozen(np.atleast_1d(self.state))
        sn = _frozen(np.atleast_1d(self.next_state))
        a = _frozen(np.atleast_1d(self.action))
        if s.shape != sn.shape:
            raise DatasetError("state and next_state dimensions differ")
        if not (np.isfinite(s).all() and np.isfinite(sn).all() and np.isfinite(a).all()
                and math.isfinite(self.reward)):
            raise DatasetError("non-finite value in transition")
        object.__setattr__(self, "state", s)
        object.__setattr__(self, "next_state", sn)
        object.__setattr__(self, "action", a)
        object.__setattr__(self, "reward", float(self.reward))
        object.__setattr__(self, "terminal", bool(self.terminal))


@dataclass(frozen=True)
class DiagonalGaussian:
    """Gaussian over (next-state dims..., reward) with per-dimension variance."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = _frozen(self.mean)
        var = _frozen(self.var)
        if mean.shape != var.shape or mean.ndim != 1:
            raise ValueError("mean and var must be 1-D vectors of equal length")
        if not (np.isfinite(mean).all() and np.isfinite(var).all()) or (var < 0).any():
            raise ValueError("mean must be finite and var finite and non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class EnsemblePrediction:
    """Per-member Gaussians for a single (state, action) input."""

    members: tuple
    elite_mask: tuple

    def __post_init__(self):
        members = tuple(self.members)
        mask = tuple(bool(m) for m in self.elite_mask)
        if not members:
            raise ValueError("ensemble prediction needs at least one member")
        if len(mask) != len(members):
            raise ValueError("elite_mask length must match member count")
        if not any(mask):
            raise ValueError("at least one member must be elite")
        if len({m.dim for m in members}) != 1:
            raise ValueError("members must share dimension")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "elite_mask", mask)

    @classmethod
    def from_arrays(cls, means, variances, elite_mask=None) -> "EnsemblePrediction":
        means = np.asarray(means, dtype=np.float64)
        variances = np.asarray(variances, dtype=np.float64)
        if elite_mask is None:
            elite_mask = [True] * means.shape[0]
        return cls(tuple(DiagonalGaussian(m, v) for m, v in zip(means, variances)), tuple(elite_mask))

    @property
    def means(self) -> np.ndarray:
        return np.stack([m.mean for m in self.members])

    @property
    def variances(self) -> np.ndarray:
        return np.stack([m.var for m in self.members])

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True)
class Dataset:
    """Offline transitions stored column-wise.

    ``states``/``next_states`` are ``(J, d_s)``, ``actions`` is ``(J, d_a)``,
    ``rewards`` and ``terminals`` are ``(J,)``.  ``terminals`` marks the last
    transition of each behaviour episode.  ``meta`` holds ``env_id``, ``tier``,
    ``seed`` and ``size`` plus any extra provenance (behaviour policy tags,
    episode returns).
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    meta: dict = field(default_factory=dict)
    input_mean: np.ndarray = None
    input_std: np.ndarray = None

    def __post_init__(self):
        s = _frozen(self.states)
        a = _frozen(self.actions)
        r = _frozen(self.rewards)
        sn = _frozen(self.next_states)
        term = _frozen(self.terminals, dtype=bool)
        if s.ndim != 2 or s.shape[0] == 0:
            raise DatasetError("empty dataset")
        n = s.shape[0]
        if a.ndim != 2 or a.shape[0] != n or sn.shape != s.shape or r.shape != (n,) or term.shape != (n,):
            raise DatasetError("dimension mismatch between dataset columns")
        for name, col in (("states", s), ("actions", a), ("rewards", r), ("next_states", sn)):
            bad = ~np.isfinite(col.reshape(n, -1)).all(axis=1)
            if bad.any():
                raise DatasetError(f"non-finite value at row {int(np.argmax(bad))} ({name})")
        mean, std = input_statistics(s, a)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "next_states", sn)
        object.__setattr__(self, "terminals", term)
        meta = dict(self.meta)
        meta["size"] = n
        object.__setattr__(self, "meta", meta)
        object.__setattr__(self, "input_mean", _frozen(mean))
        object.__setattr__(self, "input_std", _frozen(std))

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition], meta: dict | None = None) -> "Dataset":
        transitions = list(transitions)
        if not transitions:
            raise DatasetError("empty dataset")
        d_s = transitions[0].state.shape[0]
        d_a = transitions[0].action.shape[0]
        for k, t in enumerate(transitions):
            if t.state.shape[0] != d_s or t.action.shape[0] != d_a:
                raise DatasetError(f"dimension mismatch at row {k}")
        return cls(
            states=np.stack([t.state for t in transitions]),
            actions=np.stack([t.action for t in transitions]),
            rewards=np.array([t.reward for t in transitions]),
            next_states=np.stack([t.next_state for t in transitions]),
            terminals=np.array([t.terminal for t in transitions], dtype=bool),
            meta=meta or {},
        )

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def d_s(self) -> int:
        return self.states.shape[1]

    @property
    def d_a(self) -> int:
        return self.actions.shape[1]

    @property
    def transitions(self) -> list[Transition]:
        return [
            Transition(self.states[i], self.actions[i], self.rewards[i], self.next_states[i], self.terminals[i])
            for i in range(len(self))
        ]

    @property
    def inputs(self) -> np.ndarray:
        """Concatenated (state, action) rows in environment units."""
        return np.concatenate([self.states, self.actions], axis=1)

    def episode_returns(self) -> np.ndarray:
        """Undiscounted returns of each complete behaviour episode."""
        ends = np.flatnonzero(self.terminals)
        if ends.size == 0:
            return np.array([self.rewards.sum()])
        cs = np.concatenate([[0.0], np.cumsum(self.rewards)])
        starts = np.concatenate([[0], ends[:-1] + 1])
        return cs[ends + 1] - cs[starts]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx],
                       self.terminals[idx], meta=dict(self.meta))


def input_statistics(states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([states, actions], axis=1)
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    return mean, std


def normalize_input(ds: Dataset, s, a) -> np.ndarray:
    """Whiten ``(s, a)`` with the dataset's global input statistics.

    Works on single vectors or on batches (leading axes are broadcast).
    """
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.shape[-1] != ds.d_s or a.shape[-1] != ds.d_a:
        raise ValueError(f"dimension mismatch: expected state {ds.d_s} and action {ds.d_a}, "
                         f"got {s.shape[-1]} and {a.shape[-1]}")
    x = np.concatenate([s, a], axis=-1)
    return (x - ds.input_mean) / ds.input_std


# ---------------------------------------------------------------------------
# persistence


def _fmt(x: float) -> str:
    return "%.17g" % x


def _prefix(path) -> Path:
    p = Path(path)
    if p.name.endswith(".csv"):
        p = p.with_name(p.name[: -len(".csv")])
    return p


def csv_header(d_s: int, d_a: int) -> list[str]:
    return ([f"s_{i}" for i in range(d_s)] + [f"a_{i}" for i in range(d_a)] + ["r"]
            + [f"sn_{i}" for i in range(d_s)] + ["terminal"])


def dumps_json(obj: Any) -> str:
    """Deterministic JSON text (sorted keys, shortest round-trip floats)."""
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    return obj


def dataset_write(ds: Dataset, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.meta.json``; returns both paths."""
    if len(ds) == 0:
        raise DatasetError("empty dataset")
    prefix = _prefix(path)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = prefix.with_name(prefix.name + ".csv")
    meta_path = prefix.with_name(prefix.name + ".meta.json")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(ds.d_s, ds.d_a))
        for i in range(len(ds)):
            row = [_fmt(v) for v in ds.states[i]] + [_fmt(v) for v in ds.actions[i]]
            row.append(_fmt(ds.rewards[i]))
            row += [_fmt(v) for v in ds.next_states[i]]
            row.append("1" if ds.terminals[i] else "0")
            w.writerow(row)
    doc = {
        "meta": ds.meta,
        "d_s": ds.d_s,
        "d_a": ds.d_a,
        "norm": {"input_mean": ds.input_mean, "input_std": ds.input_std},
    }
    meta_path.write_text(dumps_json(doc))
    return csv_path, meta_path


def dataset_read(path) -> Dataset:
    prefix = _prefix(path)
    csv_path = prefix.with_name(prefix.name + ".csv")
    meta_path = prefix.with_name(prefix.name + ".meta.json")
    for p in (csv_path, meta_path):
        if not p.exists():
            raise DatasetError(f"missing file {p}")
    doc = json.loads(meta_path.read_text())
    d_s, d_a = int(doc["d_s"]), int(doc["d_a"])
    width = 2 * d_s + d_a + 2
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != csv_header(d_s, d_a):
            raise DatasetError("CSV header does not match meta dimensions")
        rows = []
        for k, row in enumerate(reader):
            if len(row) != width:
                raise DatasetError(f"malformed row {k}: expected {width} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row[:-1]]
            except ValueError as exc:
                raise DatasetError(f"malformed row {k}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DatasetError(f"non-finite value at row {k}")
            if row[-1] not in ("0", "1"):
                raise DatasetError(f"malformed terminal flag at row {k}")
            rows.append(vals + [row[-1] == "1"])
    if not rows:
        raise DatasetError("empty dataset")
    meta = doc["meta"]
    if int(meta.get("size", len(rows))) != len(rows):
        raise DatasetError(f"meta size J={meta.get('size')} does not match {len(rows)} CSV rows")
    data = np.array([r[:-1] for r in rows], dtype=np.float64)
    ds = Dataset(
        states=data[:, :d_s],
        actions=data[:, d_s:d_s + d_a],
        rewards=data[:, d_s + d_a],
        next_states=data[:, d_s + d_a + 1:],
        terminals=np.array([r[-1] for r in rows], dtype=bool),
        meta=meta,
    )
    stored_mean = np.asarray(doc["norm"]["input_mean"], dtype=np.float64)
    stored_std = np.asarray(doc["norm"]["input_std"], dtype=np.float64)
    if (stored_mean.shape != ds.input_mean.shape
            or np.max(np.abs(stored_mean - ds.input_mean)) > NORM_TOLERANCE
            or np.max(np.abs(stored_std - ds.input_std)) > NORM_TOLERANCE):
        raise DatasetError("stored normalization statistics deviate from recomputed values")
    return ds


def write_rows_csv(path, header: Iterable[str], rows: Iterable[Iterable[Any]]) -> Path:
    """Small helper for report tables: floats as shortest round-trip text."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path
