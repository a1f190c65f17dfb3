"""Probabilistic ensemble dynamics model.

Each member is a small SiLU MLP mapping whitened ``(s, a)`` to a diagonal
Gaussian over ``(s' - s, r)``.  Members are stored stacked along a leading
axis so the whole ensemble trains and predicts in one batched matmul, but
every member has its own initialisation and its own minibatch order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Dataset, EnsemblePrediction, to_jsonable

LOG2PI = float(np.log(2.0 * np.pi))


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_total: int = 7
    n_elite: int = 5
    hidden_sizes: tuple = (64, 64)
    learning_rate: float = 1e-3
    weight_decay: tuple | None = None  # one entry per layer; None -> 1e-4 everywhere
    epochs: int = 60
    batch_size: int = 256
    logvar_clamp: tuple = (-10.0, 4.0)
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        object.__setattr__(self, "logvar_clamp", tuple(float(v) for v in self.logvar_clamp))
        n_layers = len(self.hidden_sizes) + 1
        wd = self.weight_decay
        wd = (1e-4,) * n_layers if wd is None else tuple(float(w) for w in wd)
        if len(wd) != n_layers:
            raise ValueError(f"weight_decay needs {n_layers} entries, got {len(wd)}")
        object.__setattr__(self, "weight_decay", wd)
        if not 1 <= self.n_elite <= self.n_total <= 15:
            raise ValueError("need 1 <= n_elite <= n_total <= 15")
        if not 0.0 < self.validation_fraction < 0.5:
            raise ValueError("validation_fraction must lie in (0, 0.5)")
        lo, hi = self.logvar_clamp
        if not lo < hi:
            raise ValueError("logvar_clamp min must be below max")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# network maths; params is a list of (W, b) with W (N, in, out), b (N, out)

def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def soft_clamp(raw, lo, hi):
    """Smoothly saturate ``raw`` into ``(lo, hi)``; returns value and d/draw."""
    upper = hi - _softplus(hi - raw)
    out = lo + _softplus(upper - lo)
    deriv = _sigmoid(upper - lo) * _sigmoid(hi - raw)
    return out, deriv


def init_params(sizes, n_members, rng_list):
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = np.stack([r.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in) for r in rng_list])
        params.append((W, np.zeros((n_members, fan_out))))
    return params


def forward(params, X, clamp):
    """X is ``(N, B, in)``; returns mean, logvar (each ``(N, B, D)``) and a cache."""
    acts = [X]
    pre = []
    h = X
    for W, b in params[:-1]:
        z = h @ W + b[:, None, :]
        pre.append(z)
        h = z * _sigmoid(z)
        acts.append(h)
    W, b = params[-1]
    out = h @ W + b[:, None, :]
    D = out.shape[-1] // 2
    logvar, dlv = soft_clamp(out[..., D:], *clamp)
    return out[..., :D], logvar, (acts, pre, dlv)


def nll_and_grad(params, X, Y, weight_decay, clamp, need_grad=True):
    """Per-member loss ``(N,)`` and gradients with the same structure as params."""
    mean, logvar, (acts, pre, dlv) = forward(params, X, clamp)
    B = X.shape[1]
    inv_var = np.exp(-logvar)
    err = Y - mean
    sq = err * err * inv_var
    loss = 0.5 * (LOG2PI + logvar + sq).sum(axis=-1).mean(axis=-1)
    loss = loss + sum(wd * (W * W).sum(axis=(1, 2)) for wd, (W, _) in zip(weight_decay, params))
    if not need_grad:
        return loss, None
    g_mean = -err * inv_var / B
    g_lv = 0.5 * (1.0 - sq) / B * dlv
    g = np.concatenate([g_mean, g_lv], axis=-1)
    grads = [None] * len(params)
    for layer in range(len(params) - 1, -1, -1):
        W, _ = params[layer]
        h = acts[layer]
        gW = np.swapaxes(h, 1, 2) @ g + 2.0 * weight_decay[layer] * W
        gb = g.sum(axis=1)
        grads[layer] = (gW, gb)
        if layer:
            gh = g @ np.swapaxes(W, 1, 2)
            z = pre[layer - 1]
            sz = _sigmoid(z)
            g = gh * (sz * (1.0 + z * (1.0 - sz)))
    return loss, grads


def _stack1(member):
    return [(np.asarray(W)[None], np.asarray(b)[None]) for W, b in member]


def nll_loss(member, batch, weight_decay=None, clamp=(-10.0, 4.0)) -> float:
    """Gaussian NLL of one member on ``batch = (X, Y)`` plus weight decay.

    ``member`` is a list of ``(W, b)`` pairs without the ensemble axis and
    ``X`` holds whitened inputs.
    """
    X, Y = (np.asarray(v, dtype=np.float64) for v in batch)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    wd = weight_decay if weight_decay is not None else (0.0,) * len(member)
    loss, _ = nll_and_grad(_stack1(member), X[None], Y[None], wd, clamp, need_grad=False)
    value = float(loss[0])
    if not np.isfinite(value):
        raise TrainingError("non-finite loss")
    return value


def gradient(member, batch, weight_decay=None, clamp=(-10.0, 4.0)):
    X, Y = (np.asarray(v, dtype=np.float64) for v in batch)
    wd = weight_decay if weight_decay is not None else (0.0,) * len(member)
    _, grads = nll_and_grad(_stack1(member), X[None], Y[None], wd, clamp)
    return [(gW[0], gb[0]) for gW, gb in grads]


class _Adam:
    """Adam over the flattened list of (W, b) arrays."""

    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        flat = [p for pair in params for p in pair]
        self.m = [np.zeros_like(p) for p in flat]
        self.v = [np.zeros_like(p) for p in flat]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        flat = [p for pair in params for p in pair]
        gflat = [g for pair in grads for g in pair]
        new = []
        for k, (p, g) in enumerate(zip(flat, gflat)):
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            new.append(p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))
        return [(new[2 * i], new[2 * i + 1]) for i in range(len(params))]


# ---------------------------------------------------------------------------


@dataclass
class EnsembleModel:
    config: ModelConfig
    params: list
    elite_mask: np.ndarray
    input_mean: np.ndarray
    input_std: np.ndarray
    d_s: int
    d_a: int
    train_meta: dict = field(default_factory=dict)

    @property
    def n_members(self) -> int:
        return self.params[0][0].shape[0]

    @property
    def elite_indices(self) -> np.ndarray:
        return np.flatnonzero(self.elite_mask)

    def predict_arrays(self, states, actions):
        """Batched prediction: returns means and variances of shape ``(N, B, d_s + 1)``.

        Mean state dims are absolute next states (input state plus predicted delta).
        """
        S = np.atleast_2d(np.asarray(states, dtype=np.float64))
        A = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if S.shape[1] != self.d_s or A.shape[1] != self.d_a:
            raise ValueError("dimension mismatch with model")
        if not (np.isfinite(S).all() and np.isfinite(A).all()):
            raise ValueError("non-finite input")
        X = (np.concatenate([S, A], axis=1) - self.input_mean) / self.input_std
        Xn = np.broadcast_to(X, (self.n_members,) + X.shape)
        mean, logvar, _ = forward(self.params, Xn, self.config.logvar_clamp)
        mean = mean.copy()
        mean[..., : self.d_s] += S
        return mean, np.exp(logvar)

    def subset(self, indices) -> "EnsembleModel":
        """Model made of the given members; elites re-picked by validation MSE."""
        idx = np.asarray(indices, dtype=int)
        mse = np.asarray(self.train_meta["val_mse"])[idx]
        n_elite = min(self.config.n_elite, len(idx))
        mask = np.zeros(len(idx), dtype=bool)
        mask[np.argsort(mse, kind="stable")[:n_elite]] = True
        meta = dict(self.train_meta)
        meta["val_mse"] = mse.tolist()
        cfg = ModelConfig(**{**self.config.to_dict(), "n_total": len(idx), "n_elite": n_elite})
        return EnsembleModel(cfg, [(W[idx], b[idx]) for W, b in self.params], mask,
                             self.input_mean, self.input_std, self.d_s, self.d_a, meta)


def _targets(ds: Dataset):
    return np.concatenate([ds.next_states - ds.states, ds.rewards[:, None]], axis=1)


def split_indices(n, fraction, seed):
    n_val = max(1, int(round(fraction * n)))
    if n - n_val < 1:
        raise TrainingError("dataset too small for a validation split")
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 7])).permutation(n)
    return perm[n_val:], perm[:n_val]


def train_ensemble(ds: Dataset, cfg: ModelConfig) -> EnsembleModel:
    """Fit every member on Gaussian NLL; pick elites by held-out MSE.

    Each member keeps the epoch with its best validation MSE.
    """
    if len(ds) < 10:
        raise TrainingError(f"need at least 10 transitions to train, got {len(ds)}")
    X = (ds.inputs - ds.input_mean) / ds.input_std
    Y = _targets(ds)
    tr, va = split_indices(len(ds), cfg.validation_fraction, cfg.seed)
    N = cfg.n_total
    seeds = np.random.SeedSequence(int(cfg.seed)).spawn(N)
    rngs = [np.random.default_rng(s) for s in seeds]
    sizes = [X.shape[1], *cfg.hidden_sizes, 2 * Y.shape[1]]
    params = init_params(sizes, N, rngs)
    opt = _Adam(params, cfg.learning_rate)
    Xv = np.broadcast_to(X[va], (N,) + X[va].shape)
    Yv = Y[va]

    def val_mse(p):
        mean, _, _ = forward(p, Xv, cfg.logvar_clamp)
        return ((mean - Yv) ** 2).mean(axis=(1, 2))

    best = val_mse(params)
    best_params = [(W.copy(), b.copy()) for W, b in params]
    best_epoch = np.zeros(N, dtype=int)
    n_tr = len(tr)
    bs = min(cfg.batch_size, n_tr)
    for epoch in range(1, cfg.epochs + 1):
        order = np.stack([tr[r.permutation(n_tr)] for r in rngs])
        for start in range(0, n_tr, bs):
            idx = order[:, start:start + bs]
            loss, grads = nll_and_grad(params, X[idx], Y[idx], cfg.weight_decay, cfg.logvar_clamp)
            if not np.isfinite(loss).all():
                bad = int(np.flatnonzero(~np.isfinite(loss))[0])
                raise TrainingError(f"non-finite loss for member {bad} at epoch {epoch}")
            params = opt.step(params, grads)
        cur = val_mse(params)
        improved = cur < best
        if improved.any():
            for i, (W, b) in enumerate(params):
                best_params[i][0][improved] = W[improved]
                best_params[i][1][improved] = b[improved]
            best = np.where(improved, cur, best)
            best_epoch[improved] = epoch
    mask = np.zeros(N, dtype=bool)
    mask[np.argsort(best, kind="stable")[: cfg.n_elite]] = True
    meta = {
        "val_mse": best.tolist(),
        "best_epoch": best_epoch.tolist(),
        "epochs_run": cfg.epochs,
        "dataset": {k: ds.meta.get(k) for k in ("env_id", "tier", "seed", "size")},
    }
    return EnsembleModel(cfg, best_params, mask, ds.input_mean.copy(), ds.input_std.copy(),
                         ds.d_s, ds.d_a, meta)


def predict(model, s, a) -> EnsemblePrediction:
    mean, var = model.predict_arrays(np.asarray(s)[None], np.asarray(a)[None])
    return EnsemblePrediction.from_arrays(mean[:, 0], var[:, 0], model.elite_mask)


def sample_next_batch(model, states, actions, rng, means=None, variances=None):
    """Sample one elite per row and draw from its Gaussian.

    Returns next states ``(B, d_s)``, rewards ``(B,)`` and member indices.
    Precomputed ``means``/``variances`` from ``predict_arrays`` may be passed.
    """
    if means is None:
        means, variances = model.predict_arrays(states, actions)
    elites = np.flatnonzero(model.elite_mask)
    if elites.size == 0:
        raise ValueError("model has no elite members")
    B = means.shape[1]
    which = elites[rng.integers(elites.size, size=B)]
    rows = np.arange(B)
    mu = means[which, rows]
    sd = np.sqrt(variances[which, rows])
    x = mu + sd * rng.standard_normal(mu.shape)
    d_s = model.d_s
    return x[:, :d_s], x[:, d_s], which


def sample_next(model, s, a, rng):
    sn, r, which = sample_next_batch(model, np.asarray(s)[None], np.asarray(a)[None], rng)
    return sn[0], float(r[0]), int(which[0])


# ---------------------------------------------------------------------------
# checkpoint: one JSON header line, then little-endian float64 parameters

def save_model(model: EnsembleModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "pessimlab-ensemble/1",
        "config": model.config.to_dict(),
        "train_meta": model.train_meta,
        "elite_mask": model.elite_mask.tolist(),
        "d_s": model.d_s,
        "d_a": model.d_a,
        "input_mean": model.input_mean,
        "input_std": model.input_std,
        "shapes": [[list(W.shape), list(b.shape)] for W, b in model.params],
    }
    blob = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes()
                    for W, b in model.params for arr in (W, b))
    text = json.dumps(to_jsonable(header), sort_keys=True, allow_nan=False).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        fh.write(blob)
    return path


def load_model(path) -> EnsembleModel:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n])
    if header.get("format") != "pessimlab-ensemble/1":
        raise ValueError(f"{path} is not an ensemble checkpoint")
    offset = 8 + n
    params = []
    for wshape, bshape in header["shapes"]:
        arrs = []
        for shape in (wshape, bshape):
            count = int(np.prod(shape))
            arrs.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64))
            offset += 8 * count
        params.append(tuple(arrs))
    cfg = header["config"]
    return EnsembleModel(
        config=ModelConfig(**cfg),
        params=params,
        elite_mask=np.array(header["elite_mask"], dtype=bool),
        input_mean=np.array(header["input_mean"], dtype=np.float64),
        input_std=np.array(header["input_std"], dtype=np.float64),
        d_s=int(header["d_s"]),
        d_a=int(header["d_a"]),
        train_meta=header["train_meta"],
    )


__all__ = ["ModelConfig", "EnsembleModel", "TrainingError", "train_ensemble", "predict",
           "sample_next", "sample_next_batch", "nll_loss", "gradient", "save_model", "load_model"]
