"""Uncertainty penalties computed from an ensemble of diagonal Gaussians.

All batch functions take ``means`` and ``variances`` shaped ``(N, B, D)``
(members, inputs, output dims) and return one non-negative scalar per input.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import EnsemblePrediction

LOG2PI = float(np.log(2.0 * np.pi))
VAR_FLOOR = 1e-12


class PenaltyKind(str, enum.Enum):
    MAX_ALEATORIC = "max_aleatoric"
    MAX_PAIRWISE_DIFF = "max_pairwise_diff"
    LL_VAR = "ll_var"
    LOO_KL = "loo_kl"
    ENSEMBLE_STD = "ensemble_std"
    ENSEMBLE_VAR = "ensemble_var"

    @classmethod
    def parse(cls, value) -> "PenaltyKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"maxaleatoric": "max_aleatoric", "maxpairwisediff": "max_pairwise_diff",
                   "llvar": "ll_var", "lookl": "loo_kl", "ensemblestd": "ensemble_std",
                   "ensemblevar": "ensemble_var"}
        key = aliases.get(key.replace("_", ""), key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown penalty kind {value!r}") from None

    def __str__(self):
        return self.value


ALL_KINDS = tuple(PenaltyKind)


@dataclass
class PenaltyContext:
    """How penalties read an ensemble prediction.

    ``rng`` drives the member selection of LL Var and LOO KL.  With
    ``use_all_members`` false only elites enter the penalty.  ``aleatoric_norm``
    chooses whether Max Aleatoric takes the norm of the variance vector
    (``"variance"``) or of the standard deviations (``"std"``).
    """

    dims_used: str = "state_and_reward"
    use_all_members: bool = True
    aleatoric_norm: str = "variance"
    seed: int = 0
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self.dims_used not in ("state_and_reward", "state_only"):
            raise ValueError("dims_used must be 'state_and_reward' or 'state_only'")
        if self.aleatoric_norm not in ("variance", "std"):
            raise ValueError("aleatoric_norm must be 'variance' or 'std'")
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)


def select(means, variances, ctx: PenaltyContext, elite_mask=None):
    """Apply the context's member and dimension selection."""
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if not ctx.use_all_members and elite_mask is not None:
        idx = np.flatnonzero(elite_mask)
        means, variances = means[idx], variances[idx]
    if ctx.dims_used == "state_only":
        means, variances = means[..., :-1], variances[..., :-1]
    return means, variances


def mixture_moments(means, variances=None):
    """Mean and variance of the equal-weight mixture along the member axis.

    Accepts an EnsemblePrediction or arrays with members on axis 0.  The
    variance ``mean(var + mu^2) - mu*^2`` is evaluated as ``mean(var) +
    mean((mu - mu*)^2)``, which is the same quantity without cancellation
    and equals the mean aleatoric variance exactly when members agree.
    """
    if isinstance(means, EnsemblePrediction):
        means, variances = means.means, means.variances
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    mu = means.mean(axis=0)
    d = means - mu
    var = variances.mean(axis=0) + (d * d).mean(axis=0)
    return mu, np.maximum(var, 0.0)


def gaussian_kl(mu1, var1, mu2, var2):
    """KL(N(mu1, var1) || N(mu2, var2)) for diagonal Gaussians, summed over the last axis."""
    return (0.5 * np.log(var2 / var1) + (var1 + (mu1 - mu2) ** 2) / (2.0 * var2) - 0.5).sum(axis=-1)


def gaussian_logpdf(x, mu, var):
    return -0.5 * (LOG2PI + np.log(var) + (x - mu) ** 2 / var).sum(axis=-1)


def _max_aleatoric(means, variances, ctx, rng):
    v = variances if ctx.aleatoric_norm == "variance" else np.sqrt(variances)
    return np.sqrt((v * v).sum(axis=-1)).max(axis=0)


def _max_pairwise(means, variances, ctx, rng):
    N = means.shape[0]
    best = np.zeros(means.shape[1])
    for i in range(N):
        for j in range(i + 1, N):
            d = means[i] - means[j]
            best = np.maximum(best, np.sqrt((d * d).sum(axis=-1)))
    return best


def _ensemble_var(means, variances, ctx, rng):
    _, var = mixture_moments(means, variances)
    return np.sqrt((var * var).sum(axis=-1))


def _ensemble_std(means, variances, ctx, rng):
    _, var = mixture_moments(means, variances)
    return np.sqrt(var.sum(axis=-1))


def _ll_var(means, variances, ctx, rng):
    N, B, _ = means.shape
    if N == 1:
        return np.zeros(B)
    rows = np.arange(B)
    pick = rng.integers(N, size=B)
    mu, var = means[pick, rows], variances[pick, rows]
    x = mu + np.sqrt(var) * rng.standard_normal(mu.shape)
    ll = gaussian_logpdf(x[None], means, np.maximum(variances, VAR_FLOOR))
    # identical members must give exactly zero
    out = ll.var(axis=0)
    return np.where((ll == ll[:1]).all(axis=0), 0.0, out)


def _loo_kl(means, variances, ctx, rng):
    N, B, _ = means.shape
    if N < 2:
        raise ValueError("LOO KL needs >= 2 members")
    rows = np.arange(B)
    pick = rng.integers(N, size=B)
    keep = np.ones((N, B), dtype=bool)
    keep[pick, rows] = False
    rest_mu = (means * keep[..., None]).sum(axis=0) / (N - 1)
    rest_var = ((variances + means * means) * keep[..., None]).sum(axis=0) / (N - 1) - rest_mu ** 2
    rest_var = np.maximum(rest_var, VAR_FLOOR)
    mu1, var1 = means[pick, rows], np.maximum(variances[pick, rows], VAR_FLOOR)
    kl = gaussian_kl(mu1, var1, rest_mu, rest_var)
    same = (means == means[pick, rows][None]).all(axis=(0, 2)) & (variances == variances[pick, rows][None]).all(axis=(0, 2))
    return np.where(same, 0.0, np.maximum(kl, 0.0))


_IMPL = {
    PenaltyKind.MAX_ALEATORIC: _max_aleatoric,
    PenaltyKind.MAX_PAIRWISE_DIFF: _max_pairwise,
    PenaltyKind.ENSEMBLE_VAR: _ensemble_var,
    PenaltyKind.ENSEMBLE_STD: _ensemble_std,
    PenaltyKind.LL_VAR: _ll_var,
    PenaltyKind.LOO_KL: _loo_kl,
}


def penalty_batch(kind, means, variances, ctx: PenaltyContext | None = None, elite_mask=None, rng=None):
    """Penalty of ``kind`` for every input in a ``(N, B, D)`` prediction batch."""
    ctx = ctx or PenaltyContext()
    kind = PenaltyKind.parse(kind)
    means, variances = select(means, variances, ctx, elite_mask)
    return _IMPL[kind](means, variances, ctx, rng if rng is not None else ctx.rng)


def all_penalties(means, variances, ctx: PenaltyContext | None = None, elite_mask=None, kinds=ALL_KINDS):
    ctx = ctx or PenaltyContext()
    return {PenaltyKind.parse(k): penalty_batch(k, means, variances, ctx, elite_mask) for k in kinds}


def compute_penalty(kind, pred: EnsemblePrediction, ctx: PenaltyContext | None = None) -> float:
    means = pred.means[:, None, :]
    variances = pred.variances[:, None, :]
    return float(penalty_batch(kind, means, variances, ctx, np.array(pred.elite_mask))[0])


class DegeneratePenaltyWarning(RuntimeWarning):
    pass


def normalize_penalties(values, mode: str = "minmax_01") -> np.ndarray:
    """Rescale penalties over an evaluation set.

    ``minmax_01`` maps onto ``[0, 1]``; a constant input gives zeros and a
    ``DegeneratePenaltyWarning``.  ``zscore`` subtracts the mean and divides
    by the (population) standard deviation.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty set")
    if mode == "minmax_01":
        lo, hi = x.min(), x.max()
        if not hi > lo:
            warnings.warn("constant penalty values; min-max normalization is degenerate",
                          DegeneratePenaltyWarning, stacklevel=2)
            return np.zeros_like(x)
        return (x - lo) / (hi - lo)
    if mode == "zscore":
        sd = x.std()
        if not sd > 0:
            raise ValueError("zscore needs non-zero standard deviation")
        return (x - x.mean()) / sd
    raise ValueError(f"unknown normalization mode {mode!r}")
