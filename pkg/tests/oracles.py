"""Deliberately naive reference implementations used by the tests."""

import math

from pessimlab.dynamics import gradient, init_params, nll_loss


def average_ranks(x):
    n = len(x)
    return [sum(1 for j in range(n) if x[j] < x[i]) + (sum(1 for j in range(n) if x[j] == x[i]) + 1) / 2
            for i in range(n)]


def product_moment(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    dx = [v - mx for v in x]
    dy = [v - my for v in y]
    r = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(math.fsum(a * a for a in dx) * math.fsum(b * b for b in dy))
    return min(1.0, max(-1.0, r))


def spearman(x, y):
    return product_moment(average_ranks(list(x)), average_ranks(list(y)))


def auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1 for p in pos for q in neg if p > q)
    ties = sum(1 for p in pos for q in neg if p == q)
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def average_precision(scores, labels):
    n_pos = sum(1 for l in labels if l)
    ap, prev = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, l in zip(scores, labels) if s >= t and l)
        fp = sum(1 for s, l in zip(scores, labels) if s >= t and not l)
        recall, precision = tp / n_pos, tp / (tp + fp)
        ap += (recall - prev) * precision
        prev = recall
    return ap


def prob_improvement(xs_by_task, ys_by_task):
    vals = []
    for xs, ys in zip(xs_by_task, ys_by_task):
        wins = sum(1 for a in xs for b in ys if a > b)
        ties = sum(1 for a in xs for b in ys if a == b)
        vals.append((wins + 0.5 * ties) / (len(xs) * len(ys)))
    return sum(vals) / len(vals)


def _member(rng, sizes):
    return [(W[0], b[0] + rng.normal(size=b[0].shape) * 0.1)
            for W, b in init_params(sizes, 1, [rng])]


def finite_difference_check(rng, n_params=32, eps=1e-4):
    d_in, d_out = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    hidden = [int(h) for h in rng.integers(3, 9, size=int(rng.integers(1, 3)))]
    member = _member(rng, [d_in, *hidden, 2 * d_out])
    B = int(rng.integers(1, 16))
    batch = (rng.normal(size=(B, d_in)), rng.normal(size=(B, d_out)))
    wd = tuple(rng.uniform(0, 1e-2, size=len(member)))
    grads = gradient(member, batch, weight_decay=wd)
    coords = [(l, k, int(i)) for l in range(len(member)) for k in (0, 1)
              for i in range(member[l][k].size)]
    pick = rng.choice(len(coords), size=min(n_params, len(coords)), replace=False)
    worst = 0.0
    for j in pick:
        l, k, i = coords[j]
        plus = [(W.copy(), b.copy()) for W, b in member]
        minus = [(W.copy(), b.copy()) for W, b in member]
        plus[l][k].flat[i] += eps
        minus[l][k].flat[i] -= eps
        fd = (nll_loss(plus, batch, wd) - nll_loss(minus, batch, wd)) / (2 * eps)
        g = grads[l][k].flat[i]
        worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-6))
    return worst
