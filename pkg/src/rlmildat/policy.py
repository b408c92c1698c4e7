"""Instance-selection policy: scoring network, subset sampling and REINFORCE loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import ConfigError, EmptyBagError
from .mil import MLP


class PolicyNet:
    """Per-instance selection logit, d -> hp -> 1; P = sigmoid(logit)."""

    def __init__(self, d, hp, rng):
        self.mlp = MLP((d, hp, 1), rng, "policy", "actor")

    def logits(self, h):
        out = self.mlp(h)
        return ad.take(out, 0, axis=1)

    def parameters(self):
        return self.mlp.parameters()


@dataclass
class SelectionOutcome:
    order: np.ndarray  # indices in draw order
    log_prob: float
    entropy: float

    @property
    def chosen(self):
        return np.sort(self.order)


def _bernoulli_entropy(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log(p), 0.0) + np.where(p < 1, (1 - p) * np.log1p(-p), 0.0))
    return float(np.mean(h)) if len(h) else 0.0


def _sequence_log_prob_np(log_p, order):
    return float(_draw_terms(log_p, [order])[0][0])


def select(probs, mask, bag_size, mode="sample", pool_size=1, rng=None):
    """Choose ``bag_size`` unmasked instances.

    ``sample`` draws ``pool_size`` subsets by Gumbel-top-k over log P, which is
    sequential probability-proportional sampling without replacement; each
    outcome carries the log-probability of its draw sequence. ``greedy``
    returns the top-``bag_size`` indices by P (ties broken by lower index).
    Bags with no more than ``bag_size`` real instances select all of them
    with log-probability 0.
    """
    if bag_size < 1:
        raise ConfigError(f"bag_size must be >= 1, got {bag_size}")
    probs = np.asarray(probs, dtype=np.float64)
    real = np.flatnonzero(np.asarray(mask).astype(bool))
    if len(real) == 0:
        raise EmptyBagError("select: no unmasked instances")
    p = probs[real]
    ent = _bernoulli_entropy(p)
    if len(real) <= bag_size:
        return [SelectionOutcome(real.copy(), 0.0, ent)] * (pool_size if mode == "sample" else 1)
    with np.errstate(divide="ignore"):
        log_p = np.log(p)
    if mode == "greedy":
        order = np.lexsort((real, -p))[:bag_size]
        return [SelectionOutcome(real[order], _sequence_log_prob_np(log_p, order), ent)]
    if mode != "sample":
        raise ConfigError(f"unknown selection mode {mode!r}")
    if rng is None:
        raise ConfigError("sample mode needs an rng")
    orders = []
    for _ in range(pool_size):
        keys = log_p + rng.gumbel(size=len(p))
        orders.append(np.argsort(-keys, kind="stable")[:bag_size])
    totals, _ = _draw_terms(log_p, orders)
    return [SelectionOutcome(real[o], float(t), ent) for o, t in zip(orders, totals)]


def _draw_terms(lp, pos):
    """Sequence log-probabilities and their Jacobians for K draw orders at once.

    ``pos`` is an int array [K, s] of positions into ``lp`` [n]. Returns
    (totals [K], jac [K, n]) with jac = d total / d lp.
    """
    pos = np.asarray(pos, dtype=np.int64)
    K, s = pos.shape
    n = len(lp)
    # remaining[k, t, j]: row j not yet drawn before step t of order k
    drawn = np.zeros((K, s + 1, n), dtype=bool)
    steps = np.arange(1, s + 1)
    drawn[np.arange(K)[:, None], steps[None, :], pos] = True
    remaining = ~np.logical_or.accumulate(drawn, axis=1)[:, :s]
    masked = np.where(remaining, lp, -np.inf)
    m = masked.max(axis=2, keepdims=True)
    e = np.exp(masked - m)
    z = e.sum(axis=2, keepdims=True)
    log_z = (m + np.log(z))[..., 0]
    totals = (lp[pos] - log_z).sum(axis=1)
    jac = -(e / z).sum(axis=1)
    np.add.at(jac, (np.repeat(np.arange(K), s), pos.ravel()), 1.0)
    return totals, jac


def sequence_log_probs(log_p, orders, real):
    """Differentiable log-probabilities of several draw sequences, as one [K] Value.

    ``log_p`` is a Value over all rows (e.g. ``log_sigmoid(logits)``);
    ``real`` lists the unmasked row indices that were eligible. Each draw
    contributes log P_j - log(sum of P over rows not yet drawn).
    """
    real = np.asarray(real)
    lp = log_p.data[real]
    where = {int(j): i for i, j in enumerate(real)}
    totals = np.zeros(len(orders))
    jac = np.zeros((len(orders), len(real)))
    # group orders by length so each group is one batched evaluation
    groups = {}
    for k, order in enumerate(orders):
        if len(order) == 0 or len(real) <= len(order):
            continue
        groups.setdefault(len(order), []).append(k)
    for ks in groups.values():
        pos = [[where[int(j)] for j in orders[k]] for k in ks]
        totals[ks], jac[ks] = _draw_terms(lp, pos)
    shape = log_p.shape

    def backward(g):
        out = np.zeros(shape)
        out[real] = g @ jac
        return (out,)

    return Value(totals, (log_p,), backward, "draw_log_probs")


def sequence_log_prob(log_p, order, real):
    """Scalar form of :func:`sequence_log_probs` for a single draw sequence."""
    return ad.take(sequence_log_probs(log_p, [order], real), 0)


def reward(logits, label, kind="loglik"):
    """Reward for a selected subset: log-likelihood of the true class (or 0/1 accuracy)."""
    z = np.asarray(logits.data if isinstance(logits, Value) else logits, dtype=np.float64).ravel()
    if kind == "accuracy":
        return float(int(np.argmax(z)) == int(label))
    if kind != "loglik":
        raise ConfigError(f"unknown reward kind {kind!r}")
    m = z.max()
    return float(z[label] - m - np.log(np.exp(z - m).sum()))


class RewardBaseline:
    """Exponential moving average of rewards; first use seeds it with the current mean."""

    def __init__(self, beta=0.9, value=None):
        self.beta = beta
        self.value = value

    def current(self, rewards):
        if self.value is None:
            return float(np.mean(rewards))
        return self.value

    def update(self, rewards):
        m = float(np.mean(rewards))
        self.value = m if self.value is None else self.beta * self.value + (1 - self.beta) * m


def policy_loss(log_probs, rewards, baseline):
    """-mean_k[(reward_k - baseline) * logprob_k].

    ``log_probs`` is a [K] Value or a list of scalar Values.
    """
    if not isinstance(log_probs, Value):
        if len(log_probs) == 0:
            raise ConfigError("policy_loss needs at least one outcome")
        log_probs = ad.stack(log_probs)
    adv = np.asarray(rewards, dtype=np.float64) - float(baseline)
    if log_probs.shape != adv.shape:
        raise ConfigError(f"policy_loss: {log_probs.shape[0]} log-probs but {len(adv)} rewards")
    return ad.mul(ad.sum(ad.mul(log_probs, adv)), -1.0 / len(adv))


def regularizer(probs, mask, weight=0.01):
    """-weight * mean Bernoulli entropy of P over unmasked rows."""
    rows = np.flatnonzero(np.asarray(mask).astype(bool))
    if weight == 0 or len(rows) == 0:
        return Value(0.0)
    ent = ad.bernoulli_entropy(ad.take(probs, rows))
    return ad.mul(ad.mean(ent), -float(weight))
