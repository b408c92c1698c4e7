"""Training loops for MIL, RLMIL and RLMIL-DAT, early stopping and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value, no_grad
from .dat import GrlSchedule, domain_logits, domain_loss, lambda_at
from .errors import ConfigError, NumericError
from .model import ModelBundle
from .policy import policy_loss, regularizer, reward, select, sequence_log_probs
from .stats import accuracy, macro_f1

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "l_task", "l_p", "l_reg", "l_domain", "l_total", "val_macro_f1")
LOSS_KEYS = ("l_task", "l_p", "l_reg", "l_domain", "l_total")


@dataclass
class TrainState:
    epoch: int = 0
    best_score: float = -math.inf
    best_epoch: int = 0
    since_improvement: int = 0
    history: list = field(default_factory=list)


def _bag_rows(bag, cap):
    n = min(int(bag.n_real), cap)
    return bag.embeddings[:n].astype(np.float64), np.asarray(bag.lang_ids[:n], dtype=np.int64)


def _check_finite(rec, trace):
    for k, v in rec.items():
        if not math.isfinite(v):
            raise NumericError(f"{k} is {v}; aborting epoch", trace=trace)


def bag_losses_mil(model, bag, label, cfg, scale=1.0):
    x, _ = _bag_rows(bag, cfg.whole_bag_size)
    h = model.encoder(Value(x))
    l_task = ad.cross_entropy(model.head(h), [label])
    ad.backward(l_task, scale)
    v = float(l_task.data)
    return {"l_task": v, "l_p": 0.0, "l_reg": 0.0, "l_domain": 0.0, "l_total": 0.0}


def subset_logits(head, h_data, subsets):
    """Class logits for each row subset of a fixed (non-differentiable) encoding."""
    with no_grad():
        hv = Value(h_data)
        pooled = ad.stack([head.pool(ad.take(hv, idx)) for idx in subsets])
        return head.classify(pooled).data


def bag_losses_rl(model, bag, label, cfg, lam, rng, scale=1.0):
    """One super-bag of the RL-MIL(-DAT) update; gradients are accumulated, not applied.

    The greedy subset drives the task loss (and the domain loss); sampled
    subsets drive the policy reward.
    """
    x, lids = _bag_rows(bag, cfg.whole_bag_size)
    n = len(x)
    real = np.arange(n)
    mask = np.ones(n, dtype=bool)
    h = model.encoder(Value(x))
    # the policy sees a detached copy: L_p never reaches the encoder
    logits = model.policy.logits(Value(h.data))
    probs = ad.sigmoid(logits)
    log_p = ad.log_sigmoid(logits)

    samples = select(probs.data, mask, cfg.bag_size, "sample", cfg.pool_size, rng)
    rewards = [reward(z, label, cfg.reward) for z in subset_logits(model.head, h.data, [s.chosen for s in samples])]
    greedy = select(probs.data, mask, cfg.bag_size, "greedy")[0]
    task_idx = samples[0].chosen if cfg.task_from_sample else greedy.chosen

    l_task = ad.cross_entropy(model.head(ad.take(h, task_idx)), [label])
    ad.backward(l_task, scale)

    log_probs = sequence_log_probs(log_p, [s.order for s in samples], real)
    base = model.baseline.current(rewards)
    l_p = policy_loss(log_probs, rewards, base)
    model.baseline.update(rewards)
    l_reg = regularizer(probs, mask, cfg.entropy_weight)
    l_total = ad.add(l_p, l_reg)
    l_dom = 0.0
    if model.domain is not None:
        dom_idx = real if cfg.domain_on_all else task_idx
        dl = domain_logits(model.domain, ad.take(h, dom_idx), lam, lids[dom_idx])
        l_domain = domain_loss(dl, lids[dom_idx])
        l_total = ad.add(l_total, l_domain)
        l_dom = float(l_domain.data)
    ad.backward(l_total, scale)
    return {
        "l_task": float(l_task.data),
        "l_p": float(l_p.data),
        "l_reg": float(l_reg.data),
        "l_domain": l_dom,
        "l_total": float(l_total.data),
    }


def train_epoch(model, bags, cfg, epoch=0, rng=None):
    """One pass over ``bags`` in mini-batches; returns the mean of each loss component."""
    rng = model.rngs["sample"] if rng is None else rng
    lam = lambda_at(epoch, GrlSchedule(cfg.grl_schedule, cfg.grl_lambda, cfg.grl_horizon))
    params = model.parameters()
    rates = model.rates()
    totals = dict.fromkeys(LOSS_KEYS, 0.0)
    trace = []
    for start in range(0, len(bags), cfg.batch_size):
        batch = bags[start : start + cfg.batch_size]
        scale = 1.0 / len(batch)
        for bag in batch:
            label = bag.label(cfg.label)
            if cfg.framework == "mil":
                rec = bag_losses_mil(model, bag, label, cfg, scale)
            else:
                rec = bag_losses_rl(model, bag, label, cfg, lam, rng, scale)
            trace.append(rec)
            _check_finite(rec, trace)
            for k in LOSS_KEYS:
                totals[k] += rec[k]
        ad.optimizer_step(params, rates)
    n = max(len(bags), 1)
    return {k: v / n for k, v in totals.items()}


def train_epoch_mil(model, bags, cfg, epoch=0):
    if cfg.framework != "mil":
        raise ConfigError("train_epoch_mil needs framework=mil")
    return train_epoch(model, bags, cfg, epoch)


def train_epoch_dat(model, bags, cfg, epoch=0):
    if cfg.framework != "rlmil_dat":
        raise ConfigError("train_epoch_dat needs framework=rlmil_dat")
    return train_epoch(model, bags, cfg, epoch)


# --------------------------------------------------------------- inference


def greedy_indices(model, h):
    if model.policy is None:
        return np.arange(h.shape[0])
    probs = ad.sigmoid(model.policy.logits(h)).data
    return select(probs, np.ones(len(probs), dtype=bool), model.cfg.bag_size, "greedy")[0].chosen


def predict_bag(model, bag):
    """(predicted class, selected row indices) under deterministic greedy selection."""
    x, _ = _bag_rows(bag, model.cfg.whole_bag_size)
    with no_grad():
        h = model.encoder(Value(x))
        idx = greedy_indices(model, h)
        logits = model.head(ad.take(h, idx))
    return int(np.argmax(logits.data)), idx


def evaluate(model, bags, label=None, vocab=None):
    """Macro-F1 and accuracy on ``bags`` with greedy selection."""
    label = label or model.cfg.label
    if vocab is not None and model.vocab is not None and list(vocab) != list(model.vocab):
        raise ConfigError(f"label vocab mismatch: model {model.vocab} vs split {list(vocab)}")
    if not bags:
        raise ConfigError("evaluate: empty split")
    y = np.array([b.label(label) for b in bags])
    if y.max() >= model.n_classes:
        raise ConfigError(f"split has label {y.max()} but model has {model.n_classes} classes")
    pred = np.array([predict_bag(model, b)[0] for b in bags])
    return {
        "macro_f1": macro_f1(y, pred, model.n_classes, present_only=model.cfg.present_only),
        "accuracy": accuracy(y, pred),
        "predictions": pred,
    }


def evaluate_splits(model, ds):
    vocab = ds.vocab.get(model.cfg.label)
    return {name: evaluate(model, ds.split(name), vocab=vocab) for name in ("train", "validation", "test")}


# --------------------------------------------------------------------- fit


@dataclass
class FitResult:
    model: ModelBundle
    best_state: dict
    best_score: float
    best_epoch: int
    history: list


def build_model(cfg, ds):
    return ModelBundle(cfg, ds.d, ds.n_classes(cfg.label), ds.num_languages, ds.vocab.get(cfg.label))


def fit(model, ds, cfg=None, on_epoch=None, on_improve=None):
    """Train with early stopping on validation macro-F1; the model ends at its best state.

    ``on_epoch(row)`` sees every history row; ``on_improve(state_dict, row)``
    fires only when the best validation score strictly improves.
    """
    cfg = cfg or model.cfg
    if not ds.validation:
        raise ConfigError("fit: validation split is empty")
    state = TrainState()
    best_state = model.state_dict()
    shuffle_rng = model.rngs["shuffle"]
    train = list(ds.train)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train))
        losses = train_epoch(model, [train[i] for i in order], cfg, epoch)
        val = evaluate(model, ds.validation)["macro_f1"]
        row = {"epoch": epoch + 1, **losses, "val_macro_f1": val}
        state.history.append(row)
        state.epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(row)
        if val > state.best_score:
            state.best_score, state.best_epoch, state.since_improvement = val, epoch + 1, 0
            best_state = model.state_dict()
            if on_improve is not None:
                on_improve(best_state, row)
        else:
            state.since_improvement += 1
            if state.since_improvement >= cfg.early_stopping_patience:
                log.info("early stop at epoch %d (best %.4f at %d)", epoch + 1, state.best_score, state.best_epoch)
                break
    model.load_state_dict(best_state)
    return FitResult(model, best_state, state.best_score, state.best_epoch, state.history)


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])


def read_history(path):
    with open(path, newline="", encoding="utf-8") as f:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(f)]


def gradient_check(model, bag, cfg, eps=1e-5, max_entries=20, seed=0):
    """Compare reverse-mode gradients of the MIL task loss on one bag with central differences.

    Checks up to ``max_entries`` randomly chosen entries per parameter and
    returns the worst relative error.
    """
    label = bag.label(cfg.label)
    x, _ = _bag_rows(bag, cfg.whole_bag_size)

    def loss():
        with no_grad():
            return float(ad.cross_entropy(model.head(model.encoder(Value(x))), [label]).data)

    params = model.encoder.parameters() + model.head.parameters()
    ad.reset_gradients(params)
    ad.backward(ad.cross_entropy(model.head(model.encoder(Value(x))), [label]))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        arr = p.value.data
        flat = rng.choice(arr.size, min(max_entries, arr.size), replace=False)
        for f in flat:
            i = np.unravel_index(f, arr.shape)
            orig = arr[i]
            arr[i] = orig + eps
            hi = loss()
            arr[i] = orig - eps
            lo = loss()
            arr[i] = orig
            num = (hi - lo) / (2 * eps)
            worst = max(worst, ad.rel_error(p.value.grad[i], num))
    ad.reset_gradients(params)
    return worst
