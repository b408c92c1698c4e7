"""Diagnostics on trained models: language probe on encoder outputs and selection hit rate."""

from __future__ import annotations

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import balanced_accuracy_score

from .autodiff import Value, no_grad
from .errors import DataError
from .trainer import _bag_rows, predict_bag


def encoder_outputs(model, bags):
    """Stack per-instance encoder outputs and their language ids over ``bags``."""
    feats, langs = [], []
    with no_grad():
        for b in bags:
            x, lids = _bag_rows(b, model.cfg.whole_bag_size)
            feats.append(model.encoder(Value(x)).data)
            langs.append(lids)
    if not feats:
        raise DataError("encoder_outputs: no bags")
    return np.concatenate(feats), np.concatenate(langs)


def raw_inputs(bags, cap=None):
    feats, langs = [], []
    for b in bags:
        x, lids = _bag_rows(b, cap or b.embeddings.shape[0])
        feats.append(x)
        langs.append(lids)
    return np.concatenate(feats), np.concatenate(langs)


def language_probe(train_x, train_lang, test_x, test_lang, seed=0, balanced=False):
    """Held-out accuracy of a logistic-regression language classifier.

    With ``balanced`` the score is the mean per-language recall, so chance is
    1/L whatever the language mix of the held-out set.
    """
    if len(np.unique(train_lang)) < 2:
        raise DataError("language probe needs at least two languages in the fitting set")
    clf = LogisticRegression(max_iter=2000, random_state=seed)
    clf.fit(train_x, train_lang)
    pred = clf.predict(test_x)
    if balanced:
        return float(balanced_accuracy_score(test_lang, pred))
    return float(np.mean(pred == test_lang))


def model_language_probe(model, fit_bags, eval_bags, seed=0, balanced=False):
    tx, tl = encoder_outputs(model, fit_bags)
    ex, el = encoder_outputs(model, eval_bags)
    return language_probe(tx, tl, ex, el, seed, balanced)


def selection_hit_rate(model, bags):
    """Fraction of bags whose greedy subset contains an informative instance.

    Only synthetic bags carry the ``informative`` mask; bags without one are
    an error rather than silently skipped.
    """
    hits = []
    for b in bags:
        if b.informative is None:
            raise DataError(f"bag {b.speaker_id} has no informative mask")
        _, idx = predict_bag(model, b)
        hits.append(bool(np.any(np.asarray(b.informative)[idx])))
    return float(np.mean(hits)) if hits else 0.0
