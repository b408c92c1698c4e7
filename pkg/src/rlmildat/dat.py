"""Domain-adversarial branch: GRL, language classifier, domain loss, lambda schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, EmptyBagError
from .mil import MLP


class DomainClassifier:
    """ReLU MLP d -> hd -> num_languages producing language logits."""

    def __init__(self, d, hd, num_languages, rng):
        self.num_languages = int(num_languages)
        self.mlp = MLP((d, hd, num_languages), rng, "domain", "domain")

    def __call__(self, h):
        return self.mlp(h)

    def parameters(self):
        return self.mlp.parameters()


def domain_logits(classifier, h_selected, lam, lang_ids=None):
    """Language logits for selected instance encodings, through the gradient reversal layer."""
    if h_selected.shape[0] < 1:
        raise EmptyBagError("domain_logits: no selected instances")
    if lang_ids is not None and (np.asarray(lang_ids) < 0).any():
        raise ContractError("domain_logits: padded row (lang-id -1) reached the domain branch")
    return classifier(ad.grl(h_selected, lam))


def domain_loss(logits, lang_ids):
    lang_ids = np.asarray(lang_ids)
    if (lang_ids < 0).any():
        raise ContractError("domain_loss: sentinel lang-id -1 must be filtered before the domain loss")
    return ad.cross_entropy(logits, lang_ids)


@dataclass(frozen=True)
class GrlSchedule:
    mode: str = "constant"
    lambda0: float = 1.0
    horizon: int = 10

    def __post_init__(self):
        if self.mode not in ("constant", "ramp"):
            raise ConfigError(f"unknown lambda schedule {self.mode!r}")
        if self.lambda0 < 0:
            raise ConfigError("lambda0 must be >= 0")
        if self.mode == "ramp" and self.horizon <= 0:
            raise ConfigError("ramp horizon must be positive")


def lambda_at(epoch, schedule):
    """GRL coefficient at ``epoch`` (0-based).

    The ramp is lambda0 * (2 / (1 + exp(-10 p)) - 1) with p = min(epoch / horizon, 1).
    """
    if schedule.mode == "constant":
        return float(schedule.lambda0)
    p = min(epoch / schedule.horizon, 1.0)
    return float(schedule.lambda0 * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0))
