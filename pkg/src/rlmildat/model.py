"""Model bundle (encoder, MIL head, policy, domain classifier) and checkpoint files."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import TrainConfig, config_from_text, config_to_text
from .dat import DomainClassifier
from .data import ByteReader
from .errors import FormatError, ShapeError, TruncatedFileError
from .mil import EncoderNet, PoolingHead
from .policy import PolicyNet, RewardBaseline

CKPT_MAGIC = b"RMCK"
CKPT_VERSION = 1


def seed_streams(seed):
    """Independent RNG streams so that adding a branch never shifts another's draws."""
    names = ("encoder", "head", "policy", "domain", "sample", "shuffle")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


class ModelBundle:
    def __init__(self, cfg, d, n_classes, num_languages, vocab=None):
        cfg.validate()
        self.cfg = cfg
        self.d = int(d)
        self.n_classes = int(n_classes)
        self.num_languages = int(num_languages)
        self.vocab = list(vocab) if vocab is not None else None
        rngs = seed_streams(cfg.seed)
        self.rngs = rngs
        self.encoder = EncoderNet(cfg.encoder_sizes(d), rngs["encoder"])
        self.head = PoolingHead(cfg.pooling, d, cfg.hdim, n_classes, rngs["head"], cfg.attention_dim)
        self.policy = PolicyNet(d, cfg.hp, rngs["policy"]) if cfg.framework != "mil" else None
        self.domain = (
            DomainClassifier(d, cfg.hd or cfg.hdim, num_languages, rngs["domain"])
            if cfg.framework == "rlmil_dat" else None
        )
        self.baseline = RewardBaseline(cfg.baseline_beta)

    def parameters(self):
        out = self.encoder.parameters() + self.head.parameters()
        if self.policy is not None:
            out += self.policy.parameters()
        if self.domain is not None:
            out += self.domain.parameters()
        return out

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def rates(self):
        c = self.cfg
        rates = {"task": c.lr_task, "encoder": c.lr_encoder}
        if self.policy is not None:
            rates["actor"] = c.lr_actor
        if self.domain is not None:
            rates["domain"] = c.lr_domain
        return rates

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise FormatError(f"checkpoint parameters mismatch; missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            if params[name].data.shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model {params[name].data.shape}")
            params[name].value.data[...] = arr


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def checkpoint_bytes(model, state=None, extra=None):
    """RMCK v1: magic, u16 version, config echo (key=value text), JSON meta,
    u32 parameter count, then per parameter: name, u8 ndim, u32 dims,
    little-endian f64 payload."""
    state = model.state_dict() if state is None else state
    meta = {"d": model.d, "n_classes": model.n_classes, "num_languages": model.num_languages,
            "vocab": model.vocab, **(extra or {})}
    out = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), _pack_str(config_to_text(model.cfg)),
           _pack_str(json.dumps(meta, sort_keys=True)), struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f8")
        out.append(_pack_str(name))
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_checkpoint(model, path, state=None, extra=None):
    Path(path).write_bytes(checkpoint_bytes(model, state, extra))


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, meta)``."""
    r = ByteReader(Path(path).read_bytes(), TruncatedFileError)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    cfg = config_from_text(r.string())
    meta = json.loads(r.string())
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    model = ModelBundle(cfg, meta["d"], meta["n_classes"], meta["num_languages"], meta.get("vocab"))
    model.load_state_dict(state)
    return model, meta
