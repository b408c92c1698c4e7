"""Utterance ingestion, text cleaning, age binning, speaker bags, splits and the RMDB file format."""

from __future__ import annotations

import bisect
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import re
import struct
import unicodedata
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    DimensionError,
    FormatError,
    PoolSizeError,
    SpecError,
    TruncatedFileError,
)

log = logging.getLogger(__name__)

LABELS = ("age", "gender")
SPLITS = ("train", "validation", "test")

AGE_SCHEMES = {
    "twitter6": ((18, 27, 40, 55, 70), ("Youth", "Young Adult", "Adult", "Middle-aged", "Senior", "Elderly")),
    "vox3": ((30, 55), ("Young", "Middle-aged", "Senior")),
}

# --------------------------------------------------------------------- text

_URL = re.compile(r"(?<!\S)(?:https?://|www\.)\S*")
_MENTION_TAG = re.compile(r"[@#]\S+")
_NOT_ALPHA = re.compile(r"[^a-z ]")
_SPACES = re.compile(r" {2,}")


def preprocess_text(raw):
    """Lowercase, strip accents, drop URLs/mentions/hashtags and non-letters, collapse spaces.

    Letters outside ASCII that have no canonical decomposition (CJK, Cyrillic,
    Greek, ...) are removed along with everything else non-alphabetic.
    """
    s = unicodedata.normalize("NFD", raw.lower())
    s = "".join(ch for ch in s if not unicodedata.combining(ch))
    s = re.sub(r"\s", " ", s)
    s = _URL.sub(" ", s)
    s = _MENTION_TAG.sub(" ", s)
    s = _NOT_ALPHA.sub("", s)
    return _SPACES.sub(" ", s).strip()


# --------------------------------------------------------------------- ages


def age_labels(scheme):
    try:
        return list(AGE_SCHEMES[scheme][1])
    except KeyError:
        raise DataError(f"unknown age scheme {scheme!r}; choose from {sorted(AGE_SCHEMES)}") from None


def bin_age(age, scheme="twitter6"):
    """Class index of ``age`` under right-closed bins (an edge value falls in the lower bin)."""
    if scheme not in AGE_SCHEMES:
        raise DataError(f"unknown age scheme {scheme!r}")
    age = float(age)
    if math.isnan(age):
        raise DataError("bin_age: age is NaN")
    return bisect.bisect_left(AGE_SCHEMES[scheme][0], age)


# ------------------------------------------------------------------ records


@dataclass
class UtteranceRecord:
    speaker_id: str
    text: str | None = None
    embedding: np.ndarray | None = None
    age: float | None = None
    gender: str | None = None
    lang_id: int = 0
    birth_year: float | None = None
    upload_year: float | None = None


def _missing(x):
    return x is None or (isinstance(x, float) and math.isnan(x))


def impute_ages(records):
    """Fill missing ages from birth/upload years, then from the speaker's other rows.

    Returns ``(records, dropped)`` where rows whose age is still unknown are removed.
    """
    step1 = []
    for r in records:
        if _missing(r.age) and not _missing(r.birth_year) and not _missing(r.upload_year):
            r = dataclasses.replace(r, age=float(r.upload_year) - float(r.birth_year))
        step1.append(r)
    known = {}
    for r in step1:
        if not _missing(r.age):
            known.setdefault(r.speaker_id, r.age)
    out, dropped = [], 0
    for r in step1:
        if _missing(r.age):
            if r.speaker_id in known:
                r = dataclasses.replace(r, age=known[r.speaker_id])
            else:
                dropped += 1
                continue
        out.append(r)
    if dropped:
        log.info("impute_ages: dropped %d rows with no derivable age", dropped)
    return out, dropped


# --------------------------------------------------------------------- bags


@dataclass(eq=False)
class SpeakerBag:
    speaker_id: str
    embeddings: np.ndarray  # float32 [whole_bag_size, d], zero rows past n_real
    mask: np.ndarray  # uint8 [whole_bag_size]
    lang_ids: np.ndarray  # int16 [whole_bag_size], -1 on padding
    age_label: int
    gender_label: int
    n_real: int
    informative: np.ndarray | None = None  # synthetic data only; not serialized

    def label(self, key):
        if key == "age":
            return self.age_label
        if key == "gender":
            return self.gender_label
        raise DataError(f"unknown label {key!r}")

    def same_as(self, other):
        return (
            self.speaker_id == other.speaker_id
            and self.n_real == other.n_real
            and self.age_label == other.age_label
            and self.gender_label == other.gender_label
            and np.array_equal(self.embeddings, other.embeddings)
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.lang_ids, other.lang_ids)
        )


def make_bag(speaker_id, rows, lang_ids, whole_bag_size, age_label, gender_label, informative=None):
    rows = np.asarray(rows, dtype=np.float32)
    n = min(len(rows), whole_bag_size)
    d = rows.shape[1]
    emb = np.zeros((whole_bag_size, d), dtype=np.float32)
    emb[:n] = rows[:n]
    mask = np.zeros(whole_bag_size, dtype=np.uint8)
    mask[:n] = 1
    lids = np.full(whole_bag_size, -1, dtype=np.int16)
    lids[:n] = np.asarray(lang_ids[:n], dtype=np.int16)
    info = None
    if informative is not None:
        info = np.zeros(whole_bag_size, dtype=bool)
        info[:n] = np.asarray(informative[:n], dtype=bool)
    return SpeakerBag(speaker_id, emb, mask, lids, int(age_label), int(gender_label), n, info)


@dataclass
class BagReport:
    skipped: list = field(default_factory=list)  # (speaker_id, reason)


def build_bags(records, whole_bag_size, embed_source=None, scheme="twitter6", gender_vocab=None):
    """Group records per speaker (input order kept), truncate, zero-pad and label.

    ``embed_source`` is a callable text -> vector used for records without an
    embedding. Returns ``(bags, gender_vocab, report)``.
    """
    if whole_bag_size < 1:
        raise DataError("whole_bag_size must be >= 1")
    groups = {}
    for r in records:
        groups.setdefault(r.speaker_id, []).append(r)
    if gender_vocab is None:
        gender_vocab = sorted({r.gender for r in records if not _missing(r.gender)})
    gindex = {g: i for i, g in enumerate(gender_vocab)}
    report = BagReport()
    bags, dim = [], None
    for sid, rows in groups.items():
        vecs, lids = [], []
        for r in rows:
            v = r.embedding
            if v is None and embed_source is not None and r.text is not None:
                v = embed_source(r.text)
            if v is None:
                continue
            v = np.asarray(v, dtype=np.float64).ravel()
            if dim is None:
                dim = len(v)
            elif len(v) != dim:
                raise DimensionError(f"speaker {sid}: embedding width {len(v)} != {dim}")
            vecs.append(v)
            lids.append(r.lang_id)
        if not vecs:
            report.skipped.append((sid, "no valid utterances"))
            continue
        age = next((r.age for r in rows if not _missing(r.age)), None)
        gender = next((r.gender for r in rows if not _missing(r.gender)), None)
        if age is None or gender is None or gender not in gindex:
            report.skipped.append((sid, "missing age or gender"))
            continue
        bags.append(make_bag(sid, vecs, lids, whole_bag_size, bin_age(age, scheme), gindex[gender]))
    for sid, why in report.skipped:
        log.info("build_bags: skipped speaker %s (%s)", sid, why)
    return bags, list(gender_vocab), report


# -------------------------------------------------------------------- split


@dataclass(eq=False)
class DatasetSplit:
    train: list
    validation: list
    test: list
    vocab: dict  # label name -> ordered class names
    num_languages: int
    d: int
    whole_bag_size: int

    def split(self, name):
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]

    def n_classes(self, label):
        return len(self.vocab[label])

    def same_as(self, other):
        return (
            self.vocab == other.vocab
            and self.num_languages == other.num_languages
            and self.d == other.d
            and self.whole_bag_size == other.whole_bag_size
            and all(
                len(self.split(s)) == len(other.split(s))
                and all(a.same_as(b) for a, b in zip(self.split(s), other.split(s)))
                for s in SPLITS
            )
        )


def _largest_remainder(total, ratios):
    quotas = [total * r for r in ratios]
    alloc = [math.floor(q + 1e-9) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def stratified_assignment(labels, ratios, rng):
    """Split index (0=train, 1=validation, 2=test) per item, stratified by ``labels``.

    Split totals use largest-remainder rounding; each class's share of each
    split is within one item of its exact proportion.
    """
    labels = np.asarray(labels)
    n = len(labels)
    totals = _largest_remainder(n, ratios)
    classes = sorted(set(labels.tolist()))
    counts = {c: int((labels == c).sum()) for c in classes}
    alloc = {c: [math.floor(counts[c] * r + 1e-9) for r in ratios] for c in classes}
    need_split = [totals[s] - sum(alloc[c][s] for c in classes) for s in range(len(ratios))]
    need_class = {c: counts[c] - sum(alloc[c]) for c in classes}
    cells = sorted(
        ((counts[c] * ratios[s] - alloc[c][s], c, s) for c in classes for s in range(len(ratios))),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    bumped = set()
    for frac, c, s in cells:
        if need_class[c] > 0 and need_split[s] > 0:
            alloc[c][s] += 1
            need_class[c] -= 1
            need_split[s] -= 1
            bumped.add((c, s))
    for c in classes:
        for s in sorted(range(len(ratios)), key=lambda s: ((c, s) in bumped, s)):
            while need_class[c] > 0 and need_split[s] > 0:
                alloc[c][s] += 1
                need_class[c] -= 1
                need_split[s] -= 1
    out = np.empty(n, dtype=np.int64)
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        start = 0
        for s, k in enumerate(alloc[c]):
            out[idx[start : start + k]] = s
            start += k
    return out


def _check_ratios(ratios):
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    return ratios


def stratified_split(bags, ratios=(0.8, 0.1, 0.1), strat_key="age", seed=0, pool_size=10, vocab=None,
                     num_languages=None):
    ratios = _check_ratios(ratios)
    bags = list(bags)
    if not bags:
        raise DataError("stratified_split: no bags")
    totals = _largest_remainder(len(bags), ratios)
    for name, k in zip(SPLITS[1:], totals[1:]):
        if k < pool_size:
            raise PoolSizeError(
                f"pool-size constraint: {name} split would hold {k} bags, needs >= pool size {pool_size}"
            )
    rng = np.random.default_rng(seed)
    assign = stratified_assignment([b.label(strat_key) for b in bags], ratios, rng)
    parts = [[b for b, a in zip(bags, assign) if a == s] for s in range(3)]
    if num_languages is None:
        num_languages = int(max(int(b.lang_ids.max()) for b in bags)) + 1
    return DatasetSplit(
        parts[0], parts[1], parts[2], vocab or {}, int(num_languages),
        int(bags[0].embeddings.shape[1]), int(bags[0].embeddings.shape[0]),
    )


# ---------------------------------------------------------------- synthetic


@dataclass
class SynthSpec:
    n_languages: int = 2
    n_speakers: int = 200
    d: int = 16
    bag_size_range: tuple = (8, 12)
    n_classes: int = 2
    signal: float = 2.0
    lang_offset: float = 3.0
    informative_frac: float = 0.5
    noise: float = 1.0
    # exactly this many informative instances per bag (overrides informative_frac draws)
    informative_count: int | None = None
    # train-split probability that a speaker's language is tied to its class
    confound: float = 0.0
    label: str = "gender"
    ratios: tuple = (0.8, 0.1, 0.1)
    pool_size: int = 10
    whole_bag_size: int | None = None

    def validate(self):
        if not 0 < self.informative_frac <= 1:
            raise SpecError(f"informative_frac must be in (0, 1], got {self.informative_frac} (no learnable signal)")
        if self.n_languages < 1 or self.n_classes < 2 or self.d < 1 or self.n_speakers < 1:
            raise SpecError("synth spec needs >=1 language, >=2 classes, d>=1, >=1 speaker")
        lo, hi = self.bag_size_range
        if not 1 <= lo <= hi:
            raise SpecError(f"bad bag_size_range {self.bag_size_range}")
        if self.informative_count is not None and not 0 <= self.informative_count <= lo:
            raise SpecError("informative_count must fit in the smallest bag")
        if self.label not in LABELS:
            raise SpecError(f"label must be one of {LABELS}")
        if not 0 <= self.confound <= 1:
            raise SpecError("confound must be in [0, 1]")


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def synth_dataset(spec, seed=0):
    """Multilingual bags with a planted class signal and per-language offsets.

    Each instance is noise * N(0, I) + mu_lang (+ signal * v_class if the
    instance is informative). Speakers are monolingual.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    d, L, C = spec.d, spec.n_languages, spec.n_classes
    mus = np.stack([_unit(rng, d) * spec.lang_offset for _ in range(L)])
    vs = np.stack([_unit(rng, d) for _ in range(C)])
    labels = np.arange(spec.n_speakers) % C
    labels = labels[rng.permutation(spec.n_speakers)]
    ratios = _check_ratios(spec.ratios)
    totals = _largest_remainder(spec.n_speakers, ratios)
    if min(totals[1:]) < spec.pool_size:
        raise PoolSizeError(f"pool-size constraint: split sizes {totals} below pool size {spec.pool_size}")
    assign = stratified_assignment(labels, ratios, rng)
    lo, hi = spec.bag_size_range
    wbs = spec.whole_bag_size or hi
    bags = [[], [], []]
    for i in range(spec.n_speakers):
        c = int(labels[i])
        if assign[i] == 0 and spec.confound > 0 and rng.random() < spec.confound:
            lang = c % L
        else:
            lang = int(rng.integers(L))
        n = int(rng.integers(lo, hi + 1))
        if spec.informative_count is not None:
            info = np.zeros(n, dtype=bool)
            info[rng.choice(n, spec.informative_count, replace=False)] = True
        else:
            info = rng.random(n) < spec.informative_frac
        x = spec.noise * rng.standard_normal((n, d)) + mus[lang] + np.outer(info, vs[c]) * spec.signal
        other = 0
        age, gender = (c, other) if spec.label == "age" else (other, c)
        bags[assign[i]].append(make_bag(f"spk{i:05d}", x, [lang] * n, wbs, age, gender, info))
    names = [f"class{c}" for c in range(C)]
    vocab = {"age": ["none"], "gender": ["none"]}
    vocab[spec.label] = names
    return DatasetSplit(bags[0], bags[1], bags[2], vocab, L, d, wbs)


# ------------------------------------------------------------ serialization

MAGIC = b"RMDB"
VERSION = 1


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def dataset_bytes(ds):
    """RMDB v1 bytes for ``ds``.

    Layout (little-endian): magic "RMDB", u16 version, u32 d, u32 whole_bag_size,
    u32 num_languages, u32 vocab count + length-prefixed UTF-8 entries of the
    form "<label>:<class>", u32x3 split sizes (train, validation, test), u64
    payload length, then per bag: length-prefixed speaker id, u32 n_real,
    u16 age label, u16 gender label, i16 x whole_bag_size lang ids,
    f32 x (whole_bag_size * d) embeddings, row-major.
    """
    entries = [f"{lab}:{name}" for lab in LABELS for name in ds.vocab.get(lab, [])]
    head = [MAGIC, struct.pack("<HIII", VERSION, ds.d, ds.whole_bag_size, ds.num_languages)]
    head.append(struct.pack("<I", len(entries)))
    head.extend(_pack_str(e) for e in entries)
    head.append(struct.pack("<III", len(ds.train), len(ds.validation), len(ds.test)))
    body = io.BytesIO()
    for name in SPLITS:
        for b in ds.split(name):
            if b.embeddings.shape != (ds.whole_bag_size, ds.d):
                raise FormatError(
                    f"bag {b.speaker_id}: embeddings {b.embeddings.shape} != ({ds.whole_bag_size}, {ds.d})"
                )
            body.write(_pack_str(b.speaker_id))
            body.write(struct.pack("<IHH", b.n_real, b.age_label, b.gender_label))
            body.write(np.asarray(b.lang_ids, dtype="<i2").tobytes())
            body.write(np.asarray(b.embeddings, dtype="<f4").tobytes())
    payload = body.getvalue()
    return b"".join(head) + struct.pack("<Q", len(payload)) + payload


def serialize_dataset(ds, path):
    data = dataset_bytes(ds)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


class ByteReader:
    def __init__(self, buf, truncation_error):
        self.buf = buf
        self.pos = 0
        self.err = truncation_error

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise self.err(f"unexpected end of data at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"invalid UTF-8 string at byte {self.pos}") from e


def parse_dataset(data):
    head = ByteReader(data, TruncatedFileError)
    if head.take(4) != MAGIC:
        raise FormatError("not an RMDB dataset (bad magic)")
    (version,) = head.unpack("<H")
    if version != VERSION:
        raise FormatError(f"unsupported RMDB version {version}")
    d, wbs, nl = head.unpack("<III")
    (n_vocab,) = head.unpack("<I")
    vocab = {}
    for _ in range(n_vocab):
        lab, _, name = head.string().partition(":")
        vocab.setdefault(lab, []).append(name)
    sizes = head.unpack("<III")
    (plen,) = head.unpack("<Q")
    if head.pos + plen > len(data):
        raise TruncatedFileError(f"file truncated: payload needs {plen} bytes, {len(data) - head.pos} present")
    # inside the declared payload a short read means the header lies about d
    body = ByteReader(data[head.pos : head.pos + plen], FormatError)
    parts = []
    for k in sizes:
        bags = []
        for _ in range(k):
            sid = body.string()
            n_real, age, gender = body.unpack("<IHH")
            if n_real > wbs:
                raise FormatError(f"bag {sid}: n_real {n_real} > whole_bag_size {wbs}")
            lids = np.frombuffer(body.take(2 * wbs), dtype="<i2").astype(np.int16)
            emb = np.frombuffer(body.take(4 * wbs * d), dtype="<f4").astype(np.float32).reshape(wbs, d)
            mask = np.zeros(wbs, dtype=np.uint8)
            mask[:n_real] = 1
            bags.append(SpeakerBag(sid, emb, mask, lids, age, gender, n_real))
        parts.append(bags)
    if body.pos != plen:
        raise FormatError(f"{plen - body.pos} unread payload bytes: header d={d} does not match row width")
    if head.pos + plen != len(data):
        raise FormatError("trailing bytes after payload")
    return DatasetSplit(parts[0], parts[1], parts[2], vocab, nl, d, wbs)


def load_dataset(path):
    return parse_dataset(Path(path).read_bytes())


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- ingestion

CSV_COLUMNS = ("speaker_id", "text", "age", "gender", "lang_code")


def _num(x):
    if x is None:
        return None
    x = str(x).strip()
    if x == "" or x.lower() in ("nan", "x", "none"):
        return None
    try:
        return float(x)
    except ValueError:
        return None


def read_records(path, embeddings=None):
    """Read a UTF-8 CSV or JSON-lines utterance file.

    Returns ``(records, lang_codes)``; language codes are mapped to ids in
    sorted order. ``embeddings`` (array, one row per input row) fills in
    vectors for inputs that lack them.
    """
    path = Path(path)
    if path.suffix in (".jsonl", ".json", ".ndjson"):
        rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        required = ("speaker_id", "gender")
    else:
        with path.open(newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            cols = reader.fieldnames or []
            rows = list(reader)
        for col in CSV_COLUMNS:
            if col not in cols:
                raise DataError(f"missing required column {col!r} in {path}")
        required = ()
    for i, row in enumerate(rows):
        for col in required:
            if col not in row:
                raise DataError(f"missing required column {col!r} in {path} (line {i + 1})")
        if "lang_code" not in row and "lang_id" not in row:
            raise DataError(f"missing required column 'lang_code' in {path} (line {i + 1})")
    codes = sorted({str(r["lang_code"]) for r in rows if "lang_code" in r})
    cindex = {c: i for i, c in enumerate(codes)}
    if embeddings is not None and len(embeddings) != len(rows):
        raise DataError(f"embedding file has {len(embeddings)} rows, input has {len(rows)}")
    records = []
    for i, row in enumerate(rows):
        emb = row.get("embedding")
        if emb is not None:
            emb = np.asarray(emb, dtype=np.float64)
        elif embeddings is not None:
            emb = np.asarray(embeddings[i], dtype=np.float64)
        lang = cindex[str(row["lang_code"])] if "lang_code" in row else int(row["lang_id"])
        gender = row.get("gender")
        gender = None if gender is None or str(gender).strip().lower() in ("", "x", "nan") else str(gender).strip()
        records.append(
            UtteranceRecord(
                speaker_id=str(row["speaker_id"]),
                text=row.get("text"),
                embedding=emb,
                age=_num(row.get("age")),
                gender=gender,
                lang_id=lang,
                birth_year=_num(row.get("birth_year")),
                upload_year=_num(row.get("upload_year")),
            )
        )
    if not codes:
        codes = [str(i) for i in range(max(r.lang_id for r in records) + 1)] if records else []
    return records, codes


class HashingEmbedder:
    """Signed feature hashing of whitespace tokens, L2-normalised; a stand-in when no encoder output exists."""

    def __init__(self, dim=64):
        self.dim = dim

    def __call__(self, text):
        v = np.zeros(self.dim)
        for tok in text.split():
            hsh = zlib.crc32(tok.encode("utf-8"))
            v[hsh % self.dim] += 1.0 if (hsh >> 31) & 1 else -1.0
        n = np.linalg.norm(v)
        return v / n if n > 0 else v
