import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from rlmildat.data import (
    HashingEmbedder,
    SynthSpec,
    UtteranceRecord,
    age_labels,
    bin_age,
    build_bags,
    dataset_bytes,
    impute_ages,
    load_dataset,
    make_bag,
    parse_dataset,
    preprocess_text,
    read_records,
    serialize_dataset,
    stratified_assignment,
    stratified_split,
    synth_dataset,
)
from rlmildat.errors import DataError, DimensionError, FormatError, PoolSizeError, SpecError

GOLDEN = json.loads((Path(__file__).parent / "golden" / "preprocess.json").read_text(encoding="utf-8"))


# ------------------------------------------------------------ preprocessing


@pytest.mark.parametrize("case", GOLDEN, ids=[f"g{i:02d}" for i in range(len(GOLDEN))])
def test_preprocess_golden(case):
    assert preprocess_text(case["raw"]) == case["clean"]


def test_preprocess_examples():
    assert preprocess_text("Hello @user check https://x.co #tag!!") == "hello check"
    assert preprocess_text("Café  crème") == "cafe creme"
    assert preprocess_text("\U0001F600\U0001F44D") == ""


@given(st.text(max_size=60))
@settings(max_examples=300, deadline=None)
def test_preprocess_idempotent_and_clean(s):
    out = preprocess_text(s)
    assert preprocess_text(out) == out
    assert set(out) <= set("abcdefghijklmnopqrstuvwxyz ")
    assert "  " not in out and out == out.strip()


# ------------------------------------------------------------------- ages


def _table_bin(age, lows):
    # hand-written right-closed table: class k covers (edge[k-1], edge[k]]
    for k, edge in enumerate(lows):
        if age <= edge:
            return k
    return len(lows)


def test_age_binning_tables_0_to_100():
    twitter = {range(0, 19): 0, range(19, 28): 1, range(28, 41): 2, range(41, 56): 3, range(56, 71): 4,
               range(71, 101): 5}
    vox = {range(0, 31): 0, range(31, 56): 1, range(56, 101): 2}
    for table, scheme in ((twitter, "twitter6"), (vox, "vox3")):
        for ages, cls in table.items():
            for a in ages:
                assert bin_age(a, scheme) == cls, (scheme, a)


def test_age_binning_examples():
    names = age_labels("twitter6")
    assert names[bin_age(17)] == "Youth"
    assert names[bin_age(18)] == "Youth"
    assert names[bin_age(18.5)] == "Young Adult"
    vox = age_labels("vox3")
    assert vox[bin_age(55, "vox3")] == "Middle-aged"
    assert vox[bin_age(55.1, "vox3")] == "Senior"
    with pytest.raises(DataError):
        bin_age(float("nan"))
    with pytest.raises(DataError):
        bin_age(30, "decades")


@given(st.floats(-1e3, 1e3, allow_nan=False), st.floats(-1e3, 1e3, allow_nan=False))
def test_age_binning_monotone(a, b):
    lo, hi = sorted((a, b))
    for scheme, edges in (("twitter6", (18, 27, 40, 55, 70)), ("vox3", (30, 55))):
        assert bin_age(lo, scheme) <= bin_age(hi, scheme)
        assert bin_age(hi, scheme) == _table_bin(hi, edges)


def test_impute_ages():
    recs = [
        UtteranceRecord("a", "x", birth_year=1980, upload_year=2015),
        UtteranceRecord("b", "x", age=40.0),
        UtteranceRecord("b", "y"),
        UtteranceRecord("b", "z"),
        UtteranceRecord("c", "x"),
        UtteranceRecord("c", "y"),
    ]
    out, dropped = impute_ages(recs)
    assert out[0].age == 35
    assert [r.age for r in out if r.speaker_id == "b"] == [40.0, 40.0, 40.0]
    assert dropped == 2 and all(r.speaker_id != "c" for r in out)


# ------------------------------------------------------------------- bags


def test_build_bags_padding_and_mask():
    recs = [UtteranceRecord("s", embedding=np.array([i, -i], float), age=30, gender="f", lang_id=1) for i in (1, 2, 3)]
    bags, gv, _ = build_bags(recs, 5)
    (b,) = bags
    assert b.mask.tolist() == [1, 1, 1, 0, 0]
    assert not b.embeddings[3:].any()
    assert b.lang_ids.tolist() == [1, 1, 1, -1, -1]
    assert b.n_real == 3 and gv == ["f"]


def test_build_bags_truncates_to_cap():
    recs = [UtteranceRecord("s", embedding=np.full(2, i, float), age=30, gender="m") for i in range(120)]
    (b,), _, _ = build_bags(recs, 100)
    assert b.n_real == 100 and b.embeddings.shape == (100, 2)
    assert b.embeddings[-1, 0] == 99


def test_build_bags_interleaved_matches_regroup_oracle():
    rng = np.random.default_rng(0)
    recs = []
    for i in range(30):
        sid = ["x", "y", "z"][rng.integers(3)]
        recs.append(UtteranceRecord(sid, embedding=rng.normal(size=3), age=20 + i, gender="f"))
    bags, _, _ = build_bags(recs, 50)
    # oracle: brute-force regroup in first-appearance order
    order = []
    for r in recs:
        if r.speaker_id not in order:
            order.append(r.speaker_id)
    assert [b.speaker_id for b in bags] == order
    for b in bags:
        rows = np.array([r.embedding for r in recs if r.speaker_id == b.speaker_id], dtype=np.float32)
        np.testing.assert_array_equal(b.embeddings[: len(rows)], rows)
        first_age = next(r.age for r in recs if r.speaker_id == b.speaker_id)
        assert b.age_label == bin_age(first_age)


def test_build_bags_errors_and_skips():
    recs = [
        UtteranceRecord("a", embedding=np.ones(3), age=30, gender="f"),
        UtteranceRecord("b", embedding=np.ones(4), age=30, gender="f"),
    ]
    with pytest.raises(DimensionError):
        build_bags(recs, 5)
    recs = [UtteranceRecord("a", text=None, age=30, gender="f"), UtteranceRecord("b", text="hi there", age=30, gender="m")]
    bags, _, report = build_bags(recs, 5, HashingEmbedder(8))
    assert [b.speaker_id for b in bags] == ["b"]
    assert report.skipped == [("a", "no valid utterances")]


# ------------------------------------------------------------------ split


def _bags(n, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(classes, size=n)
    return [make_bag(f"s{i}", np.ones((2, 2)), [0, 0], 4, int(c), 0) for i, c in enumerate(labels)]


@pytest.mark.parametrize("n,ratios,sizes", [
    (100, (0.8, 0.1, 0.1), (80, 10, 10)),
    (93, (0.7, 0.15, 0.15), (65, 14, 14)),
    (527, (0.8, 0.1, 0.1), (421, 53, 53)),
])
def test_split_sizes(n, ratios, sizes):
    bags = _bags(n)
    ds = stratified_split(bags, ratios, seed=3)
    assert (len(ds.train), len(ds.validation), len(ds.test)) == sizes
    ids = [b.speaker_id for s in (ds.train, ds.validation, ds.test) for b in s]
    assert sorted(ids) == sorted(b.speaker_id for b in bags)
    labels = np.array([b.age_label for b in bags])
    for s, part in enumerate((ds.train, ds.validation, ds.test)):
        for c in np.unique(labels):
            exact = (labels == c).sum() * ratios[s]
            got = sum(b.age_label == c for b in part)
            assert abs(got - exact) < 1 + 1e-9


@given(st.lists(st.integers(0, 4), min_size=1, max_size=300), st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_stratified_assignment_properties(labels, seed):
    ratios = (0.7, 0.2, 0.1)
    a = stratified_assignment(labels, ratios, np.random.default_rng(seed))
    labels = np.array(labels)
    for s in range(3):
        for c in np.unique(labels):
            exact = (labels == c).sum() * ratios[s]
            assert abs((a[(labels == c)] == s).sum() - exact) < 1 + 1e-9
    b = stratified_assignment(labels, ratios, np.random.default_rng(seed))
    assert np.array_equal(a, b)


def test_split_deterministic_and_pool_size():
    bags = _bags(120)
    a = stratified_split(bags, seed=5)
    b = stratified_split(bags, seed=5)
    assert [x.speaker_id for x in a.test] == [x.speaker_id for x in b.test]
    with pytest.raises(PoolSizeError, match="pool-size constraint"):
        stratified_split(_bags(60), (0.8, 0.1, 0.1))
    with pytest.raises(DataError):
        stratified_split(bags, (0.5, 0.2, 0.2))


# ------------------------------------------------------------------ synth


def _instances(ds, split="train"):
    xs, langs, ys = [], [], []
    for b in ds.split(split):
        xs.append(b.embeddings[: b.n_real])
        langs.append(b.lang_ids[: b.n_real])
        ys.append(np.full(b.n_real, b.gender_label))
    return np.concatenate(xs), np.concatenate(langs), np.concatenate(ys)


def _probe(x, y, tx, ty):
    return np.mean(LogisticRegression(max_iter=2000).fit(x, y).predict(tx) == ty)


def test_synth_zero_offset_language_at_chance():
    # speakers are monolingual, so the held-out set needs many speakers, not just many rows
    ds = synth_dataset(SynthSpec(lang_offset=0.0, n_speakers=1000, ratios=(0.5, 0.25, 0.25)), seed=0)
    x, lang, _ = _instances(ds, "train")
    tx, tl, _ = _instances(ds, "test")
    assert len(tl) >= 500
    assert abs(_probe(x, lang, tx, tl) - 0.5) <= 0.05


def test_synth_zero_signal_task_at_chance():
    ds = synth_dataset(SynthSpec(signal=0.0, lang_offset=0.0, n_speakers=600), seed=0)
    x, _, y = _instances(ds, "train")
    tx, _, ty = _instances(ds, "test")
    assert len(ty) >= 500
    assert abs(_probe(x, y, tx, ty) - 0.5) <= 0.05


def test_synth_easy_mean_pool_separable():
    from rlmildat.stats import macro_f1
    ds = synth_dataset(SynthSpec(informative_frac=1.0, signal=4.0, noise=0.3), seed=0)

    def pooled(bags):
        return (np.array([b.embeddings[: b.n_real].mean(0) for b in bags]),
                np.array([b.gender_label for b in bags]))

    x, y = pooled(ds.train)
    tx, ty = pooled(ds.test)
    pred = LogisticRegression(max_iter=2000).fit(x, y).predict(tx)
    assert macro_f1(ty, pred, 2) > 0.95


def test_synth_validation_and_reproducible():
    with pytest.raises(SpecError):
        SynthSpec(informative_frac=0.0).validate()
    a = dataset_bytes(synth_dataset(SynthSpec(), seed=7))
    b = dataset_bytes(synth_dataset(SynthSpec(), seed=7))
    assert a == b
    ds = synth_dataset(SynthSpec(), seed=7)
    assert len(ds.validation) >= 10 and len(ds.test) >= 10
    exact = synth_dataset(SynthSpec(informative_count=1, bag_size_range=(5, 5)), seed=1)
    assert all(int(b.informative.sum()) == 1 for b in exact.train)


# ------------------------------------------------------------ serialization


def test_round_trip_bit_exact(tmp_path):
    ds = synth_dataset(SynthSpec(n_speakers=120, d=5), seed=2)
    p = tmp_path / "d.rmdb"
    serialize_dataset(ds, p)
    back = load_dataset(p)
    assert back.same_as(ds)
    assert dataset_bytes(back) == p.read_bytes()


def test_format_errors(tmp_path):
    ds = synth_dataset(SynthSpec(n_speakers=120, d=5), seed=2)
    raw = bytearray(dataset_bytes(ds))
    with pytest.raises(FormatError):
        parse_dataset(b"XXXX" + bytes(raw[4:]))
    bad_version = bytearray(raw)
    bad_version[4:6] = (9).to_bytes(2, "little")
    with pytest.raises(FormatError):
        parse_dataset(bytes(bad_version))
    wrong_d = bytearray(raw)
    wrong_d[6:10] = (4).to_bytes(4, "little")
    with pytest.raises(FormatError):
        parse_dataset(bytes(wrong_d))
    with pytest.raises(OSError):
        parse_dataset(bytes(raw[: len(raw) // 2]))


def test_read_records_csv(tmp_path):
    p = tmp_path / "u.csv"
    with p.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["speaker_id", "text", "age", "gender", "lang_code"])
        w.writerow(["a", "hola", "31", "f", "es"])
        w.writerow(["b", "hi", "", "m", "en"])
    recs, codes = read_records(p)
    assert codes == ["en", "es"]
    assert recs[0].lang_id == 1 and recs[0].age == 31 and math.isclose(recs[0].age, 31.0)
    assert recs[1].age is None
    q = tmp_path / "bad.csv"
    q.write_text("speaker_id,text,age,lang_code\na,x,3,en\n", encoding="utf-8")
    with pytest.raises(DataError, match="gender"):
        read_records(q)
