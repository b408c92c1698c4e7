"""``rlmildat`` command line: synth, prepare, train, evaluate, compare, sweep.

Exit codes: 0 ok, 2 I/O failure, 3 configuration or data error, 4 numeric
failure (NaN/inf loss).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import subprocess
import sys
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import TrainConfig, coerce, config_to_text, load_config, save_config
from .data import (
    HashingEmbedder,
    SynthSpec,
    build_bags,
    age_labels,
    file_sha256,
    impute_ages,
    load_dataset,
    preprocess_text,
    read_records,
    serialize_dataset,
    stratified_split,
    synth_dataset,
)
from .errors import ConfigError, DataError, NumericError, RlmilError
from .model import load_checkpoint, save_checkpoint
from .stats import (
    RESULT_COLUMNS,
    build_comparison,
    read_results,
    render_table,
    write_comparison_csv,
    write_plot_data,
)
from .trainer import HISTORY_COLUMNS, build_model, evaluate_splits, fit, write_history

log = logging.getLogger("rlmildat")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"
# flags handled explicitly rather than generated from TrainConfig
_EXPLICIT = {"framework", "label", "seed"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are configuration errors, not I/O
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers


def git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def write_manifest(out_dir, command, config=None, dataset=None, dataset_sha256=None, seed=None,
                   outputs=(), started=None, extra=None):
    """One manifest per artifact directory; timestamps are the only non-deterministic fields."""
    m = {
        "command": command,
        "config": dataclasses.asdict(config) if isinstance(config, TrainConfig) else config,
        "dataset": str(dataset) if dataset else None,
        "dataset_sha256": dataset_sha256,
        "seed": seed,
        "git_describe": git_describe(),
        "started": started or _now(),
        "finished": _now(),
        "outputs": sorted(str(p) for p in outputs),
    }
    if extra:
        m.update(extra)
    path = Path(out_dir) / MANIFEST
    path.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _parse_ratios(text):
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--ratios expects three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise ConfigError(f"--ratios expects three numbers, got {text!r}")
    return parts


def _histogram(bags, key):
    return dict(sorted(Counter(key(b) for b in bags).items()))


def _print_split_summary(ds, label_keys=("age", "gender")):
    for name in ("train", "validation", "test"):
        bags = ds.split(name)
        langs = Counter()
        for b in bags:
            langs.update(int(x) for x in b.lang_ids[: b.n_real])
        parts = [f"{name}: {len(bags)} bags"]
        for lab in label_keys:
            if len(ds.vocab.get(lab, [])) > 1:
                parts.append(f"{lab}={_histogram(bags, lambda b, lab=lab: b.label(lab))}")
        parts.append(f"languages={dict(sorted(langs.items()))}")
        print("  ".join(parts))


def _config_from_args(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    kw = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name in _EXPLICIT:
            continue
        raw = getattr(args, f.name, None)
        if raw is not None:
            kw[f.name] = coerce(f.name, raw)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        kw[k.strip()] = coerce(k.strip(), v.strip())
    for name in _EXPLICIT:
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = coerce(name, v)
    return cfg.replace(**kw).validate()


def _add_config_flags(p):
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    for f in dataclasses.fields(TrainConfig):
        if f.name in _EXPLICIT:
            continue
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, default=None, metavar=type(f.default).__name__.upper(),
                       help=f"(default {f.default})")


def _result_rows(encoder, cfg, metrics):
    return [
        {"encoder": encoder, "pooling": cfg.pooling, "label": cfg.label, "framework": cfg.framework,
         "seed": cfg.seed, "split": split, "macro_f1": m["macro_f1"], "accuracy": m["accuracy"]}
        for split, m in metrics.items()
    ]


def _write_results(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in RESULT_COLUMNS])


def _write_trace(trace, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        keys = list(trace[0]) if trace else []
        w.writerow(["step", *keys])
        for i, rec in enumerate(trace):
            w.writerow([i, *(repr(float(rec[k])) for k in keys)])


# ------------------------------------------------------------------ commands


def cmd_synth(args):
    spec = SynthSpec(
        n_languages=args.languages, n_speakers=args.speakers, d=args.dim,
        bag_size_range=(args.bag_min, args.bag_max), n_classes=args.classes, signal=args.signal,
        lang_offset=args.lang_offset, informative_frac=args.informative_frac,
        informative_count=args.informative_count, noise=args.noise, confound=args.confound,
        label=args.label, ratios=_parse_ratios(args.ratios), pool_size=args.pool_size,
        whole_bag_size=args.whole_bag_size,
    )
    ds = synth_dataset(spec, args.seed)
    digest = serialize_dataset(ds, args.out)
    _print_split_summary(ds)
    print(f"wrote {args.out} sha256={digest}")
    return EXIT_OK


def cmd_prepare(args):
    emb = np.load(args.embeddings) if args.embeddings else None
    records, codes = read_records(args.input, emb)
    records, dropped = impute_ages(records)
    embedder = HashingEmbedder(args.hash_dim) if args.hash_dim else None
    source = (lambda text: embedder(preprocess_text(text))) if embedder is not None else None
    bags, gvocab, report = build_bags(records, args.whole_bag_size, source, args.scheme)
    vocab = {"age": list(age_labels(args.scheme)), "gender": gvocab}
    ds = stratified_split(bags, _parse_ratios(args.ratios), "age", args.seed, args.pool_size, vocab,
                          num_languages=len(codes))
    digest = serialize_dataset(ds, args.out)
    print(f"dropped rows (no derivable age): {dropped}")
    print(f"skipped speakers: {len(report.skipped)}")
    for sid, why in report.skipped:
        print(f"  {sid}: {why}")
    print(f"languages: {', '.join(f'{i}={c}' for i, c in enumerate(codes))}")
    _print_split_summary(ds)
    print(f"wrote {args.out} sha256={digest}")
    return EXIT_OK


def run_training(cfg, dataset_path, out_dir, encoder_name=None, quiet=False):
    """Train one configuration and write checkpoint, history, results and manifest into ``out_dir``."""
    started = _now()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = file_sha256(dataset_path)
    ds = load_dataset(dataset_path)
    model = build_model(cfg, ds)
    ckpt = out / "checkpoint.rmck"
    meta = {"dataset_sha256": digest}

    def on_improve(state, row):
        save_checkpoint(model, ckpt, state, {**meta, "epoch": row["epoch"], "val_macro_f1": row["val_macro_f1"]})

    def on_epoch(row):
        if not quiet:
            log.info("epoch %d  " + "  ".join(f"{k}=%.4f" for k in HISTORY_COLUMNS[1:]), row["epoch"],
                     *(row[k] for k in HISTORY_COLUMNS[1:]))

    try:
        result = fit(model, ds, cfg, on_epoch=on_epoch, on_improve=on_improve)
    except NumericError as e:
        trace_path = out / "loss_trace.csv"
        _write_trace(e.trace or [], trace_path)
        e.args = (f"{e.args[0]} (loss trace: {trace_path})",)
        raise
    write_history(result.history, out / "history.csv")
    save_config(cfg, out / "config.txt")
    metrics = evaluate_splits(model, ds)
    encoder = encoder_name or Path(dataset_path).stem
    _write_results(_result_rows(encoder, cfg, metrics), out / "results.csv")
    outputs = [out / n for n in ("checkpoint.rmck", "history.csv", "config.txt", "results.csv")]
    write_manifest(out, "train", cfg, dataset_path, digest, cfg.seed, outputs, started,
                   {"best_epoch": result.best_epoch, "best_val_macro_f1": result.best_score})
    return result, metrics


def cmd_train(args):
    cfg = _config_from_args(args)
    _, metrics = run_training(cfg, args.dataset, args.out_dir, args.encoder_name)
    print("macro-F1 train={:.4f} validation={:.4f} test={:.4f}".format(
        *(metrics[s]["macro_f1"] for s in ("train", "validation", "test"))))
    return EXIT_OK


def _verify_dataset(checkpoint_path, meta, dataset_path):
    digest = file_sha256(dataset_path)
    expected = meta.get("dataset_sha256")
    manifest = Path(checkpoint_path).parent / MANIFEST
    if manifest.exists():
        expected = json.loads(manifest.read_text(encoding="utf-8")).get("dataset_sha256") or expected
    if expected and expected != digest:
        raise DataError(f"dataset hash {digest[:12]} does not match the training dataset {expected[:12]}")
    return digest


def cmd_evaluate(args):
    model, meta = load_checkpoint(args.checkpoint)
    _verify_dataset(args.checkpoint, meta, args.dataset)
    ds = load_dataset(args.dataset)
    metrics = evaluate_splits(model, ds)
    for split in ("train", "validation", "test"):
        m = metrics[split]
        print(f"{split}: macro-F1={m['macro_f1']:.4f} accuracy={m['accuracy']:.4f}")
    if args.results:
        _write_results(_result_rows(args.encoder_name or Path(args.dataset).stem, model.cfg, metrics), args.results)
    return EXIT_OK


def cmd_compare(args):
    started = _now()
    results = []
    for path in args.results:
        results.extend(read_results(path))
    rows = build_comparison(results, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_comparison_csv(rows, out / "comparison.csv")
    table = render_table(rows)
    (out / "comparison.txt").write_text(table, encoding="utf-8")
    write_plot_data(results, out / "plots", args.split)
    print(table, end="")
    outputs = [out / "comparison.csv", out / "comparison.txt", out / "plots" / "bar.csv", out / "plots" / "box.csv"]
    write_manifest(out, "compare", {"results": [str(p) for p in args.results], "split": args.split},
                   outputs=outputs, started=started)
    return EXIT_OK


# -------------------------------------------------------------------- sweep


def load_search_space(path):
    """JSON object: key -> {"low", "high", "scale": "log"|"linear"} or {"values": [...]}."""
    try:
        space = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"search space {path}: {e}") from None
    if not isinstance(space, dict) or not space:
        raise ConfigError("search space is empty")
    for key, spec in space.items():
        if key not in TrainConfig.__dataclass_fields__ or key in ("framework", "label", "seed"):
            raise ConfigError(f"search space key {key!r} is not a tunable config field")
        if not isinstance(spec, dict):
            raise ConfigError(f"search space entry {key!r} must be an object")
        if "values" in spec:
            if not spec["values"]:
                raise ConfigError(f"search space entry {key!r} has no values")
            continue
        if "low" not in spec or "high" not in spec:
            raise ConfigError(f"search space entry {key!r} needs low/high or values")
        lo, hi = float(spec["low"]), float(spec["high"])
        scale = spec.get("scale", "linear")
        if scale not in ("log", "linear"):
            raise ConfigError(f"{key}: scale must be log or linear")
        if lo > hi or (scale == "log" and lo <= 0):
            raise ConfigError(f"{key}: bad range [{lo}, {hi}] for {scale} scale")
    return space


def sample_config(space, base, rng):
    kw = {}
    for key in sorted(space):
        spec = space[key]
        if "values" in spec:
            v = spec["values"][int(rng.integers(len(spec["values"])))]
        else:
            lo, hi = float(spec["low"]), float(spec["high"])
            if spec.get("scale", "linear") == "log":
                v = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
            else:
                v = float(rng.uniform(lo, hi))
            if isinstance(TrainConfig.__dataclass_fields__[key].default, int):
                v = int(round(v))
        kw[key] = coerce(key, v)
    return base.replace(**kw)


def _run_trial(job):
    index, cfg, dataset, out_dir = job
    logging.disable(logging.INFO)
    try:
        result, metrics = run_training(cfg, dataset, out_dir, quiet=True)
        return {"trial": index, "status": "ok", "val_macro_f1": result.best_score,
                "best_epoch": result.best_epoch, "test_macro_f1": metrics["test"]["macro_f1"]}
    except NumericError as e:
        return {"trial": index, "status": f"numeric: {e}", "val_macro_f1": float("nan"),
                "best_epoch": 0, "test_macro_f1": float("nan")}


def sweep_workers(n_trials):
    raw = os.environ.get("RLMILDAT_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"RLMILDAT_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_trials))


def run_sweep(space, base, dataset, out_dir, trials, seed):
    """Random search; trial configs are drawn up front so the sequence never depends on scheduling."""
    if trials < 1:
        raise ConfigError("--trials must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    configs = [sample_config(space, base, rng).validate() for _ in range(trials)]
    jobs = [(i, cfg, str(dataset), str(out / f"trial_{i:03d}")) for i, cfg in enumerate(configs)]
    workers = sweep_workers(trials)
    if workers == 1:
        rows = [_run_trial(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_trial, jobs))
    keys = sorted(space)
    with open(out / "trials.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["trial", "status", "val_macro_f1", "best_epoch", "test_macro_f1", *keys])
        for row, cfg in zip(rows, configs):
            w.writerow([row["trial"], row["status"], repr(row["val_macro_f1"]), row["best_epoch"],
                        repr(row["test_macro_f1"]), *(getattr(cfg, k) for k in keys)])
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        raise NumericError("every sweep trial failed numerically")
    # first trial wins ties
    best = max(ok, key=lambda r: (r["val_macro_f1"], -r["trial"]))
    best_cfg = configs[best["trial"]]
    report = {"trial": best["trial"], "val_macro_f1": best["val_macro_f1"], "best_epoch": best["best_epoch"],
              "test_macro_f1": best["test_macro_f1"], "config": dataclasses.asdict(best_cfg)}
    (out / "best.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    save_config(best_cfg, out / "best_config.txt")
    return report, rows


def cmd_sweep(args):
    started = _now()
    space = load_search_space(args.search_space)
    base = _config_from_args(args)
    report, _ = run_sweep(space, base, args.dataset, args.out_dir, args.trials, args.seed)
    out = Path(args.out_dir)
    write_manifest(out, "sweep", {"base": dataclasses.asdict(base), "search_space": space, "trials": args.trials},
                   args.dataset, file_sha256(args.dataset), args.seed,
                   [out / "trials.csv", out / "best.json", out / "best_config.txt"], started)
    print(f"best trial {report['trial']}: validation macro-F1={report['val_macro_f1']:.4f}")
    print(config_to_text(TrainConfig(**report["config"])), end="")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="rlmildat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic multilingual dataset")
    s.add_argument("--languages", type=int, default=2)
    s.add_argument("--speakers", type=int, default=200)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--bag-min", type=int, default=8)
    s.add_argument("--bag-max", type=int, default=12)
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--signal", type=float, default=2.0)
    s.add_argument("--lang-offset", type=float, default=3.0)
    s.add_argument("--informative-frac", type=float, default=0.5)
    s.add_argument("--informative-count", type=int, default=None)
    s.add_argument("--noise", type=float, default=1.0)
    s.add_argument("--confound", type=float, default=0.0)
    s.add_argument("--label", choices=("age", "gender"), default="gender")
    s.add_argument("--ratios", default="0.8,0.1,0.1")
    s.add_argument("--pool-size", type=int, default=10)
    s.add_argument("--whole-bag-size", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="preprocess, bag and split a CSV/JSONL utterance file")
    s.add_argument("--input", required=True)
    s.add_argument("--scheme", choices=("twitter6", "vox3"), default="twitter6")
    s.add_argument("--whole-bag-size", type=int, default=100)
    s.add_argument("--ratios", default="0.8,0.1,0.1")
    s.add_argument("--pool-size", type=int, default=10)
    s.add_argument("--embeddings", help=".npy array with one row per input row")
    s.add_argument("--hash-dim", type=int, default=0,
                   help="embed text by feature hashing at this width when rows lack embeddings")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train one framework and write checkpoint, history and manifest")
    s.add_argument("--dataset", required=True)
    s.add_argument("--framework", choices=("mil", "rlmil", "rlmil_dat"))
    s.add_argument("--label", choices=("age", "gender"))
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--encoder-name", help="value for the encoder column of results.csv")
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a checkpoint on every split of a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--results", help="also write per-split rows to this CSV")
    s.add_argument("--encoder-name")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare", help="paired comparison table across frameworks and seeds")
    s.add_argument("--results", nargs="+", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="random hyperparameter search")
    s.add_argument("--dataset", required=True)
    s.add_argument("--framework", choices=("mil", "rlmil", "rlmil_dat"))
    s.add_argument("--label", choices=("age", "gender"))
    s.add_argument("--trials", type=int, default=50)
    s.add_argument("--search-space", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    _add_config_flags(s)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except RlmilError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
