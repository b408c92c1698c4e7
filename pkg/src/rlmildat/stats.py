"""Classification metrics and the paired cross-framework comparison table."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import special
from scipy.stats import norm

from .errors import AlignmentError, DataError

log = logging.getLogger(__name__)

FRAMEWORKS = ("mil", "rlmil", "rlmil_dat")


def confusion_matrix(y_true, y_pred, n_classes):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError(f"y_true {y_true.shape} and y_pred {y_pred.shape} differ in length")
    if len(y_true) == 0:
        raise DataError("metric on empty input")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.min() < 0 or y.max() >= n_classes:
            raise DataError(f"{name} has labels outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _ratio(a, b):
    return a / b if b else 0.0


def per_class_f1(cm):
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    out = []
    for c in range(len(tp)):
        p = _ratio(tp[c], tp[c] + fp[c])
        r = _ratio(tp[c], tp[c] + fn[c])
        out.append(_ratio(2 * p * r, p + r))
    return np.array(out)


def macro_f1(y_true, y_pred, n_classes, present_only=False):
    """Unweighted mean of per-class F1 over all ``n_classes`` (0/0 counts as 0).

    With ``present_only`` the mean runs over classes seen in either y_true or y_pred.
    """
    cm = confusion_matrix(y_true, y_pred, n_classes)
    f1 = per_class_f1(cm)
    if present_only:
        seen = (cm.sum(axis=0) + cm.sum(axis=1)) > 0
        return float(f1[seen].mean())
    return float(f1.mean())


def accuracy(y_true, y_pred):
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if len(y_true) == 0:
        raise DataError("metric on empty input")
    return float((y_true == y_pred).mean())


# ------------------------------------------------------------------ t-test


@dataclass
class TTestResult:
    t: float
    p_value: float
    ci95: float
    mean_diff: float
    n: int
    degenerate: bool = False


def student_t_sf2(t, df):
    """Two-sided tail probability P(|T| >= |t|) via the regularised incomplete beta."""
    if math.isinf(t):
        return 0.0
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def student_t_quantile(q, df):
    return float(special.stdtrit(df, q))


def paired_t_test(a, b):
    """Paired two-sided t-test of a - b; returns t, p, CI95 half-width and mean difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise AlignmentError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise DataError("paired t-test needs n >= 2")
    d = a - b
    md = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if md == 0.0:
            return TTestResult(0.0, 1.0, 0.0, 0.0, n)
        return TTestResult(math.copysign(math.inf, md), 0.0, 0.0, md, n, degenerate=True)
    se = sd / math.sqrt(n)
    t = md / se
    return TTestResult(t, student_t_sf2(t, n - 1), student_t_quantile(0.975, n - 1) * se, md, n)


# --------------------------------------------------------------- normality


@dataclass
class NormalityResult:
    statistic: float
    p_value: float
    status: str  # "pass", "warn" or "skipped"


def _swilk_coefficients(n):
    m = norm.ppf((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    if n == 3:
        return np.array([-math.sqrt(0.5), 0.0, math.sqrt(0.5)])
    mm = float(m @ m)
    u = 1.0 / math.sqrt(n)
    c = m / math.sqrt(mm)
    an = c[-1] + 0.221157 * u - 0.147981 * u**2 - 2.071190 * u**3 + 4.434685 * u**4 - 2.706056 * u**5
    a = np.empty(n)
    if n > 5:
        an1 = c[-2] + 0.042981 * u - 0.293762 * u**2 - 1.752461 * u**3 + 5.682633 * u**4 - 3.582633 * u**5
        phi = (mm - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * an**2 - 2 * an1**2)
        a[2:-2] = m[2:-2] / math.sqrt(phi)
        a[1], a[-2] = -an1, an1
    else:
        phi = (mm - 2 * m[-1] ** 2) / (1 - 2 * an**2)
        a[1:-1] = m[1:-1] / math.sqrt(phi)
    a[0], a[-1] = -an, an
    return a


def shapiro_wilk(x):
    """Shapiro-Wilk W and p-value using Royston's (1992) coefficient and tail approximations."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = len(x)
    if n < 3:
        raise DataError("Shapiro-Wilk needs n >= 3")
    ss = float(((x - x.mean()) ** 2).sum())
    if ss == 0:
        return 1.0, 1.0
    a = _swilk_coefficients(n)
    w = min(float((a @ x) ** 2 / ss), 1.0)
    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return w, max(p, 0.0)
    if w >= 1.0:
        return 1.0, 1.0
    if n <= 11:
        gamma = -2.273 + 0.459 * n
        y = math.log(1 - w)
        if y >= gamma:
            return w, 1e-99
        y = -math.log(gamma - y)
        mu = 0.5440 - 0.39978 * n + 0.025054 * n**2 - 0.0006714 * n**3
        sigma = math.exp(1.3822 - 0.77857 * n + 0.062767 * n**2 - 0.0020322 * n**3)
    else:
        ln = math.log(n)
        y = math.log(1 - w)
        mu = -1.5861 - 0.31082 * ln - 0.083751 * ln**2 + 0.0038915 * ln**3
        sigma = math.exp(-0.4803 - 0.082676 * ln + 0.0030302 * ln**2)
    return w, float(norm.sf((y - mu) / sigma))


def normality_check(d, alpha=0.05):
    """Warn-only normality screen for paired differences (3 <= n <= 50)."""
    d = np.asarray(d, dtype=np.float64)
    if not 3 <= len(d) <= 50:
        log.warning("normality check skipped: unsupported n=%d (needs 3..50)", len(d))
        return NormalityResult(math.nan, math.nan, "skipped")
    w, p = shapiro_wilk(d)
    status = "pass" if p >= alpha else "warn"
    if status == "warn":
        log.warning("paired differences look non-normal (W=%.4f, p=%.4g)", w, p)
    return NormalityResult(w, p, status)


# -------------------------------------------------------------- comparison

RESULT_COLUMNS = ("encoder", "pooling", "label", "framework", "seed", "split", "macro_f1", "accuracy")
COMPARISON_COLUMNS = (
    "encoder", "pooling", "label", "mil", "rlmil", "rlmil_dat",
    "delta_mil", "ci95_mil", "p_mil", "delta_rlmil", "ci95_rlmil", "p_rlmil", "n_seeds",
)


@dataclass
class ComparisonRow:
    encoder: str
    pooling: str
    label: str
    mil: float | None
    rlmil: float | None
    rlmil_dat: float | None
    delta_mil: float | None
    ci95_mil: float | None
    p_mil: float | None
    delta_rlmil: float | None
    ci95_rlmil: float | None
    p_rlmil: float | None
    n_seeds: int


def read_results(path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = [c for c in RESULT_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"results file lacks columns {missing}")
        rows = []
        for r in reader:
            rows.append({**r, "seed": int(r["seed"]), "macro_f1": float(r["macro_f1"]),
                         "accuracy": float(r["accuracy"])})
    return rows


def build_comparison(results, split="test"):
    """Mean score per framework and paired tests of RLMIL-DAT against MIL and RLMIL.

    ``results`` are dicts with the RESULT_COLUMNS keys. Cells are
    (encoder, pooling, label); every framework present in a cell must cover
    the same seeds.
    """
    scores = defaultdict(dict)
    for r in results:
        if r["split"] != split:
            continue
        if r["framework"] not in FRAMEWORKS:
            raise DataError(f"unknown framework {r['framework']!r}")
        key = (str(r["encoder"]), str(r["pooling"]), str(r["label"]))
        scores[key].setdefault(r["framework"], {})[int(r["seed"])] = float(r["macro_f1"])
    gaps = []
    for key, fw in scores.items():
        seeds = set().union(*[set(v) for v in fw.values()])
        for name, per_seed in fw.items():
            gaps.extend((key, name, s) for s in sorted(seeds - set(per_seed)))
    if gaps:
        listing = ", ".join(f"{'/'.join(k)}:{f} seed {s}" for k, f, s in gaps)
        raise AlignmentError(f"ragged seed grid; missing {listing}")
    rows = []
    for key in sorted(scores):
        fw = scores[key]
        seeds = sorted(next(iter(fw.values())))
        means = {f: float(np.mean([fw[f][s] for s in seeds])) if f in fw else None for f in FRAMEWORKS}
        stats = {}
        for base in ("mil", "rlmil"):
            if "rlmil_dat" in fw and base in fw and len(seeds) >= 2:
                dat = [fw["rlmil_dat"][s] for s in seeds]
                ref = [fw[base][s] for s in seeds]
                res = paired_t_test(dat, ref)
                if len(seeds) >= 3:
                    normality_check(np.subtract(dat, ref))
                stats[base] = (means["rlmil_dat"] - means[base], res.ci95, res.p_value)
            else:
                stats[base] = (None, None, None)
        if "rlmil_dat" not in fw or len(fw) == 1:
            log.warning("cell %s: only %s present; comparison columns left empty", "/".join(key), sorted(fw))
        rows.append(ComparisonRow(*key, means["mil"], means["rlmil"], means["rlmil_dat"],
                                  *stats["mil"], *stats["rlmil"], len(seeds)))
    return rows


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_comparison_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([_fmt(d[c]) for c in COMPARISON_COLUMNS])


def render_table(rows):
    header = ["Encoder", "Pooling", "Label", "MIL", "RLMIL", "RLMIL-DAT",
              "dMIL", "CI95", "p", "dRLMIL", "CI95", "p", "n"]
    lines = []
    body = []
    for r in rows:
        d = asdict(r)
        body.append([d["encoder"], d["pooling"], d["label"]]
                    + ["" if d[c] is None else f"{d[c]:.3f}" for c in COMPARISON_COLUMNS[3:-1]]
                    + [str(d["n_seeds"])])
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.rjust(w) if i >= 3 else c.ljust(w) for i, (c, w) in enumerate(zip(b, widths)))
                 for b in body)
    return "\n".join(lines) + "\n"


def write_plot_data(results, out_dir, split="test"):
    """Bar-chart (mean per framework) and box-plot (per-seed) series as CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per = defaultdict(list)
    box = []
    for r in results:
        if r["split"] != split:
            continue
        per[(r["encoder"], r["pooling"], r["label"], r["framework"])].append(float(r["macro_f1"]))
        box.append((r["pooling"], r["label"], r["framework"], r["encoder"], int(r["seed"]), float(r["macro_f1"])))
    with open(out / "bar.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["encoder", "pooling", "label", "framework", "mean_macro_f1"])
        for k in sorted(per):
            w.writerow([*k, repr(float(np.mean(per[k])))])
    with open(out / "box.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["pooling", "label", "framework", "encoder", "seed", "macro_f1"])
        for row in sorted(box):
            w.writerow([*row[:-1], repr(row[-1])])
