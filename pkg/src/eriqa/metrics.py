"""Correlation criteria, logistic mapping, weighted averages and the
pristine/level/pairwise generalisation tests."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit
from scipy.stats import rankdata


class DegenerateCorrelation(ArithmeticError):
    """A correlation is undefined because one input has zero variance."""


def _pair(y, yhat, min_n=2):
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.size} vs {yhat.size}")
    if y.size < min_n:
        raise ValueError(f"need at least {min_n} points, got {y.size}")
    if not (np.isfinite(y).all() and np.isfinite(yhat).all()):
        raise ValueError("non-finite score")
    return y, yhat


def pearson(a, b):
    a, b = _pair(a, b)
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if sa == 0 or sb == 0:
        raise DegenerateCorrelation("zero variance")
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


def srocc(y, yhat):
    """Spearman correlation: Pearson correlation of average ranks."""
    y, yhat = _pair(y, yhat)
    if np.ptp(y) == 0 or np.ptp(yhat) == 0:
        raise DegenerateCorrelation("constant input has no rank order")
    return pearson(rankdata(y), rankdata(yhat))


def srocc_closed_form(y, yhat):
    """1 - 6*sum(d^2) / (N(N^2-1)); exact only when neither input has ties."""
    y, yhat = _pair(y, yhat)
    n = y.size
    d = rankdata(y) - rankdata(yhat)
    return 1.0 - 6.0 * float(d @ d) / (n * (n * n - 1))


# ---------------------------------------------------------------------------
# Five-parameter logistic


@dataclass
class LogisticParams:
    beta: tuple
    residual: float = float("nan")  # mean squared error at the optimum

    def __call__(self, q):
        return logistic(q, self.beta)

    @property
    def monotone(self):
        """True when the sigmoid and linear terms do not oppose each other."""
        b1, b2, _, b4, _ = self.beta
        return b1 * b2 * b4 >= 0


def logistic(q, beta):
    b1, b2, b3, b4, b5 = beta
    q = np.asarray(q, dtype=np.float64)
    # 1/(1+exp(t)) == expit(-t) without overflow
    return b1 * (0.5 - expit(-b2 * (q - b3))) + b4 * q + b5


def fit_logistic(q, y, max_iter=5000, ftol=1e-10, restarts=4):
    """Least-squares fit of the five-parameter logistic by Nelder-Mead.

    Starts from the conventional initial guess and from the best affine fit
    (sigmoid switched off), restarting each from its own optimum; the best
    of all runs is returned, so the result is never worse than plain linear
    regression.
    """
    q, y = _pair(q, y, min_n=5)
    sq = q.std()
    if sq == 0:
        raise ValueError("degenerate predictor: std(q) == 0")

    def mse(beta):
        r = logistic(q, beta) - y
        return float(r @ r) / r.size

    slope, intercept = np.polyfit(q, y, 1)
    starts = [
        np.array([y.max() - y.min(), 1.0 / sq, q.mean(), 0.0, y.mean()]),
        np.array([0.0, 1.0 / sq, q.mean(), slope, intercept]),
    ]
    best_beta, best_val = None, np.inf
    for x0 in starts:
        x, val = x0, mse(x0)
        for _ in range(restarts):
            res = minimize(mse, x, method="Nelder-Mead",
                           options={"maxiter": max_iter, "maxfev": 4 * max_iter, "fatol": ftol,
                                    "xatol": 1e-12, "adaptive": True})
            improved = res.fun < val - 1e-14
            if res.fun <= val:
                x, val = res.x, float(res.fun)
            if not improved:
                break
        if val < best_val:
            best_beta, best_val = x, val
    return LogisticParams(tuple(float(b) for b in best_beta), best_val)


def plcc(y, yhat, params=None):
    """Pearson correlation between y and the logistic-mapped predictions.

    Fits the logistic on (yhat -> y) first when ``params`` is not given.
    """
    y, yhat = _pair(y, yhat)
    if params is None:
        params = fit_logistic(yhat, y)
    return pearson(y, params(yhat))


def weighted_average(values, counts):
    values = np.asarray(values, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    if values.size == 0:
        raise ValueError("weighted_average of empty input")
    if values.shape != counts.shape:
        raise ValueError("values and counts differ in length")
    if (counts <= 0).any():
        raise ValueError("counts must be positive")
    return float(values @ counts / counts.sum())


# ---------------------------------------------------------------------------
# Generalisation tests


def d_test(pristine_scores, distorted_scores):
    """Best balanced accuracy of a single threshold separating pristine from distorted."""
    p = np.asarray(pristine_scores, dtype=np.float64)
    d = np.asarray(distorted_scores, dtype=np.float64)
    if p.size == 0 or d.size == 0:
        raise ValueError("d_test needs non-empty pristine and distorted score lists")
    s = np.sort(np.concatenate([p, d]))
    thresholds = np.concatenate([[-np.inf], (s[1:] + s[:-1]) / 2.0, [np.inf]])
    ps, ds = np.sort(p), np.sort(d)
    # fraction of pristine > T and distorted <= T via sorted search
    above = 1.0 - np.searchsorted(ps, thresholds, side="right") / p.size
    below = np.searchsorted(ds, thresholds, side="right") / d.size
    return float(np.max(0.5 * (above + below)))


@dataclass
class ScoreTable:
    ids: list = field(default_factory=list)
    pristine_ids: list = field(default_factory=list)
    kinds: list = field(default_factory=list)
    levels: list = field(default_factory=list)
    y: list = field(default_factory=list)
    yhat: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.ids)
        if any(len(col) != n for col in (self.pristine_ids, self.kinds, self.levels, self.y, self.yhat)):
            raise ValueError("ScoreTable columns differ in length")

    def __len__(self):
        return len(self.ids)

    def append(self, id_, pristine_id, kind, level, y, yhat):
        if not (math.isfinite(y) and math.isfinite(yhat)):
            raise ValueError(f"non-finite score for {id_}")
        self.ids.append(id_)
        self.pristine_ids.append(int(pristine_id))
        self.kinds.append(kind)
        self.levels.append(int(level))
        self.y.append(float(y))
        self.yhat.append(float(yhat))

    def rows(self):
        return zip(self.ids, self.pristine_ids, self.kinds, self.levels, self.y, self.yhat)

    def select(self, pred):
        out = ScoreTable()
        for row in self.rows():
            if pred(row):
                out.append(*row)
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "pristine_id", "kind", "level", "y", "yhat"])
        for i, pid, kind, level, y, yh in self.rows():
            w.writerow([i, pid, kind, level, repr(y), repr(yh)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        out = cls()
        for row in csv.DictReader(io.StringIO(text)):
            out.append(row["id"], int(row["pristine_id"]), row["kind"], int(row["level"]),
                       float(row["y"]), float(row["yhat"]))
        return out


def _groups(table):
    groups = defaultdict(list)
    for _, pid, kind, level, _, yh in table.rows():
        if level > 0:
            groups[(pid, kind)].append((level, yh))
    return groups


def l_test(table):
    """Mean |SROCC| between distortion level and prediction over (pristine, kind) groups."""
    vals = []
    for members in _groups(table).values():
        if len({lv for lv, _ in members}) < 2:
            continue
        lv, yh = zip(*members)
        try:
            vals.append(abs(srocc(lv, yh)))
        except DegenerateCorrelation:
            vals.append(0.0)
    if not vals:
        raise ValueError("l_test: no (pristine, kind) group with two or more levels")
    return float(np.mean(vals))


def discriminable_pairs(table):
    """(better index, worse index) pairs with a known quality ordering."""
    pairs = []
    by_group = defaultdict(list)
    pristine_at = {}
    for i, (_, pid, kind, level, _, _) in enumerate(table.rows()):
        if level == 0:
            pristine_at[pid] = i
        else:
            by_group[(pid, kind)].append((level, i))
    for (pid, _), members in sorted(by_group.items()):
        for la, ia in members:
            for lb, ib in members:
                if lb - la >= 2:
                    pairs.append((ia, ib))
        if pid in pristine_at:
            pairs += [(pristine_at[pid], i) for lv, i in members if lv >= 3]
    return pairs


def p_test(table):
    """Fraction of discriminable pairs ranked correctly; prediction ties count as wrong."""
    pairs = discriminable_pairs(table)
    if not pairs:
        raise ValueError("p_test: no discriminable pairs")
    yh = np.asarray(table.yhat)
    better, worse = np.asarray(pairs).T
    return float(np.mean(yh[better] > yh[worse]))


# ---------------------------------------------------------------------------
# Reports


def evaluate_table(table, name="desk"):
    """Per-dataset and per-kind criteria plus D/L/P where the table supports them."""
    distorted = table.select(lambda r: r[3] > 0)
    entry = {"n": len(distorted)}
    entry.update(_correlations(distorted.y, distorted.yhat))
    per_kind = {}
    for kind in sorted(set(distorted.kinds)):
        sub = distorted.select(lambda r, k=kind: r[2] == k)
        per_kind[kind] = {"n": len(sub), **_correlations(sub.y, sub.yhat, plcc_too=False)}
    report = {"datasets": {name: entry}, "per_kind": per_kind}
    report["weighted_average"] = {
        "srocc": _wa([entry], "srocc"),
        "plcc": _wa([entry], "plcc"),
    }
    gen = {}
    prist = [yh for _, _, _, lv, _, yh in table.rows() if lv == 0]
    if prist and len(distorted):
        gen["d_test"] = d_test(prist, distorted.yhat)
    try:
        gen["l_test"] = l_test(table)
    except ValueError:
        pass
    try:
        gen["p_test"] = p_test(table)
    except ValueError:
        pass
    report["generalization"] = gen
    return report


def _correlations(y, yhat, plcc_too=True):
    out = {}
    try:
        out["srocc"] = srocc(y, yhat)
    except (DegenerateCorrelation, ValueError) as exc:
        out["srocc"] = f"degenerate: {exc}"
    if plcc_too:
        try:
            params = fit_logistic(yhat, y)
            out["plcc"] = plcc(y, yhat, params)
            out["logistic_beta"] = list(params.beta)
        except (DegenerateCorrelation, ValueError) as exc:
            out["plcc"] = f"degenerate: {exc}"
    return out


def _wa(entries, key):
    vals = [(e[key], e["n"]) for e in entries if isinstance(e.get(key), float)]
    if not vals:
        return "degenerate"
    v, n = zip(*vals)
    return weighted_average(v, n)


def combine_reports(reports):
    """Merge single-dataset reports, recomputing the sample-weighted averages."""
    merged = {"datasets": {}, "per_kind": {}, "weighted_average": {}, "generalization": {}}
    for r in reports:
        merged["datasets"].update(r["datasets"])
    entries = list(merged["datasets"].values())
    merged["weighted_average"] = {"srocc": _wa(entries, "srocc"), "plcc": _wa(entries, "plcc")}
    if len(reports) == 1:
        merged["per_kind"] = reports[0]["per_kind"]
        merged["generalization"] = reports[0]["generalization"]
    return merged


def dumps_report(obj, indent=0):
    """Deterministic JSON: insertion key order, floats with six decimals."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad}"{k}": {dumps_report(v, indent + 1)}' for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps_report(v, indent + 1) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None:
        return {True: "true", False: "false", None: "null"}[obj]
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            return '"' + str(float(obj)) + '"'
        return f"{float(obj):.6f}"
    return '"' + str(obj).replace("\\", "\\\\").replace('"', '\\"') + '"'
