"""Per-stratum involvement scoring, the min-max ensemble and monotonicity checks."""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import check_probability
from .exceptions import ContractError, ParameterError
from .registry import Stratum

Z95 = 1.96
STRATA_COLUMNS = ("stratum", "n", "mean_pos", "mean_neg", "ci_pos", "ci_neg")


@dataclass(frozen=True)
class StratumRow:
    stratum: Stratum
    n: int
    mean_pos: float = math.nan
    mean_neg: float = math.nan
    ci_pos: float = math.nan
    ci_neg: float = math.nan

    @property
    def present(self):
        return self.n > 0

    @property
    def ci_defined(self):
        return self.n > 1 and math.isfinite(self.ci_pos)


@dataclass
class StrataReport:
    """Mean positive/negative scores (percent) per stratum with 95% CI half-widths."""

    model: str
    rows: list
    provenance: dict = field(default_factory=dict)

    def present(self):
        return [r for r in self.rows if r.present]

    def row(self, stratum):
        for r in self.rows:
            if r.stratum == stratum:
                return r
        raise KeyError(stratum)

    @property
    def mean_positive(self):
        return np.array([r.mean_pos for r in self.present()])

    @classmethod
    def from_means(cls, model, means_pos, n=None):
        """Build a report from known per-stratum positive means (percent); CIs undefined."""
        rows = []
        for s in Stratum:
            if s in means_pos:
                m = float(means_pos[s])
                rows.append(StratumRow(s, 1 if n is None else int(n), m, 100.0 - m))
            else:
                rows.append(StratumRow(s, 0))
        return cls(model, rows)

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fmt = lambda x: "" if not math.isfinite(x) else f"{x:.6f}"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(STRATA_COLUMNS)
            for r in self.rows:
                w.writerow([r.stratum.label, r.n, fmt(r.mean_pos), fmt(r.mean_neg),
                            fmt(r.ci_pos), fmt(r.ci_neg)])
        return path

    @classmethod
    def read_csv(cls, path, model=None):
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for d in csv.DictReader(fh):
                val = lambda k: float(d[k]) if d[k] else math.nan
                rows.append(StratumRow(Stratum.parse(d["stratum"]), int(d["n"]), val("mean_pos"),
                                       val("mean_neg"), val("ci_pos"), val("ci_neg")))
        return cls(model or Path(path).stem, rows)


def aggregate_strata(strata, p_positive, model="model"):
    """Group positive-class probabilities by stratum into a StrataReport.

    CI half-width is 1.96 * s / sqrt(n) with the sample standard deviation
    (ddof=1), scaled to percent. Empty strata have n=0; a single record
    leaves the CI undefined (NaN).
    """
    p = check_probability(np.asarray(p_positive, dtype=np.float64), "p_positive")
    strata = list(strata)
    if len(strata) != len(p):
        raise ContractError("strata and scores differ in length")
    if any(s is None for s in strata):
        raise ContractError("every record must carry a stratum")
    rows = []
    for s in Stratum:
        sel = p[np.array([t == s for t in strata], dtype=bool)] if len(p) else p
        n = len(sel)
        if n == 0:
            rows.append(StratumRow(s, 0))
            continue
        mean_pos = 100.0 * float(sel.mean())
        ci = Z95 * 100.0 * float(sel.std(ddof=1)) / math.sqrt(n) if n > 1 else math.nan
        rows.append(StratumRow(s, n, mean_pos, 100.0 - mean_pos, ci, ci))
    return StrataReport(model, rows)


def score_strata(source, records, model=None):
    """Score stratified records with anything exposing ``predict_proba(records) -> (n, 2)``."""
    records = list(records)
    proba = np.asarray(source.predict_proba(records), dtype=np.float64)
    ok = ~np.isnan(proba[:, 1])
    name = model or getattr(source, "name", type(source).__name__)
    report = aggregate_strata([r.stratum for r, k in zip(records, ok) if k], proba[ok, 1], name)
    report.provenance = dict(getattr(source, "provenance", {}) or {})
    return report


def minmax_ensemble(p_gabor, p_plain):
    """Combine two positive-class probabilities: positive = max, negative = min of complements.

    Returns (p_negative, p_positive); the pair sums to 1 since
    min(1 - a, 1 - b) = 1 - max(a, b).
    """
    a = check_probability(p_gabor, "p_gabor")
    b = check_probability(p_plain, "p_plain")
    p_pos = np.maximum(a, b)
    p_neg = np.minimum(1.0 - a, 1.0 - b)
    if np.ndim(p_pos) == 0:
        return float(p_neg), float(p_pos)
    return p_neg, p_pos


class MinMaxEnsemble(ClassifierMixin, BaseEstimator):
    """Min-max combination of two fitted binary scorers sharing a preprocessing path.

    ``first`` and ``second`` are any objects with ``predict_proba(X) -> (n, 2)``;
    in the reference configuration these are the Gabor and plain models.
    """

    def __init__(self, first=None, second=None, name="minmax"):
        self.first = first
        self.second = second
        self.name = name

    def fit(self, X=None, y=None):
        if self.first is None or self.second is None:
            raise ParameterError("MinMaxEnsemble needs two fitted scorers")
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        X = list(X)
        pa = np.asarray(self.first.predict_proba(X))[:, 1]
        pb = np.asarray(self.second.predict_proba(X))[:, 1]
        p_neg, p_pos = minmax_ensemble(pa, pb)
        return np.column_stack([p_neg, p_pos])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    @property
    def provenance(self):
        return {
            "ensemble": "minmax",
            "members": [getattr(m, "provenance", {}) for m in (self.first, self.second)],
        }


@dataclass(frozen=True)
class MonotonicityResult:
    spearman_rho: float
    monotone: bool
    degenerate: bool = False


def monotonicity_check(report):
    """Spearman correlation of stratum rank vs mean positive score over present strata."""
    rows = report.present()
    if len(rows) < 2:
        raise ParameterError("monotonicity needs at least two non-empty strata")
    ranks = [r.stratum.value for r in rows]
    means = np.array([r.mean_pos for r in rows])
    monotone = bool(np.all(np.diff(means) > 0))
    if np.all(means == means[0]):
        return MonotonicityResult(0.0, False, True)
    return MonotonicityResult(spearman(ranks, means), monotone)


def spearman(x, y):
    """Spearman rank correlation; exact closed form when neither input has ties."""
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    n = len(rx)
    if len(set(rx)) == n and len(set(ry)) == n:
        d2 = float(np.sum((rx - ry) ** 2))
        return 1.0 - 6.0 * d2 / (n * (n * n - 1))
    return float(stats.pearsonr(rx, ry).statistic)

