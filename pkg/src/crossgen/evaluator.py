"""Confusion-matrix metrics and the cross-dataset evaluation grid."""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ContractError, ImageDecodeError, ParameterError
from .registry import SampleRecord

logger = logging.getLogger(__name__)

THRESHOLD = 0.5
METRIC_NAMES = ("accuracy", "f1", "precision", "recall", "sensitivity", "specificity")
GRID_COLUMNS = ("model_dataset", "preprocess", "gabor", "test_dataset", "internal", "n",
                *METRIC_NAMES, "status")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ContractError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, y_true, y_pred):
        y_true = np.asarray(y_true).astype(bool)
        y_pred = np.asarray(y_pred).astype(bool)
        if y_true.shape != y_pred.shape:
            raise ContractError("y_true and y_pred shapes differ")
        return cls(
            tp=int(np.sum(y_true & y_pred)),
            fp=int(np.sum(~y_true & y_pred)),
            tn=int(np.sum(~y_true & ~y_pred)),
            fn=int(np.sum(y_true & ~y_pred)),
        )


@dataclass
class MetricsReport:
    """Percentages; precision/recall/f1 are macro averages over both classes."""

    accuracy: float
    f1: float
    precision: float
    recall: float
    sensitivity: float
    specificity: float
    confusion: ConfusionMatrix
    positive_class: dict = field(default_factory=dict)
    degenerate: list = field(default_factory=list)
    model: str | None = None
    test_dataset: str | None = None

    def metrics(self):
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_dict(self):
        d = self.metrics()
        d.update(
            averaging="macro",
            positive_class=dict(self.positive_class),
            confusion=asdict(self.confusion),
            n=self.confusion.total,
            degenerate=list(self.degenerate),
            model=self.model,
            test_dataset=self.test_dataset,
        )
        return d


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def _f1(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def compute_metrics(cm, model=None, test_dataset=None):
    """Accuracy, sensitivity, specificity and macro precision/recall/F1, all in percent.

    A zero denominator yields 0 and is listed in ``degenerate``.
    """
    n = cm.total
    if n == 0:
        raise ParameterError("cannot compute metrics over zero samples")
    flags = []
    prec_pos = _ratio(cm.tp, cm.tp + cm.fp, "precision_positive", flags)
    prec_neg = _ratio(cm.tn, cm.tn + cm.fn, "precision_negative", flags)
    sens = _ratio(cm.tp, cm.tp + cm.fn, "sensitivity", flags)
    spec = _ratio(cm.tn, cm.tn + cm.fp, "specificity", flags)
    f1_pos, f1_neg = _f1(prec_pos, sens), _f1(prec_neg, spec)
    pct = lambda x: 100.0 * x
    return MetricsReport(
        accuracy=pct((cm.tp + cm.tn) / n),
        f1=pct((f1_pos + f1_neg) / 2),
        precision=pct((prec_pos + prec_neg) / 2),
        recall=pct((sens + spec) / 2),
        sensitivity=pct(sens),
        specificity=pct(spec),
        confusion=cm,
        positive_class={"precision": pct(prec_pos), "recall": pct(sens), "f1": pct(f1_pos)},
        degenerate=flags,
        model=model,
        test_dataset=test_dataset,
    )


@dataclass
class Predictions:
    """Per-record (p_negative, p_positive); failed rows are NaN and listed in ``failures``."""

    proba: np.ndarray
    failures: list

    @property
    def ok(self):
        return ~np.isnan(self.proba[:, 0])


def predict_proba(artifact, records):
    """Score ``records`` with ``artifact``; decode failures are recorded, not raised."""
    records = list(records)
    proba = np.full((len(records), 2), np.nan)
    images, keep, failures = [], [], []
    for i, r in enumerate(records):
        try:
            images.append(r.load() if isinstance(r, SampleRecord) else r)
            keep.append(i)
        except ImageDecodeError as exc:
            failures.append({"index": i, "path": exc.path, "error": str(exc)})
            logger.warning("%s", exc)
    if keep:
        proba[keep] = artifact.predict_proba(images)
    return Predictions(proba, failures)


def evaluate(artifact, records, test_dataset=None, threshold=THRESHOLD):
    """Metrics for one model on one test partition (positive when p_positive >= threshold)."""
    records = list(records)
    pred = predict_proba(artifact, records)
    ok = pred.ok
    if not ok.any():
        raise ParameterError("no records could be scored")
    y = np.array([r.label for r in records])[ok]
    cm = ConfusionMatrix.from_predictions(y, pred.proba[ok, 1] >= threshold)
    report = compute_metrics(cm, model=artifact.name, test_dataset=test_dataset)
    return report, pred


@dataclass
class GridCell:
    model_dataset: str
    preprocess: str
    gabor: bool
    test_dataset: str
    internal: bool
    report: MetricsReport | None = None
    failures: list = field(default_factory=list)

    @property
    def status(self):
        if self.report is None:
            return "absent"
        return "partial" if self.failures else "ok"

    def row(self):
        row = {
            "model_dataset": self.model_dataset,
            "preprocess": self.preprocess,
            "gabor": int(self.gabor),
            "test_dataset": self.test_dataset,
            "internal": int(self.internal),
            "n": self.report.confusion.total if self.report else "",
            "status": self.status,
        }
        for k in METRIC_NAMES:
            row[k] = f"{getattr(self.report, k):.4f}" if self.report else ""
        return row


@dataclass
class EvaluationGrid:
    cells: list

    @property
    def shape(self):
        models = {(c.model_dataset, c.preprocess, c.gabor) for c in self.cells}
        tests = {c.test_dataset for c in self.cells}
        return len(models), len(tests)

    @property
    def absent(self):
        return [c for c in self.cells if c.report is None]

    def cell(self, model_dataset, preprocess, gabor, test_dataset):
        for c in self.cells:
            if (c.model_dataset, c.preprocess, c.gabor, c.test_dataset) == (
                model_dataset, preprocess, bool(gabor), test_dataset):
                return c
        raise KeyError((model_dataset, preprocess, gabor, test_dataset))

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=GRID_COLUMNS, lineterminator="\n")
            w.writeheader()
            for c in self.cells:
                w.writerow(c.row())
        return path

    def to_json(self):
        """One table per (training dataset, gabor flag), rows per preprocessing x test set."""
        tables = {}
        for c in self.cells:
            key = (c.model_dataset, c.gabor)
            t = tables.setdefault(key, {"model_dataset": c.model_dataset, "gabor": c.gabor, "rows": []})
            row = {"preprocess": c.preprocess, "test_dataset": c.test_dataset,
                   "internal": c.internal, "status": c.status, "failures": c.failures}
            if c.report is not None:
                row.update(c.report.to_dict())
            t["rows"].append(row)
        return {"averaging": "macro", "threshold": THRESHOLD, "tables": list(tables.values())}

    def write_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return path


def cross_dataset_matrix(artifacts, test_partitions):
    """Evaluate every artifact on every test partition.

    ``test_partitions`` maps dataset name to records (``None`` marks a missing
    partition). Each cell applies the evaluating model's own preprocessing.
    The diagonal (training dataset == test dataset) is the internal test.
    """
    cells = []
    for art in artifacts:
        prov = art.provenance
        for name, records in test_partitions.items():
            cell = GridCell(prov["dataset"], prov["preprocess"]["histogram_mode"], bool(prov["gabor"]),
                            name, internal=(name == prov["dataset"]))
            if records:
                try:
                    cell.report, pred = evaluate(art, records, test_dataset=name)
                    cell.failures = pred.failures
                except ParameterError as exc:
                    logger.warning("cell %s -> %s absent: %s", art.name, name, exc)
            cells.append(cell)
    return EvaluationGrid(cells)
