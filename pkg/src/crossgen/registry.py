"""Dataset manifests, patient-disjoint splits and class-balanced sampling."""

import csv
import enum
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from ._io import read_image
from .exceptions import InfeasibleSplitError, ManifestError, ParameterError

REQUIRED_COLUMNS = ("image_path", "label", "patient_id")
SPLIT_NAMES = ("train", "val", "test")


class Stratum(enum.IntEnum):
    """Lung involvement band; the integer value is the ordinal rank."""

    CT0 = 0
    CT1 = 1
    CT2 = 2
    CT3 = 3
    CT4 = 4

    @property
    def label(self):
        return f"CT-{self.value}"

    @property
    def involvement_range(self):
        """Percent lung involvement (low, high) covered by the band."""
        if self is Stratum.CT0:
            return (0.0, 0.0)
        return (25.0 * (self.value - 1), 25.0 * self.value)

    @classmethod
    def parse(cls, text):
        text = str(text).strip()
        if not text:
            return None
        for s in cls:
            if text == s.label:
                return s
        raise ValueError(f"unknown stratum {text!r}; expected one of CT-0..CT-4")


@dataclass(frozen=True)
class SampleRecord:
    image_path: Path
    label: int
    patient_id: str
    stratum: Stratum | None = None
    row: int | None = None

    def load(self):
        return read_image(self.image_path, row=self.row)


@dataclass(frozen=True)
class DatasetDescriptor:
    name: str
    records: tuple
    recommended_split: tuple | None = None

    def __post_init__(self):
        for r in self.records:
            if r.label not in (0, 1):
                raise ManifestError(f"label must be 0 or 1, got {r.label!r}")
        if self.recommended_split is not None:
            if len(self.recommended_split) != len(self.records):
                raise ManifestError("recommended_split length differs from records")
            bad = set(self.recommended_split) - set(SPLIT_NAMES)
            if bad:
                raise ManifestError(f"unknown split names {sorted(bad)}")

    def __len__(self):
        return len(self.records)

    @property
    def labels(self):
        return np.array([r.label for r in self.records], dtype=np.int64)

    def class_counts(self):
        return dict(Counter(r.label for r in self.records))

    def stratum_counts(self):
        return dict(Counter(r.stratum for r in self.records if r.stratum is not None))

    def check_trainable(self):
        counts = self.class_counts()
        if counts.get(0, 0) == 0 or counts.get(1, 0) == 0:
            raise ManifestError(f"dataset {self.name!r} needs both classes, got {counts}")


@dataclass(frozen=True)
class SplitSpec:
    """Split fractions; the default is 0.64/0.16/0.20 (val = 20% of the non-test rest)."""

    train_fraction: Fraction = Fraction(16, 25)
    val_fraction: Fraction = Fraction(4, 25)
    test_fraction: Fraction = Fraction(1, 5)
    seed: int = 0
    patient_disjoint: bool = True

    def __post_init__(self):
        fr = [Fraction(f).limit_denominator(10**6) for f in
              (self.train_fraction, self.val_fraction, self.test_fraction)]
        if any(not (0 < f < 1) for f in fr):
            raise ParameterError(f"split fractions must lie in (0, 1), got {fr}")
        if sum(fr) != 1:
            raise ParameterError(f"split fractions must sum to 1, got {sum(fr)}")
        object.__setattr__(self, "train_fraction", fr[0])
        object.__setattr__(self, "val_fraction", fr[1])
        object.__setattr__(self, "test_fraction", fr[2])


def load_manifest(path, name=None):
    """Parse a comma-separated manifest with header ``image_path,label,patient_id[,stratum]``.

    Relative image paths resolve against the manifest's directory. An optional
    ``split`` column (train/val/test) becomes the recommended split. Image
    files are not opened here; decode failures surface on first access.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"{path}: missing required column(s) {missing}")
        has_split = "split" in header
        records, splits = [], []
        for row_no, row in enumerate(reader, start=2):
            try:
                label = int(row["label"])
                stratum = Stratum.parse(row.get("stratum") or "")
            except ValueError as exc:
                raise ManifestError(f"{path}, row {row_no}: {exc}") from exc
            img = Path(row["image_path"])
            if not img.is_absolute():
                img = path.parent / img
            if label not in (0, 1):
                raise ManifestError(f"{path}, row {row_no}: label must be 0 or 1")
            records.append(SampleRecord(img, label, row["patient_id"], stratum, row_no))
            if has_split:
                splits.append(row["split"].strip())
    if not records:
        raise ManifestError(f"{path}: no records")
    return DatasetDescriptor(
        name=name or path.stem,
        records=tuple(records),
        recommended_split=tuple(splits) if has_split else None,
    )


def write_manifest(path, records, splits=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["image_path", "label", "patient_id", "stratum"]
        if splits is not None:
            header.append("split")
        w.writerow(header)
        for i, r in enumerate(records):
            img = Path(r.image_path)
            try:
                img = img.relative_to(path.parent)
            except ValueError:
                pass
            row = [img.as_posix(), r.label, r.patient_id, r.stratum.label if r.stratum is not None else ""]
            if splits is not None:
                row.append(splits[i])
            w.writerow(row)


def make_splits(d, s=SplitSpec()):
    """Partition ``d`` into (train, val, test) record lists.

    An explicit ``recommended_split`` on the descriptor takes precedence and is
    returned verbatim. Otherwise patients are shuffled with ``s.seed`` and
    assigned whole to test, then val, then train, so each partition's size is
    within one patient of its target.
    """
    if d.recommended_split is not None:
        parts = {k: [] for k in SPLIT_NAMES}
        for r, sp in zip(d.records, d.recommended_split):
            parts[sp].append(r)
        return parts["train"], parts["val"], parts["test"]

    n = len(d.records)
    rng = np.random.default_rng(s.seed)
    if s.patient_disjoint:
        groups = defaultdict(list)
        for r in d.records:
            groups[r.patient_id].append(r)
        largest = max(len(g) for g in groups.values())
        if largest > (1 - s.test_fraction) * n:
            raise InfeasibleSplitError(
                f"one patient owns {largest}/{n} records; exceeds 1 - test_fraction"
            )
        # sorted first so the shuffle is independent of manifest row order
        units = [groups[k] for k in sorted(groups)]
    else:
        units = [[r] for r in d.records]
    order = rng.permutation(len(units))

    targets = {
        "test": math.floor(s.test_fraction * n + Fraction(1, 2)),
        "val": math.floor(s.val_fraction * n + Fraction(1, 2)),
    }
    parts = {k: [] for k in SPLIT_NAMES}
    for i in order:
        unit = units[i]
        for k in ("test", "val"):
            if len(parts[k]) < targets[k]:
                parts[k].extend(unit)
                break
        else:
            parts["train"].extend(unit)
    if not parts["train"]:
        raise InfeasibleSplitError("split left the training partition empty")
    return parts["train"], parts["val"], parts["test"]


def balanced_schedule(train, epoch_len=None, seed=0):
    """Draw ``epoch_len`` record indices with replacement, each class w.p. 1/2 per draw.

    Within a class, records are drawn uniformly.
    """
    labels = np.array([int(getattr(r, "label", r)) for r in train])
    by_class = [np.flatnonzero(labels == c) for c in (0, 1)]
    if any(len(ix) == 0 for ix in by_class):
        raise ParameterError("balanced_schedule needs both classes in the training set")
    if epoch_len is None:
        epoch_len = len(labels)
    rng = np.random.default_rng(seed)
    cls = rng.integers(0, 2, size=epoch_len)
    u = rng.random(epoch_len)
    out = np.empty(epoch_len, dtype=np.int64)
    for c in (0, 1):
        mask = cls == c
        ix = by_class[c]
        pick = np.minimum((u[mask] * len(ix)).astype(np.int64), len(ix) - 1)
        out[mask] = ix[pick]
    return out
