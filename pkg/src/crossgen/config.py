"""Experiment configuration (YAML)."""

from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .exceptions import ParameterError
from .preprocess import HISTOGRAM_MODES, PreprocessSpec
from .registry import SplitSpec
from .trainer import TrainConfig


@dataclass(frozen=True)
class DatasetEntry:
    name: str
    manifest: Path
    split: dict | None = None  # fractions; ignored when the manifest has a split column


@dataclass(frozen=True)
class EnsembleEntry:
    members: tuple  # two variant labels such as "clahe+gabor", "clahe-gabor"
    dataset: str | None = None  # None: apply to every training dataset


@dataclass(frozen=True)
class ExperimentConfig:
    datasets: tuple
    preprocess: tuple = ("none", "hist_eq", "clahe")
    gabor: tuple = (False, True)
    preprocess_options: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    control: DatasetEntry | None = None
    ensembles: tuple = ()
    output_dir: Path = Path("out")
    seed: int = 0
    diagnostics_resolution: int = 256

    def __post_init__(self):
        if not self.datasets:
            raise ParameterError("config needs at least one dataset")
        if not self.preprocess or set(self.preprocess) - set(HISTOGRAM_MODES):
            raise ParameterError(f"preprocess must be a non-empty subset of {HISTOGRAM_MODES}")
        if not self.gabor or any(not isinstance(g, bool) for g in self.gabor):
            raise ParameterError("gabor must be a non-empty list of booleans")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ParameterError("dataset names must be unique")
        for e in self.ensembles:
            if len(e.members) != 2:
                raise ParameterError("an ensemble pairs exactly two variants")
            for m in e.members:
                parse_variant(m)

    def preprocess_spec(self, mode):
        return PreprocessSpec(histogram_mode=mode, **self.preprocess_options)

    def split_spec(self, entry):
        fr = entry.split or {}
        return SplitSpec(
            train_fraction=fr.get("train", SplitSpec.train_fraction),
            val_fraction=fr.get("val", SplitSpec.val_fraction),
            test_fraction=fr.get("test", SplitSpec.test_fraction),
            seed=self.seed,
        )

    def variants(self):
        """Every (dataset, preprocess, gabor) combination in a fixed order."""
        return [(d.name, p, g) for d in self.datasets for p in self.preprocess for g in self.gabor]

    def with_overrides(self, seed=None, output_dir=None, device=None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed), train=replace(cfg.train, seed=int(seed)))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=Path(output_dir))
        if device is not None:
            cfg = replace(cfg, train=replace(cfg.train, device=device))
        return cfg


def variant_label(preprocess, gabor):
    return f"{preprocess}{'+' if gabor else '-'}gabor"


def parse_variant(label):
    """``"clahe+gabor"`` -> ("clahe", True); ``"none-gabor"`` -> ("none", False)."""
    for sign, flag in (("+gabor", True), ("-gabor", False)):
        if label.endswith(sign):
            mode = label[: -len(sign)]
            if mode in HISTOGRAM_MODES:
                return mode, flag
    raise ParameterError(f"bad variant {label!r}; expected e.g. 'clahe+gabor' or 'clahe-gabor'")


def _dataset(d, base):
    if "name" not in d or "manifest" not in d:
        raise ParameterError("each dataset needs 'name' and 'manifest'")
    m = Path(d["manifest"])
    return DatasetEntry(d["name"], m if m.is_absolute() else base / m, d.get("split"))


def from_dict(doc, base=Path(".")):
    base = Path(base)
    known = {"datasets", "preprocess", "gabor", "preprocess_options", "train", "control",
             "ensembles", "output_dir", "seed", "diagnostics_resolution"}
    unknown = set(doc) - known
    if unknown:
        raise ParameterError(f"unknown config keys {sorted(unknown)}")
    seed = int(doc.get("seed", 0))
    train = dict(doc.get("train") or {})
    train.setdefault("seed", seed)
    out = Path(doc.get("output_dir", "out"))
    ensembles = []
    for e in doc.get("ensembles") or []:
        if isinstance(e, dict):
            ensembles.append(EnsembleEntry(tuple(e["members"]), e.get("dataset")))
        else:
            ensembles.append(EnsembleEntry(tuple(e)))
    return ExperimentConfig(
        datasets=tuple(_dataset(d, base) for d in doc.get("datasets") or []),
        preprocess=tuple(doc.get("preprocess", ("none", "hist_eq", "clahe"))),
        gabor=tuple(doc.get("gabor", (False, True))),
        preprocess_options=dict(doc.get("preprocess_options") or {}),
        train=TrainConfig.from_dict(train),
        control=_dataset(doc["control"], base) if doc.get("control") else None,
        ensembles=tuple(ensembles),
        output_dir=out if out.is_absolute() else base / out,
        seed=seed,
        diagnostics_resolution=int(doc.get("diagnostics_resolution", 256)),
    )


def load_config(path):
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    return from_dict(doc, base=path.parent)
