"""End-to-end experiment stages: train, evaluate, diagnose, involve."""

import json
import logging
import platform
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import sklearn
import torch
from sklearn.model_selection import GroupShuffleSplit

from . import __version__
from .bias import diagnose as diagnose_dataset
from .config import parse_variant, variant_label
from .evaluator import EvaluationGrid, GridCell, cross_dataset_matrix
from .exceptions import CrossgenError
from .involvement import MinMaxEnsemble, monotonicity_check, score_strata
from .plots import emit_plots
from .registry import load_manifest, make_splits
from .trainer import ModelArtifact, build_model, fit

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


def model_name(dataset, preprocess, gabor):
    return f"{dataset}__{preprocess}__{'gabor' if gabor else 'plain'}"


class Experiment:
    """Runs configured stages against ``cfg.output_dir``.

    Layout: ``checkpoints/``, ``history/``, ``grid.csv``, ``grid.json``,
    ``bias/``, ``strata/``, ``plots/`` and ``run_manifest.json``.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.timings = {}
        self.problems = []
        self._descriptors = {}
        self._splits = {}

    # -- data ----------------------------------------------------------
    def descriptor(self, entry):
        if entry.name not in self._descriptors:
            self._descriptors[entry.name] = load_manifest(entry.manifest, name=entry.name)
        return self._descriptors[entry.name]

    def splits(self, entry):
        if entry.name not in self._splits:
            d = self.descriptor(entry)
            train, val, test = make_splits(d, self.cfg.split_spec(entry))
            if not val:
                # explicit splits without a validation part: hold out patients from train
                groups = [r.patient_id for r in train]
                gss = GroupShuffleSplit(n_splits=1, test_size=0.2, random_state=self.cfg.seed)
                tr, va = next(gss.split(train, groups=groups))
                train, val = [train[i] for i in tr], [train[i] for i in va]
            self._splits[entry.name] = (train, val, test)
        return self._splits[entry.name]

    def checkpoint_path(self, dataset, preprocess, gabor):
        return self.out / "checkpoints" / f"{model_name(dataset, preprocess, gabor)}.ckpt"

    # -- stages --------------------------------------------------------
    def _timed(self, stage, fn):
        t = time.perf_counter()
        try:
            return fn()
        finally:
            self.timings[stage] = round(time.perf_counter() - t, 3)

    def train(self):
        return self._timed("train", self._train)

    def _train(self):
        cfg = self.cfg
        written = []
        for entry in cfg.datasets:
            self.descriptor(entry).check_trainable()
            train, val, _ = self.splits(entry)
            for mode in cfg.preprocess:
                for gabor in cfg.gabor:
                    name = model_name(entry.name, mode, gabor)
                    logger.info("training %s (%d train / %d val)", name, len(train), len(val))
                    try:
                        model = build_model(cfg.train.backbone, gabor, cfg.train.seed, cfg.train.pretrained)
                        art = fit(model, train, val, cfg.train, cfg.preprocess_spec(mode),
                                  dataset=entry.name, gabor=gabor)
                    except CrossgenError as exc:
                        logger.error("training %s aborted: %s", name, exc)
                        self.problems.append({"stage": "train", "model": name, "error": str(exc)})
                        continue
                    written.append(art.save(self.checkpoint_path(entry.name, mode, gabor)))
                    self._write_history(name, art.history)
        return written

    def _write_history(self, name, history):
        path = self.out / "history" / f"{name}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["epoch,train_loss,val_loss,val_acc"]
        lines += [f"{h['epoch']},{h['train_loss']:.6f},{h['val_loss']:.6f},{h['val_acc']:.6f}"
                  for h in history]
        path.write_text("\n".join(lines) + "\n")

    def load_artifacts(self):
        """Available artifacts keyed by (dataset, preprocess, gabor); missing ones are absent."""
        found = {}
        for key in self.cfg.variants():
            path = self.checkpoint_path(*key)
            if path.exists():
                found[key] = ModelArtifact.load(path)
        return found

    def evaluate(self):
        return self._timed("evaluate", self._evaluate)

    def _evaluate(self):
        arts = self.load_artifacts()
        tests = {}
        for entry in self.cfg.datasets:
            try:
                tests[entry.name] = self.splits(entry)[2]
            except CrossgenError as exc:
                logger.error("no test partition for %s: %s", entry.name, exc)
                tests[entry.name] = None
        grid = cross_dataset_matrix([arts[k] for k in self.cfg.variants() if k in arts], tests)
        # configured models without a checkpoint still get (absent) cells
        cells = {(c.model_dataset, c.preprocess, c.gabor, c.test_dataset): c for c in grid.cells}
        ordered = []
        for d, p, g in self.cfg.variants():
            for t in tests:
                ordered.append(cells.get((d, p, g, t)) or GridCell(d, p, g, t, internal=(d == t)))
        grid = EvaluationGrid(ordered)
        for c in grid.absent:
            self.problems.append({"stage": "evaluate", "cell": [c.model_dataset, c.preprocess,
                                                                 c.gabor, c.test_dataset], "error": "absent"})
        grid.write_csv(self.out / "grid.csv")
        grid.write_json(self.out / "grid.json")
        self.grid = grid
        return grid

    def diagnose(self):
        return self._timed("diagnose", self._diagnose)

    def _diagnose(self):
        entries = list(self.cfg.datasets) + ([self.cfg.control] if self.cfg.control else [])
        results = {}
        for entry in entries:
            d = self.descriptor(entry)
            if len(d.class_counts()) < 2:
                logger.info("skipping bias diagnostics for single-class dataset %s", entry.name)
                continue
            diag = diagnose_dataset(d, self.cfg.diagnostics_resolution)
            diag.save(self.out / "bias", entry.name)
            results[entry.name] = diag
        self.diagnostics = results
        return results

    def involve(self):
        return self._timed("involve", self._involve)

    def _involve(self):
        cfg = self.cfg
        if cfg.control is None:
            self.strata_reports = []
            return []
        control = list(self.descriptor(cfg.control).records)
        arts = self.load_artifacts()
        reports = []
        for key in cfg.variants():
            if key in arts:
                reports.append(score_strata(arts[key], control, model=model_name(*key)))
        for e in cfg.ensembles:
            a, b = (parse_variant(m) for m in e.members)
            for entry in cfg.datasets:
                if e.dataset not in (None, entry.name):
                    continue
                ka, kb = (entry.name,) + a, (entry.name,) + b
                if ka not in arts or kb not in arts:
                    self.problems.append({"stage": "involve", "ensemble": list(e.members),
                                          "dataset": entry.name, "error": "member checkpoint missing"})
                    continue
                ens = MinMaxEnsemble(arts[ka], arts[kb]).fit()
                name = f"{entry.name}__minmax__{'__'.join(e.members)}"
                reports.append(score_strata(ens, control, model=name))
        summary = {}
        for r in reports:
            r.write_csv(self.out / "strata" / f"{r.model}.csv")
            try:
                m = monotonicity_check(r)
                summary[r.model] = asdict(m)
            except CrossgenError as exc:
                summary[r.model] = {"error": str(exc)}
        (self.out / "strata").mkdir(parents=True, exist_ok=True)
        (self.out / "strata" / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        self.strata_reports = reports
        return reports

    def plots(self):
        return self._timed("plots", lambda: emit_plots(
            getattr(self, "grid", None), getattr(self, "strata_reports", []),
            self.out / "plots", getattr(self, "diagnostics", None)))

    def run_all(self):
        self.train()
        self.evaluate()
        self.diagnose()
        self.involve()
        self.plots()
        return self.status

    @property
    def status(self):
        return EXIT_PARTIAL if self.problems else EXIT_OK

    def write_manifest(self, stages):
        doc = {
            "stages": stages,
            "seed": self.cfg.seed,
            "train_seed": self.cfg.train.seed,
            "config": _jsonable(self.cfg),
            "versions": {
                "crossgen": __version__,
                "python": platform.python_version(),
                "torch": torch.__version__,
                "numpy": np.__version__,
                "scikit-learn": sklearn.__version__,
            },
            "timings_s": self.timings,
            "problems": self.problems,
            "status": self.status,
        }
        path = self.out / "run_manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
        return path


def _jsonable(cfg):
    d = asdict(cfg)
    return json.loads(json.dumps(d, default=str))


def run_experiment(cfg, stages=("train", "evaluate", "diagnose", "involve", "plots")):
    """Run ``stages`` in order; returns (exit status, Experiment)."""
    exp = Experiment(cfg)
    for stage in stages:
        getattr(exp, stage)()
    exp.write_manifest(list(stages))
    return exp.status, exp
