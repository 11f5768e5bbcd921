import hashlib
import json
import logging

import numpy as np
import pytest
import yaml

from crossgen.cli import main
from crossgen.config import from_dict, load_config, parse_variant, variant_label
from crossgen.evaluator import ConfusionMatrix, EvaluationGrid, GridCell, compute_metrics
from crossgen.exceptions import ParameterError
from crossgen.involvement import StrataReport
from crossgen.pipeline import EXIT_OK, EXIT_PARTIAL, run_experiment
from crossgen.plots import emit_plots, strata_figure
from crossgen.registry import Stratum
from crossgen.synthetic import write_demo

TINY_TRAIN = {"backbone": "tiny_cnn", "learning_rate": 1e-3, "batch_size": 8, "max_epochs": 2}


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    write_demo(root, n_per_class=12, n_per_stratum=4, resolution=32)
    return root


def _config(demo, tmp_path, **overrides):
    doc = {
        "seed": 0,
        "datasets": [{"name": "clean", "manifest": str(demo / "clean/manifest.csv")}],
        "preprocess": ["clahe"],
        "gabor": [False, True],
        "preprocess_options": {"resolution": 32, "clahe_tiles": 4},
        "train": TINY_TRAIN,
        "control": {"name": "strata", "manifest": str(demo / "strata/manifest.csv")},
        "ensembles": [["clahe+gabor", "clahe-gabor"]],
        "output_dir": "out",
    }
    doc.update(overrides)
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_variant_labels():
    assert parse_variant("clahe+gabor") == ("clahe", True)
    assert parse_variant("hist_eq-gabor") == ("hist_eq", False)
    assert variant_label("none", True) == "none+gabor"
    with pytest.raises(ParameterError):
        parse_variant("clahe")


def test_config_parsing(tmp_path, demo):
    cfg = load_config(_config(demo, tmp_path))
    assert cfg.output_dir == tmp_path / "out"
    assert cfg.train.backbone == "tiny_cnn" and cfg.train.seed == 0
    assert cfg.variants() == [("clean", "clahe", False), ("clean", "clahe", True)]
    assert cfg.preprocess_spec("clahe").clahe_tiles == 4
    over = cfg.with_overrides(seed=5, output_dir=tmp_path / "x", device="cpu")
    assert (over.seed, over.train.seed, over.output_dir) == (5, 5, tmp_path / "x")
    rel = from_dict({"datasets": [{"name": "a", "manifest": "m.csv"}]}, base=tmp_path)
    assert rel.datasets[0].manifest == tmp_path / "m.csv"


@pytest.mark.parametrize("doc", [
    {"datasets": []},
    {"datasets": [{"name": "a", "manifest": "m"}], "preprocess": ["sharpen"]},
    {"datasets": [{"name": "a", "manifest": "m"}], "gabor": []},
    {"datasets": [{"name": "a", "manifest": "m"}], "colour": "blue"},
    {"datasets": [{"name": "a", "manifest": "m"}], "train": {"optimizer": "sgd"}},
    {"datasets": [{"name": "a", "manifest": "m"}, {"name": "a", "manifest": "n"}]},
])
def test_config_errors(doc):
    with pytest.raises(ParameterError):
        from_dict(doc)


def test_cli_all(tmp_path, demo, capsys):
    cfg = _config(demo, tmp_path)
    out = tmp_path / "run"
    assert main(["all", "--config", str(cfg), "--out", str(out), "--seed", "0", "--device", "cpu"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == str(out)
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == [
        "clean__clahe__gabor.ckpt", "clean__clahe__plain.ckpt"]
    for name in ("grid.csv", "grid.json", "run_manifest.json", "bias/clean_bias.json",
                 "bias/strata_bias.json", "strata/summary.json", "history/clean__clahe__plain.csv",
                 "plots/grid_accuracy.png", "plots/composite__clean__class1.png"):
        assert (out / name).exists(), name
    strata = sorted(p.name for p in (out / "strata").glob("*.csv"))
    assert strata == ["clean__clahe__gabor.csv", "clean__clahe__plain.csv",
                      "clean__minmax__clahe+gabor__clahe-gabor.csv"]
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["status"] == 0 and manifest["seed"] == 0
    assert {"torch", "numpy", "crossgen"} <= set(manifest["versions"])
    assert set(manifest["timings_s"]) == {"train", "evaluate", "diagnose", "involve", "plots"}
    summary = json.loads((out / "strata/summary.json").read_text())
    assert set(summary) == {s[:-4] for s in strata}


def test_no_control_skips_strata(tmp_path, demo):
    cfg = load_config(_config(demo, tmp_path, control=None, ensembles=[], gabor=[False]))
    status, exp = run_experiment(cfg)
    assert status == EXIT_OK
    assert (cfg.output_dir / "grid.csv").exists()
    assert not (cfg.output_dir / "strata").exists()
    assert exp.grid.shape == (1, 1)


def test_missing_checkpoints_are_partial(tmp_path, demo):
    cfg = _config(demo, tmp_path)
    assert main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == EXIT_PARTIAL
    rows = (tmp_path / "empty" / "grid.csv").read_text().splitlines()
    assert len(rows) == 3 and all(r.endswith(",absent") for r in rows[1:])


def test_stage_subcommands(tmp_path, demo):
    cfg = _config(demo, tmp_path, gabor=[False], ensembles=[])
    out = tmp_path / "staged"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert (out / "checkpoints" / "clean__clahe__plain.ckpt").exists()
    assert not (out / "grid.csv").exists()
    assert main(["involve", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert (out / "strata" / "clean__clahe__plain.csv").exists()
    assert main(["diagnose", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert (out / "bias" / "clean_class0_composite.png").exists()


def test_fatal_errors(tmp_path):
    assert main(["all", "--config", str(tmp_path / "nope.yaml")]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("datasets: []\n")
    assert main(["train", "--config", str(bad)]) == 1


def test_synth_subcommand(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--n", "3", "--n-strata", "2"]) == 0
    cfg = load_config(capsys.readouterr().out.strip())
    assert [d.name for d in cfg.datasets] == ["clean", "confounded"]
    assert cfg.control.manifest.exists() and len(cfg.variants()) == 12


def _reference_report():
    means = dict(zip(Stratum, (25.184, 32.240, 51.353, 65.917, 96.380)))
    return StrataReport.from_means("reference", means, n=2)


def test_strata_plot_contract():
    fig = strata_figure(_reference_report())
    ax = fig.axes[0]
    assert len(ax.lines) == 2 and all(len(l.get_xdata()) == 5 for l in ax.lines)
    assert len(ax.collections) == 2
    pos = ax.lines[0].get_ydata()
    assert pos[0] == pytest.approx(25.184) and pos[-1] == pytest.approx(96.38)
    assert np.all(np.diff(pos) > 0)


def test_plots_deterministic(tmp_path, caplog):
    cm = ConfusionMatrix(5, 1, 4, 2)
    grid = EvaluationGrid([GridCell("a", "none", False, "a", True, compute_metrics(cm)),
                           GridCell("a", "none", False, "b", False)])
    reports = [_reference_report()]
    a = emit_plots(grid, reports, tmp_path / "a")
    b = emit_plots(grid, reports, tmp_path / "b")
    assert [p.name for p in a] == ["strata__reference.png", "grid_accuracy.png"]
    assert [_digest(p) for p in a] == [_digest(p) for p in b]
    with caplog.at_level(logging.WARNING):
        assert emit_plots(None, [], tmp_path / "c") == []
    assert "nothing to render" in caplog.text
