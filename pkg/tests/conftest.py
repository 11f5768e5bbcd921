import numpy as np
import pytest

from crossgen.preprocess import PreprocessSpec
from crossgen.registry import SplitSpec, make_splits
from crossgen.synthetic import ConfounderSpec, LesionSpec, SynthSpec, generate
from crossgen.trainer import TrainConfig, build_model, fit

PP64 = PreprocessSpec(resolution=64)
TINY = TrainConfig(learning_rate=1e-3, backbone="tiny_cnn", batch_size=32, max_epochs=20, seed=0)

_ACCEPTANCE = {}


def record_acceptance(number, ok, detail):
    _ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpora")
    clean = generate(SynthSpec(n_per_class=400, seed=1, prefix="c"), root / "clean", name="clean")
    confounded = generate(SynthSpec(n_per_class=400, seed=2, prefix="f", confounder=ConfounderSpec()),
                          root / "confounded", name="confounded")
    strata = generate(SynthSpec(n_per_class=40, seed=3, prefix="m", strata=True,
                                lesion=LesionSpec(delta=30)), root / "strata", name="strata")
    return {"clean": clean, "confounded": confounded, "strata": strata}


@pytest.fixture(scope="session")
def partitions(corpora):
    return {k: make_splits(d, SplitSpec(seed=0)) for k, d in corpora.items() if k != "strata"}


@pytest.fixture(scope="session")
def trained(partitions):
    cache = {}

    def get(dataset, gabor=False):
        key = (dataset, gabor)
        if key not in cache:
            tr, va, _ = partitions[dataset]
            cache[key] = fit(build_model("tiny_cnn", gabor, 0), tr, va, TINY, PP64, dataset)
        return cache[key]

    return get
