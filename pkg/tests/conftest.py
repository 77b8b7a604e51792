import os

import pytest

import lamedit as lm
from lamedit import experiment

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
PINNED_CONFIG_PATH = os.path.join(REPO_ROOT, "configs", "default.json")

ACCEPTANCE_RESULTS = []


@pytest.fixture(scope="session")
def acceptance_log():
    def record(criterion, ok, detail):
        ACCEPTANCE_RESULTS.append((criterion, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {criterion}: {detail}")


@pytest.fixture(scope="session")
def small_cfg():
    return lm.GenConfig(
        n_facts=12,
        m_languages=3,
        d=16,
        h=32,
        n_layers=4,
        edit_layers=(2, 3),
        overlap=0.8,
        rephrase_noise=0.25,
        n_preserved=36,
        vocab_size=64,
        seed=5,
    )


@pytest.fixture(scope="session")
def small_bench(small_cfg):
    dataset, model, info = lm.build_benchmark(small_cfg)
    return dataset, model


@pytest.fixture(scope="session")
def pinned_config():
    return experiment.load_config(PINNED_CONFIG_PATH)


@pytest.fixture(scope="session")
def pinned_bench(pinned_config):
    dataset, model, info = lm.build_benchmark(pinned_config.dataset)
    return dataset, model


@pytest.fixture(scope="session")
def pinned_delta_sets(pinned_config, pinned_bench):
    dataset, model = pinned_bench
    return experiment.compute_delta_sets(
        model, dataset, pinned_config.solver, ("per_language", "shared")
    )


@pytest.fixture(scope="session")
def pinned_benchmark_dir(pinned_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    experiment.write_benchmark(pinned_config, str(out))
    return str(out)
