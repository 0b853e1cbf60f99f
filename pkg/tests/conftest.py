import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ssa_tta import config, experiment

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_dist(rng, C):
    p = rng.dirichlet(np.full(C, rng.uniform(0.1, 2.0)))
    return p / p.sum()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def clf_cfg():
    return config.default_config()


@pytest.fixture(scope="session")
def clf_setup(clf_cfg):
    """Seed-0 classification domains plus the trained reference and source models."""
    dom = experiment.make_domains(clf_cfg)
    models = experiment.train_models(clf_cfg, dom)
    return dom, models


@pytest.fixture(scope="session")
def small_dense_cfg():
    return config.experiment_from_dict({
        "data": {"task": "dense", "height": 8, "width": 8, "samples_per_class": 8},
        "reference": {"epochs": 3},
        "source": {"epochs": 3},
        "adapt": {"stage1_epochs": 1, "stage2_epochs": 1, "batch_size": 8},
    })


@pytest.fixture(scope="session")
def small_dense_setup(small_dense_cfg):
    dom = experiment.make_domains(small_dense_cfg)
    models = experiment.train_models(small_dense_cfg, dom)
    return dom, models


ACCEPTANCE_LINES: dict[int, list[str]] = {}


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion; returns ``passed``."""
    def record(criterion: int, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion:2d}: {detail}"
        ACCEPTANCE_LINES.setdefault(criterion, []).append(line)
        print(line)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for criterion in sorted(ACCEPTANCE_LINES):
            for line in ACCEPTANCE_LINES[criterion]:
                terminalreporter.write_line(line)
