import sys

import numpy as np
import pytest

from fusionrisk.data import BranchParams, SyntheticConfig, generate_synthetic_cohort

PREVALENCE = 0.11


def complementary_config(n_validation=2000, n_test=4000, seed=11, rho=0.4):
    return SyntheticConfig(
        n={"train": 0, "validation": n_validation, "test": n_test},
        prevalence=PREVALENCE,
        branches={
            "ts": BranchParams.calibrated(0.85, PREVALENCE),
            "cn": BranchParams.calibrated(0.87, PREVALENCE),
        },
        rho=rho,
        seed=seed,
    )


@pytest.fixture(scope="session")
def small_cohort():
    return generate_synthetic_cohort(complementary_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
