import numpy as np
import pytest
from hypothesis import settings

from pedseg.phantom import generate_phantom, standard_spec
from pedseg.pipeline import RunConfig, run_full

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def _case(kind):
    return generate_phantom(standard_spec(kind))


@pytest.fixture(scope="session")
def atrt_case():
    return _case("atrt")


@pytest.fixture(scope="session")
def dipg_case():
    return _case("dipg")


@pytest.fixture(scope="session")
def lgg_case():
    return _case("lgg")


@pytest.fixture(scope="session")
def healthy_case():
    return _case("healthy")


@pytest.fixture(scope="session")
def atrt_run(atrt_case):
    return run_full(atrt_case.study, atrt_case.atlas_wm, atrt_case.atlas_gm, RunConfig(), truth=atrt_case.truth_wt)


@pytest.fixture(scope="session")
def dipg_run(dipg_case):
    return run_full(dipg_case.study, dipg_case.atlas_wm, dipg_case.atlas_gm, RunConfig(), truth=dipg_case.truth_wt)


@pytest.fixture(scope="session")
def lgg_run(lgg_case):
    return run_full(lgg_case.study, lgg_case.atlas_wm, lgg_case.atlas_gm, RunConfig(), truth=lgg_case.truth_wt)


@pytest.fixture(scope="session")
def atrt_tissue(atrt_run):
    return atrt_run.tissue


def dice_np(a, b):
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    s = a.sum() + b.sum()
    return None if s == 0 else 2.0 * (a & b).sum() / s


ACCEPTANCE: list = []


def record_acceptance(name, ok, detail):
    """Store one acceptance verdict; the lines are printed after the test run."""
    ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    print(ACCEPTANCE[-1])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
