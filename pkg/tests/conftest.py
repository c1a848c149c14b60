import os

import pytest

from desk import Trainer

# criterion number -> (passed, detail); printed once at the end of the run
ACCEPTANCE = {}


def record_criterion(number, title, passed, detail=""):
    ACCEPTANCE[number] = (title, bool(passed), detail)


@pytest.fixture(scope="session")
def trainer(tmp_path_factory):
    root = os.environ.get("FIGSEP_MODEL_CACHE") or str(tmp_path_factory.mktemp("models"))
    return Trainer(root)


@pytest.fixture(scope="session")
def heldout():
    from desk import heldout_corpus

    return heldout_corpus(0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
