import os

import hypothesis
import pytest
import torch

hypothesis.settings.register_profile("default", deadline=None, max_examples=50)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=10)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_acceptance():
    def record(criterion: str, passed: bool | None, detail: str = ""):
        status = "NOT RUN" if passed is None else "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES.append(f"{status:<7}  {criterion}  {detail}".rstrip())

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
