import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

_RESULTS = []


class Recorder:
    def __call__(self, name, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        _RESULTS.append(line)
        print(line)
        return passed


@pytest.fixture
def criterion():
    return Recorder()


@pytest.fixture(autouse=True)
def _torch_state():
    dtype = torch.get_default_dtype()
    yield
    torch.set_default_dtype(dtype)


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)
