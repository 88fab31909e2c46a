import os

import numpy as np
import pytest
import torch
from hypothesis import settings

from countlab.anchors import HashTextEncoder, build_anchor_tensor, build_rats_anchors
from countlab.datamodel import CategorySet, CountBinning

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def binning():
    return CountBinning(4)


@pytest.fixture(scope="session")
def anchors(binning):
    return build_anchor_tensor(CategorySet(), binning, HashTextEncoder(64))


@pytest.fixture(scope="session")
def rats_anchors(binning):
    return build_rats_anchors(binning, HashTextEncoder(64))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; the collected lines are printed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, status, detail):
        lines.append(f"criterion {number}: {status}  {detail}")
        return status

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
