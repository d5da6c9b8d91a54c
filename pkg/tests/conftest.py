import numpy as np
import pytest

from ribcascade.anchors import AnchorSet
from ribcascade.geometry import NormalizedBox


def grid_anchors(n=30) -> AnchorSet:
    boxes = []
    for k in range(n):
        row, col = divmod(k, 6)
        cx = 0.12 + 0.15 * col
        cy = 0.1 + 0.16 * row
        boxes.append(NormalizedBox.from_cxcywh(cx, cy, 0.2, 0.1))
    return AnchorSet(boxes, 0.1, "grid", expected_count=n)


@pytest.fixture
def anchors():
    return grid_anchors()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from .test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
