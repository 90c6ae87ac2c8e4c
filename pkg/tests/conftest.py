import math

import numpy as np
import pytest

from casa.perturbation import rotate_toward
from casa.stain_core import canonical_stain_matrix


def stain_matrix_with_separation(sep_rad, rng=None):
    """Valid stain matrix whose columns are ``sep_rad`` apart.

    Column 0 is the canonical hematoxylin direction (optionally jittered),
    column 1 is rotated from it toward the canonical eosin direction.
    """
    w0 = canonical_stain_matrix()
    h = w0[:, 0].copy()
    if rng is not None:
        h = np.abs(h + rng.normal(scale=0.05, size=3))
        h /= np.linalg.norm(h)
    t = w0[:, 1] - (w0[:, 1] @ h) * h
    t /= np.linalg.norm(t)
    e = rotate_toward(h, t, sep_rad)
    assert np.all(e >= 0)
    return np.stack([h, e / np.linalg.norm(e)], axis=1)


@pytest.fixture
def w_canon():
    return canonical_stain_matrix()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def w25():
    return stain_matrix_with_separation(math.radians(25))


def pytest_terminal_summary(terminalreporter):
    # repeat the per-criterion lines printed by the acceptance tests
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if "test_acceptance" in getattr(rep, "nodeid", "") and rep.when == "call":
                lines += [ln for ln in rep.capstdout.splitlines() if ln.startswith(("[PASS]", "[FAIL]"))]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda ln: int(ln.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
