import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from meningefem import CohesiveLaw, Layer, Material, OgdenParams, generate_sample_mesh

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

B1_MU = (800.0, 386.7)
S1 = (3.0e3, 2.1e3, 0.48)


@pytest.fixture
def b1():
    return OgdenParams.from_poisson(B1_MU)


@pytest.fixture
def brain_b1(b1):
    return Material("brain", params=b1)


@pytest.fixture
def s1_law():
    return CohesiveLaw(*S1)


@pytest.fixture
def unit_cube():
    """Reference corners of a 1 mm cube in the solver's node order."""
    return 1e-3 * np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                            [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=float)


@pytest.fixture
def small_block():
    """Two-by-two-by-two tissue block, 2 mm elements."""
    return generate_sample_mesh((4e-3, 4e-3, 4e-3), 2e-3, [Layer("brain", 4e-3)])


@pytest.fixture
def small_stack():
    """Tissue, cohesive plane and rigid skull, 2 mm elements."""
    return generate_sample_mesh((4e-3, 4e-3, 6e-3), 2e-3, [Layer("brain", 4e-3), Layer("skull", 2e-3)],
                                cohesive_plane=4e-3)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Print one pass/fail line for an acceptance criterion and fail the test if it did not pass."""

    def _verdict(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        assert ok, line

    return _verdict


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
