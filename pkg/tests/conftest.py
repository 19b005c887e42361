import numpy as np
import pytest

from feddd.model import LayeredModel, mlp_shapes


def random_model(dims, seed=0, scale=1.0) -> LayeredModel:
    rng = np.random.default_rng(seed)
    shapes = mlp_shapes(dims)
    return LayeredModel(
        [scale * rng.standard_normal((s.out_units, s.in_units)) for s in shapes],
        [scale * rng.standard_normal(s.out_units) for s in shapes],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Filled by the acceptance tests: criterion number -> one-line measurement.
ACCEPTANCE_DETAILS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_DETAILS:
        return
    outcomes = {}
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if "test_acceptance.py::test_c" in rep.nodeid:
                num = int(rep.nodeid.split("::test_c")[1][:2])
                outcomes[num] = "PASS" if key == "passed" else "FAIL"
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_DETAILS):
        verdict = "PASS" if outcomes.get(num) == "PASS" else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d}: {verdict}  {ACCEPTANCE_DETAILS[num]}")
