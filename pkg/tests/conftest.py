import sys
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_ops(rng, count, ctf=True, pixel=3.0):
    from specvol import core

    defoci = (1.5, 1.67, 1.83, 2.0, 2.17, 2.33, 2.5)
    ops = []
    for _ in range(count):
        c = core.CtfParams(defocus_um=float(rng.choice(defoci)), pixel_size_A=pixel, enabled=ctf)
        ops.append(core.ImagingOperator(core.Rotation.random(rng), c))
    return ops


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", {}) if mod else {}
    if lines:
        terminalreporter.section("acceptance criteria")
        for num in sorted(lines):
            terminalreporter.write_line(lines[num])
