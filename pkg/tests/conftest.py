import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from adatrack.synth import make_texture

# derandomized so repeated runs explore the same examples
settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def perlin():
    return make_texture("perlin", 11)


def texture_image(tex, width, height, x0=0.0, y0=0.0):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    return tex(xx + 0.5 + x0, yy + 0.5 + y0)


def pytest_terminal_summary(terminalreporter):
    from tests import verdicts

    if not verdicts.ran_any():
        return
    terminalreporter.section("acceptance criteria")
    for line in verdicts.summary_lines():
        terminalreporter.write_line(line)
