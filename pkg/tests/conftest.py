import numpy as np
import pytest
from hypothesis import settings

from aflora.adapter import DecoupledAdapter
from aflora.linalg import random_rows

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def make_adapter(rng, m, n, r, C=1.0, mask=None, lam_scale=1.0):
    """Random adapter whose A rows have norm C exactly and whose masked B columns are zero."""
    mask = np.ones(r, dtype=np.int64) if mask is None else np.asarray(mask)
    b = rng.standard_normal((m, r)) * mask
    lam = lam_scale * rng.standard_normal(r) * mask
    return DecoupledAdapter(a_slice=random_rows(rng, r, n, C), b=b, lam=lam, mask=mask)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
