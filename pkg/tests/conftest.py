import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from maskplan.codebook import fit_kmeans
from maskplan.numerics import Rng
from maskplan.sequence import build_vocab
from maskplan.trajdata import generate_dataset, pool_waypoints, vocabulary_words

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_data():
    return generate_dataset(400, Rng(11).child("data"))


@pytest.fixture(scope="session")
def small_codebook(small_data):
    return fit_kmeans(pool_waypoints(small_data), 32, Rng(11).child("codebook"))


@pytest.fixture(scope="session")
def small_vocab(small_codebook):
    return build_vocab(small_codebook, vocabulary_words())


@pytest.fixture
def g():
    return np.random.default_rng(1234)


ACCEPTANCE_NAMES = {
    1: "gradient fidelity",
    2: "quantizer and codebook oracles",
    3: "metric alignment",
    4: "decode ordering",
    5: "structural robustness",
    6: "latency proxy",
    7: "end-to-end learning",
    8: "ablation trends",
    9: "determinism",
}


def pytest_configure(config):
    config.acceptance_results = {}


@pytest.fixture
def record(request):
    """Store one acceptance outcome for the end-of-run summary, then assert it."""

    def _record(n, ok, detail):
        request.config.acceptance_results[n] = (bool(ok), detail)
        assert ok, f"criterion {n} ({ACCEPTANCE_NAMES[n]}): {detail}"

    return _record


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "acceptance_results", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in ACCEPTANCE_NAMES.items():
        if n in results:
            ok, detail = results[n]
            terminalreporter.write_line(f"criterion {n} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
        else:
            terminalreporter.write_line(f"criterion {n} {name}: not run")
