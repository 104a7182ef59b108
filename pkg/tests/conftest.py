import numpy as np
import pytest

from puface.datasets import SynthIdentitySpec, generate_synthetic, split
from puface.extractor import ExtractorConfig, train_extractor

TINY_E = ExtractorConfig(image_size=16, channels=(4, 8, 8), embedding_dim=8, pool_grid=2, epochs=3, batch_size=8)


@pytest.fixture(scope="session")
def tiny_ds():
    spec = SynthIdentitySpec(num_identities=4, images_per_identity=6, image_size=16, seed=3)
    return split(generate_synthetic(spec), 0.5, 0)


@pytest.fixture(scope="session")
def tiny_E(tiny_ds):
    return train_extractor(tiny_ds, TINY_E)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_ds():
    spec = SynthIdentitySpec(num_identities=6, images_per_identity=12, image_size=16, seed=5)
    return split(generate_synthetic(spec), 0.7, 0)


@pytest.fixture(scope="session")
def small_E(small_ds):
    return train_extractor(small_ds, ExtractorConfig(image_size=16, channels=(8, 16, 16), embedding_dim=16,
                                                     pool_grid=2, epochs=60, batch_size=8))


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """criterion number -> one PASS/FAIL line, echoed in the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
