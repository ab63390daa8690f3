import numpy as np
import pytest
import torch
from hypothesis import settings

from dfmgan.data import DatasetSpec, generate_synthetic
from dfmgan.networks import SynthesisConfig

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def tiny_cfg():
    """8x8, 8 channels everywhere, 16-dim latents."""
    return SynthesisConfig(resolution=8, channel_base=64, channel_max=8, z_dim=16, w_dim=16)


@pytest.fixture
def small_cfg():
    """16x16 with channels {4: 16, 8: 16, 16: 8}."""
    return SynthesisConfig(resolution=16, channel_base=128, channel_max=16, z_dim=32, w_dim=32)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    spec = DatasetSpec(category="widget", n_good=12, defects={"hole": 6, "scratch": 6}, resolution=16, seed=0)
    generate_synthetic(spec, root)
    return root


@pytest.fixture(autouse=True)
def _seed_global_rng():
    torch.manual_seed(1234)
    np.random.seed(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
