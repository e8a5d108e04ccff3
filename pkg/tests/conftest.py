"""
Pytest configuration and fixtures shared by the pipeline tests.
Slow tests (default-size training) are skipped unless WIFLOW_RUN_SLOW=1.
"""
import os
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

# Load .env so WIFLOW_* settings apply when running tests from project root
try:
    from dotenv import load_dotenv
    load_dotenv(ROOT / ".env")
except ImportError:
    pass


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks (enable with WIFLOW_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("WIFLOW_RUN_SLOW", "").strip().lower() in ("1", "true", "yes", "on"):
        return
    skip = pytest.mark.skip(reason="slow; set WIFLOW_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    from core.gradcheck_suite import tiny_model_config
    return tiny_model_config()


@pytest.fixture
def float64():
    from core.tensor_core import precision
    with precision(64):
        yield


@pytest.fixture(scope="session")
def synth_config():
    """Small synthetic sessions: 80 channels, 5-tick windows."""
    from core.synth_data import SynthConfig
    return SynthConfig(channels=80, ticks=600, n_paths=4, seed=11)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory, synth_config):
    """Portable dataset with 3 subjects x 2 sessions written once per test session."""
    from core.synth_data import make_dataset
    root = tmp_path_factory.mktemp("synth")
    make_dataset(3, 2, synth_config, root)
    return root


@pytest.fixture(scope="session")
def tiny_ingest():
    from core.csi_ingest import IngestConfig
    return IngestConfig(window_T=5, stride=5, channels=80)


@pytest.fixture(scope="session")
def synth_dataset(synth_root, tiny_ingest):
    from core.dataset import load_dataset
    return load_dataset(synth_root, tiny_ingest)
