"""Pytest configuration for SensorLens tests"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Add backend to path for imports when pytest is run without pytest.ini
backend_path = Path(__file__).parent.parent
sys.path.insert(0, str(backend_path))

from app.core.run_config import RunConfig  # noqa: E402
from app.services.sensor_ingest import Window, slide_windows, synth_stream  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running property or training checks")
    config.addinivalue_line("markers", "ibrl: needs the real IBRL data.txt via SENSORLENS_IBRL_PATH")


@pytest.fixture
def make_window():
    """Factory for 64-sample windows with a chosen temperature trace"""

    def _make(temperature=None, node_id: int = 1, start_index: int = 0, seed: int = 0) -> Window:
        rng = np.random.default_rng(seed)
        if temperature is None:
            temperature = 20.0 + rng.normal(0.0, 1.0, 64)
        temperature = np.asarray(temperature, dtype=np.float64)
        n = temperature.shape[0]
        features = np.column_stack([
            temperature,
            35.0 + rng.normal(0.0, 0.5, n),
            300.0 + rng.normal(0.0, 10.0, n),
            2.6 + rng.normal(0.0, 0.01, n),
        ])
        epochs = np.arange(start_index + 1, start_index + n + 1)
        return Window(node_id=node_id, start_index=start_index, epochs=epochs, features=features)

    return _make


@pytest.fixture
def synthetic_windows():
    """80 clean windows from two synthetic nodes"""
    windows = []
    for node in (1, 2):
        windows.extend(slide_windows(synth_stream(node, 64 * 40, seed=100 + node)))
    return windows


@pytest.fixture
def smoke_config(tmp_path):
    """Tiny synthetic run: two intensities per grid, one seed, a few epochs"""
    return RunConfig(
        synthetic=True,
        synthetic_samples=64 * 20,
        nodes=[1, 2],
        master_seed=11,
        noise_grid=[0.5, 3.0],
        short_grid=[1.5, 10.0],
        fixed_grid=[150.0, 500.0],
        models=["M1", "CART"],
        train={"learning_rate": 0.01, "batch_size": 16, "max_epochs": 2, "patience": 1},
        cart={"max_depth": 4, "min_leaf": 2},
        seed_count=1,
        output_dir=str(tmp_path / "runs"),
    )


@pytest.fixture
def ibrl_path():
    """Path of the real dataset, or skip"""
    path = os.environ.get("SENSORLENS_IBRL_PATH")
    if not path or not Path(path).is_file():
        pytest.skip("SENSORLENS_IBRL_PATH not set to the IBRL data.txt")
    return Path(path)


@pytest.fixture(autouse=True)
def reset_singletons():
    """Reset singleton instances between tests"""
    yield

    import app.core.run_config as run_config_mod
    run_config_mod._loader = None
