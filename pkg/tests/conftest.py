# tests/conftest.py
import json
import os
import sys
import tempfile
from typing import Sequence

import pytest

# --- Add parent directory to path so tests can import the root modules ---
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
os.environ.setdefault("TMF_RUNTIME_DIR", tempfile.mkdtemp(prefix="tmf-runtime-"))

from phantom import PhantomSpec, generate_phantom  # noqa: E402
from tumor_shared import ModelConfig  # noqa: E402

SMALL_GRID = {"dims": (48, 48, 48), "spacing_mm": (5.0, 5.0, 5.0)}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run experiment-scale tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: experiment-scale acceptance test (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def small_spec():
    """Factory for a coarse 48^3 / 5 mm phantom spec."""
    def make(**overrides) -> PhantomSpec:
        return PhantomSpec(**{**SMALL_GRID, **overrides})
    return make


@pytest.fixture(scope="session")
def small_phantom(small_spec):
    return generate_phantom(small_spec(), seed=1, patient_id="P001")


@pytest.fixture(scope="session")
def small_model_config():
    # full 16/5 window at 64x64, minimal width
    return ModelConfig(d_model=8, n_heads=2, n_layers_enc=1, n_layers_dec=1, d_ff=16, dropout=0.0)


@pytest.fixture
def manifest_file(tmp_path):
    """Writes a small cohort manifest and returns its path."""
    def make(n_patients: int = 2, groups: Sequence[str] = (), **defaults) -> str:
        centers = [(-55.0, 5.0, -20.0), (55.0, 0.0, -25.0), (-50.0, 0.0, -10.0), (50.0, 5.0, -15.0)]
        patients = []
        for i in range(n_patients):
            patients.append({
                "patient_id": f"P{i + 1:03d}",
                "phantom": {"tumor_center_mm": list(centers[i % len(centers)]),
                            "breathing": {"amplitude_mm": 8.0 + 2.0 * i, "period_s": 4.0}},
                "seeds": {"phantom": 10 * i + 1, "breathing": 10 * i + 2, "test": 10 * i + 3, "t2": 10 * i + 4},
            })
            if groups:
                patients[-1]["group"] = groups[i % len(groups)]
        body = {
            "defaults": {"n_sequences": 1, "duration_s": 5.0, "setup_error_mm": 3.0,
                         "phantom": {"dims": list(SMALL_GRID["dims"]), "spacing_mm": list(SMALL_GRID["spacing_mm"])},
                         **defaults},
            "patients": patients,
        }
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(body))
        return str(path)
    return make
