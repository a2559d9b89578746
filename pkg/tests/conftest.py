import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

# Add project root to path to import lib modules
sys.path.insert(0, str(Path(__file__).parent.parent))

from lib import config  # noqa: E402

settings.register_profile(
    "default",
    settings(
        suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
        max_examples=50,
        deadline=None,
    ),
)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def data_dir(tmp_path, monkeypatch):
    """Point every output directory at a per-test scratch tree."""
    root = tmp_path / 'countylex_data'
    monkeypatch.setattr(config, 'DATA_DIR', root)
    monkeypatch.setattr(config, 'CHECKPOINTS_DIR', root / 'checkpoints')
    monkeypatch.setattr(config, 'FEATURES_DIR', root / 'features')
    monkeypatch.setattr(config, 'REPORTS_DIR', root / 'reports')
    monkeypatch.setattr(config, 'LEXBANK_DIR', root / 'lexbank')
    monkeypatch.setattr(config, 'PROGRESS_DIR', root / 'progress')
    monkeypatch.setenv('COUNTYLEX_WORKERS', '2')
    return root


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size synthetic runs (deselect with -m 'not slow')")
