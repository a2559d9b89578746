"""
Centralized configuration for countylex.

All paths are configurable via environment variables so runs can be pointed
at scratch space. Defaults to ~/countylex_data for outputs and the project
root for bundled data files.
"""

import os
from pathlib import Path

# Base data directory - configurable via COUNTYLEX_DATA_DIR env var
DATA_DIR = Path(os.environ.get('COUNTYLEX_DATA_DIR', Path.home() / 'countylex_data'))

# Subdirectories
CHECKPOINTS_DIR = DATA_DIR / 'checkpoints'
FEATURES_DIR = DATA_DIR / 'features'
REPORTS_DIR = DATA_DIR / 'reports'
LEXBANK_DIR = DATA_DIR / 'lexbank'
PROGRESS_DIR = DATA_DIR / 'progress'

# Application directory - defaults to project root (parent of lib/)
APP_DIR = Path(os.environ.get('COUNTYLEX_APP_DIR', Path(__file__).resolve().parent.parent))
BUNDLED_DATA_DIR = APP_DIR / 'data'
LANGID_CORPUS = BUNDLED_DATA_DIR / 'langid_corpus.tsv'
BUNDLED_GAZETTEER = BUNDLED_DATA_DIR / 'gazetteer.tsv'


def worker_count() -> int:
    """Shard parallelism from COUNTYLEX_WORKERS (default: all cores)."""
    raw = os.environ.get('COUNTYLEX_WORKERS')
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"COUNTYLEX_WORKERS must be an integer, got {raw!r}")
    return max(1, os.cpu_count() or 1)


def ensure_dirs():
    """Create all required directories if they don't exist."""
    for d in [DATA_DIR, CHECKPOINTS_DIR, FEATURES_DIR, REPORTS_DIR, LEXBANK_DIR, PROGRESS_DIR]:
        d.mkdir(parents=True, exist_ok=True)
