"""
Provenance headers for every artifact the tool writes.
"""

import hashlib
import json
from datetime import datetime, timezone
from typing import Any, Dict, Optional

from lib import __version__


def config_hash(settings: Any) -> str:
    """sha256 of the canonical JSON form of ``settings``."""
    canonical = json.dumps(settings, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def provenance(settings: Any, vocabulary_hash: Optional[str] = None,
               seed: Optional[int] = None, **extra) -> Dict[str, Any]:
    record = {
        'tool': 'countylex',
        'version': __version__,
        'config_hash': config_hash(settings),
        'vocabulary_hash': vocabulary_hash,
        'seed': seed,
        'created_at': datetime.now(timezone.utc).isoformat(timespec='seconds'),
    }
    record.update(extra)
    return record


def header_lines(record: Dict[str, Any]) -> str:
    """Render a provenance record as '# key: value' lines."""
    return ''.join(f"# {key}: {value}\n" for key, value in record.items())
