"""
Progress file for long ingest and experiment runs.

Each run owns PROGRESS_DIR/<operation_id>_progress.json, rewritten atomically
on every update. Besides the percent it carries the current stage, the shard
or grid cell being worked on, and running counters (records read, mapped,
accumulated) so a stalled run can be diagnosed from outside the process.
"""

import json
import os
from datetime import datetime
from pathlib import Path
from typing import Dict, Optional

from lib import config

STATUSES = ('starting', 'processing', 'complete', 'error')


class ProgressTracker:

    def __init__(self, operation_id: str, progress_dir: Optional[Path] = None):
        """
        Args:
            operation_id: Run name, e.g. 'synth500_ingest' or 'income_grid_experiment'
            progress_dir: Directory for the progress file (default: config.PROGRESS_DIR)
        """
        self.operation_id = operation_id
        progress_dir = Path(progress_dir) if progress_dir else config.PROGRESS_DIR
        progress_dir.mkdir(parents=True, exist_ok=True)
        self.progress_file = progress_dir / f"{operation_id}_progress.json"
        self.started = datetime.now().isoformat()
        self.stage = ''
        self.counters: Dict[str, int] = {}

    def update(self, status: str, message: str = "", done: int = 0, total: int = 0,
               current_item: str = "", stage: Optional[str] = None,
               counters: Optional[Dict[str, int]] = None):
        """
        Rewrite the progress file.

        Stage and counters persist across updates until replaced.
        """
        if status not in STATUSES:
            raise ValueError(f"unknown progress status {status!r}")
        if stage is not None:
            self.stage = stage
        if counters is not None:
            self.counters = dict(counters)
        percent = min(100, int(100 * done / total)) if total > 0 else 0

        state = {
            "operation_id": self.operation_id,
            "status": status,
            "stage": self.stage,
            "message": message,
            "done": done,
            "total": total,
            "percent": percent,
            "current_item": current_item,
            "counters": self.counters,
            "started": self.started,
            "updated": datetime.now().isoformat(),
        }
        tmp_file = self.progress_file.with_suffix('.json.tmp')
        with open(tmp_file, 'w') as f:
            json.dump(state, f)
        os.replace(tmp_file, self.progress_file)

    def read(self) -> dict:
        with open(self.progress_file) as f:
            return json.load(f)

    def complete(self, message: str = "Complete", counters: Optional[Dict[str, int]] = None):
        self.update("complete", message, 100, 100, counters=counters)

    def error(self, message: str):
        self.update("error", message)

    def cleanup(self):
        if self.progress_file.exists():
            self.progress_file.unlink()
