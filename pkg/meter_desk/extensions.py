import json
import logging
import os
from collections import Counter

logger = logging.getLogger(__name__)


class TrainingMonitor:
    """Logs a periodic PROGRESS line for a training or finetuning loop."""

    def __init__(self, stats: Counter, total_steps: int, interval: int = 100, name: str = "pretrain"):
        self.stats = stats
        self.total_steps = total_steps
        self.interval = max(1, interval)
        self.name = name
        self.last_losses = {}

    def run_opened(self):
        logger.info(f"OPENED {self.name}, {self.total_steps} steps, starting progress monitor.")

    def step_done(self, step: int, losses: dict):
        self.stats["steps_done"] = step
        self.last_losses = losses
        if step % self.interval == 0:
            self.log_progress()

    def run_closed(self, reason: str = "finished"):
        logger.info(f"CLOSED {self.name}, reason: {reason}")
        # final line
        self.log_progress()

    def log_progress(self):
        done = self.stats.get("steps_done", 0)
        percent_complete = (done / self.total_steps) * 100 if self.total_steps > 0 else 100.0
        losses = " | ".join(f"{name}: {value:.4f}" for name, value in self.last_losses.items())
        counters = " | ".join(f"{key}: {value}" for key, value in sorted(self.stats.items()) if key != "steps_done")
        logger.info(
            f"PROGRESS: [{percent_complete:.2f}%] "
            f"Step: {done} of {self.total_steps}"
            + (f" | {losses}" if losses else "")
            + (f" | {counters}" if counters else "")
        )


class MetricsWriter:
    """JSON-lines sink; one object per record, flushed on every write."""

    def __init__(self, filepath: str):
        self.filepath = filepath
        self.handle = None
        self.records_written = 0

    def __enter__(self):
        os.makedirs(os.path.dirname(os.path.abspath(self.filepath)), exist_ok=True)
        self.handle = open(self.filepath, "w", encoding="utf-8")
        return self

    def write(self, row: dict):
        self.handle.write(json.dumps(row) + "\n")
        self.handle.flush()
        self.records_written += 1

    def __exit__(self, exc_type, exc, tb):
        if self.handle:
            self.handle.close()
        if exc_type is None:
            logger.info(f"Successfully saved {self.records_written} records to '{self.filepath}'")
        else:
            logger.error(f"Metrics log '{self.filepath}' closed after an error ({self.records_written} records)")
        return False


def read_jsonl(filepath: str) -> list:
    rows = []
    with open(filepath, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                logger.warning(f"Could not decode JSON on line {lineno} of {filepath}")
    return rows
