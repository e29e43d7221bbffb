"""Run directories and per-step metrics logs.

Metrics go to ``metrics.jsonl`` with one JSON object per step. Wall-clock
timings go to ``timing.jsonl`` so the metrics file of two seed-identical runs
is byte-identical.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any

import yaml

from .constants import (
    CHECKPOINT_DIR_NAME,
    EVAL_DIR_NAME,
    METRICS_LOG_NAME,
    RUN_CONFIG_NAME,
    TIMING_LOG_NAME,
)

logger = logging.getLogger(__name__)


def configure_logging(level: str = "INFO") -> None:
    """Configure the root logger once for CLI use."""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _jsonable(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def dump_jsonl_line(record: dict[str, Any]) -> str:
    return json.dumps(_jsonable(record), sort_keys=True) + "\n"


class RunDirectory:
    """Layout of one run: config snapshot, logs, checkpoints and eval tables."""

    def __init__(self, path: Path):
        self.path = Path(path)

    @property
    def config_path(self) -> Path:
        return self.path / RUN_CONFIG_NAME

    @property
    def metrics_path(self) -> Path:
        return self.path / METRICS_LOG_NAME

    @property
    def timing_path(self) -> Path:
        return self.path / TIMING_LOG_NAME

    @property
    def checkpoint_dir(self) -> Path:
        return self.path / CHECKPOINT_DIR_NAME

    @property
    def eval_dir(self) -> Path:
        return self.path / EVAL_DIR_NAME

    def checkpoint_path(self, kind: str, step: int) -> Path:
        return self.checkpoint_dir / f"{kind}-{step}.pt"

    def latest_checkpoint(self, kind: str) -> Path | None:
        candidates = sorted(
            self.checkpoint_dir.glob(f"{kind}-*.pt"),
            key=lambda p: int(p.stem.rsplit("-", 1)[1]),
        )
        return candidates[-1] if candidates else None

    def create(self, snapshot: dict[str, Any]) -> "RunDirectory":
        """Create the directory tree and write the config snapshot."""
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        with open(self.config_path, "w", encoding="utf-8") as f:
            yaml.safe_dump(snapshot, f, sort_keys=True)
        logger.info(f"Run directory: {self.path}")
        return self


class MetricsLogger:
    """Append-only writer of metrics and timing records.

    Args:
        run_dir: Run directory receiving ``metrics.jsonl`` and ``timing.jsonl``.
        append: Keep existing records (used when resuming).
    """

    def __init__(self, run_dir: RunDirectory | Path, append: bool = False):
        if not isinstance(run_dir, RunDirectory):
            run_dir = RunDirectory(run_dir)
        self.run_dir = run_dir
        run_dir.path.mkdir(parents=True, exist_ok=True)
        mode = "a" if append else "w"
        self._metrics = open(run_dir.metrics_path, mode, encoding="utf-8")
        self._timing = open(run_dir.timing_path, mode, encoding="utf-8")

    def log(
        self,
        step: int,
        record: dict[str, Any],
        elapsed: float | None = None,
        phase: str = "train",
    ) -> None:
        self._metrics.write(dump_jsonl_line({"step": step, "phase": phase, **record}))
        if elapsed is not None:
            self._timing.write(
                dump_jsonl_line({"step": step, "phase": phase, "seconds": elapsed})
            )

    def flush(self) -> None:
        self._metrics.flush()
        self._timing.flush()

    def close(self) -> None:
        self._metrics.close()
        self._timing.close()

    def __enter__(self) -> "MetricsLogger":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]
