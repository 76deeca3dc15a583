"""
Stage timing utilities
"""

import logging
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional


@dataclass
class TimingInfo:
    """One timed stage"""
    name: str
    start_time: float
    end_time: Optional[float] = None
    duration: Optional[float] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def finish(self) -> None:
        if self.end_time is None:
            self.end_time = time.perf_counter()
            self.duration = self.end_time - self.start_time


class StageTimer:
    """
    Wall-clock timings per pipeline stage

    Usage:
        timer = StageTimer()
        with timer.measure("train-source"):
            ...
        timer.log_summary()
    """

    def __init__(self) -> None:
        self.logger = logging.getLogger(__name__)
        self._completed: Dict[str, List[TimingInfo]] = defaultdict(list)

    @contextmanager
    def measure(self, name: str, metadata: Optional[Dict[str, Any]] = None) -> Iterator[TimingInfo]:
        """
        Time the enclosed block under `name`

        Args:
            name: Stage name
            metadata: Optional metadata stored with the timing
        """
        info = TimingInfo(name=name, start_time=time.perf_counter(), metadata=metadata or {})
        self.logger.debug(f"Started timing: {name}")
        try:
            yield info
        finally:
            info.finish()
            self._completed[name].append(info)
            self.logger.debug(f"Stopped timing: {name} ({info.duration:.3f}s)")

    def get_stats(self, name: str) -> Optional[Dict[str, float]]:
        """Count/total/mean/last for one stage, or None if never timed"""
        durations = [t.duration for t in self._completed.get(name, []) if t.duration is not None]
        if not durations:
            return None
        return {
            "count": len(durations),
            "total": sum(durations),
            "mean": sum(durations) / len(durations),
            "last": durations[-1],
        }

    def get_all_stats(self) -> Dict[str, Dict[str, float]]:
        stats = {}
        for name in self._completed:
            s = self.get_stats(name)
            if s is not None:
                stats[name] = s
        return stats

    def log_summary(self) -> None:
        """Log per-stage totals, longest first"""
        stats = self.get_all_stats()
        if not stats:
            return
        self.logger.info("Stage timings:")
        for name, s in sorted(stats.items(), key=lambda kv: kv[1]["total"], reverse=True):
            self.logger.info(f"  {name}: count={int(s['count'])}, total={s['total']:.2f}s")
