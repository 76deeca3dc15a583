"""
Utils package for calseg

Timing, seeded random streams, ordered thread-pool mapping and metrics CSV helpers.
"""

from .metrics_csv import MetricsLog
from .parallel import map_ordered
from .rng import RngStreams
from .timing import StageTimer

__all__ = ["MetricsLog", "RngStreams", "StageTimer", "map_ordered"]
