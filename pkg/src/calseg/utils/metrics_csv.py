"""
Per-epoch metrics tables written with pandas
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

FLOAT_FORMAT = "%.8g"


class MetricsLog:
    """
    Append-only metrics table with a fixed column order.

    Every append rewrites the whole file, so a crash leaves a complete CSV for the
    rows written so far and reruns with the same seed produce identical bytes.
    """

    def __init__(self, path: Path, columns: Sequence[str]) -> None:
        self.path = Path(path)
        self.columns = list(columns)
        self.rows: List[Dict[str, Any]] = []

    def append(self, **row: Any) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown metrics columns: {sorted(unknown)}")
        self.rows.append(row)
        self.flush()

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=self.columns)

    def flush(self) -> None:
        write_csv(self.frame(), self.path)


def write_csv(frame: pd.DataFrame, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def read_csv(path: Path, columns: Optional[Sequence[str]] = None) -> pd.DataFrame:
    frame = pd.read_csv(path)
    if columns is not None:
        missing = [c for c in columns if c not in frame.columns]
        if missing:
            raise KeyError(f"{path}: missing columns {missing}")
    return frame
