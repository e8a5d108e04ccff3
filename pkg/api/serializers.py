"""Serialize pandas DataFrames, numpy arrays and values for JSON API responses."""
import pandas as pd
import numpy as np
from typing import Any, Sequence


def serialize_dict(d: dict) -> dict:
    """Serialize a dict for JSON (e.g. summary.json or checkpoint meta)."""
    return {k: _serialize_value(v) for k, v in d.items()}


def _serialize_value(val: Any) -> Any:
    if val is None or (isinstance(val, float) and np.isnan(val)):
        return None
    if isinstance(val, np.integer):
        return int(val)
    if isinstance(val, np.floating):
        return None if np.isnan(val) else float(val)
    if isinstance(val, np.ndarray):
        return [_serialize_value(v) for v in val.tolist()]
    if isinstance(val, (list, tuple)):
        return [_serialize_value(v) for v in val]
    if isinstance(val, dict):
        return {k: _serialize_value(v) for k, v in val.items()}
    return val


def dataframe_to_records(df: pd.DataFrame) -> list[dict]:
    """Convert DataFrame to list of dicts with JSON-serializable values."""
    if df is None or df.empty:
        return []
    records = df.astype(object).where(df.notna(), None).to_dict(orient="records")
    return [{k: _serialize_value(v) for k, v in r.items()} for r in records]


def keypoints_to_records(keypoints: np.ndarray, names: Sequence[str]) -> list[dict]:
    """K x 2 coordinates as [{name, x, y}] in keypoint order."""
    return [{"name": name, "x": float(x), "y": float(y)} for name, (x, y) in zip(names, np.asarray(keypoints))]
