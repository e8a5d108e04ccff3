"""
Runs API: metrics.csv and summary.json of training runs under WIFLOW_RUNS_DIR.
"""
import json
import logging
import os
import re
import time
from pathlib import Path

import pandas as pd
from fastapi import APIRouter, HTTPException

from api.serializers import dataframe_to_records, serialize_dict

logger = logging.getLogger(__name__)

router = APIRouter()

_RUN_ID = re.compile(r"^[A-Za-z0-9._-]+$")


def _runs_root() -> Path:
    return Path(os.environ.get("WIFLOW_RUNS_DIR", "runs"))


def _run_dir(run_id: str) -> Path:
    """Run directory for run_id; ids may not contain path separators."""
    if not _RUN_ID.match(run_id) or run_id in (".", ".."):
        raise HTTPException(status_code=404, detail="Run not found")
    path = _runs_root() / run_id
    if not (path / "metrics.csv").exists():
        raise HTTPException(status_code=404, detail="Run not found")
    return path


@router.get("/runs")
def list_runs():
    root = _runs_root()
    if not root.is_dir():
        return {"runs": []}
    return {"runs": sorted(p.parent.name for p in root.glob("*/metrics.csv"))}


@router.get("/runs/{run_id}/metrics")
def get_run_metrics(run_id: str, split: str | None = None):
    t0 = time.perf_counter()
    path = _run_dir(run_id)
    df = pd.read_csv(path / "metrics.csv")
    if split:
        df = df[df["split"] == split]
    summary = {}
    if (path / "summary.json").exists():
        summary = serialize_dict(json.loads((path / "summary.json").read_text(encoding="utf-8")))
    logger.info("runs/%s/metrics %.3fs", run_id, time.perf_counter() - t0)
    return {"run_id": run_id, "metrics": dataframe_to_records(df), "summary": summary}
