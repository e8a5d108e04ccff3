#!/usr/bin/env python
"""
Quick comparison script: one row of test metrics per training run under WIFLOW_RUNS_DIR
(or the directory given as the first argument), best MPJPE first.
"""
import os
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

try:
    from dotenv import load_dotenv
    load_dotenv(ROOT / ".env")
except Exception:
    pass

import pandas as pd

from api.routers.runs import get_run_metrics, list_runs


def collect() -> pd.DataFrame:
    rows = []
    for run_id in list_runs()["runs"]:
        doc = get_run_metrics(run_id, split="test")
        summary = doc["summary"]
        row = {"run": run_id, "best_epoch": summary.get("best_epoch"), "steps": summary.get("steps")}
        if doc["metrics"]:
            last = doc["metrics"][-1]
            row.update({k: last.get(k) for k in ("pck20", "pck50", "mpjpe")})
        rows.append(row)
    frame = pd.DataFrame(rows, columns=["run", "best_epoch", "steps", "pck20", "pck50", "mpjpe"])
    return frame.sort_values("mpjpe", na_position="last").reset_index(drop=True)


def main():
    if len(sys.argv) > 1:
        os.environ["WIFLOW_RUNS_DIR"] = sys.argv[1]
    frame = collect()
    if frame.empty:
        print("No runs found")
        return
    print(frame.to_string(index=False))


if __name__ == "__main__":
    main()
