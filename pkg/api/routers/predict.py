"""
Prediction API: one CSI window in, 15 keypoints out.
Uses the checkpoint named by WIFLOW_CHECKPOINT, loaded once and frozen.
"""
import logging
import os
import threading
import time
from pathlib import Path

import numpy as np
from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from core.checkpoint import load_checkpoint
from core.csi_ingest import normalize_array
from core.errors import ShapeError
from core.pose_labels import KEYPOINT_NAMES
from core.tensor_core import no_grad
from core.wiflow_model import forward
from api.serializers import keypoints_to_records, serialize_dict

logger = logging.getLogger(__name__)

router = APIRouter()

_lock = threading.Lock()
_cache: dict = {"path": None, "store": None, "meta": None}


def reset_model_cache() -> None:
    with _lock:
        _cache.update(path=None, store=None, meta=None)


def get_model():
    """(frozen store, meta) for WIFLOW_CHECKPOINT; reloaded when the variable changes."""
    path = os.environ.get("WIFLOW_CHECKPOINT", "").strip()
    if not path:
        raise HTTPException(status_code=404, detail="No checkpoint configured (set WIFLOW_CHECKPOINT)")
    if not Path(path).exists():
        raise HTTPException(status_code=404, detail="Checkpoint not found")
    with _lock:
        if _cache["path"] != path:
            store, meta = load_checkpoint(path)
            _cache.update(path=path, store=store.frozen(), meta=meta)
            logger.info("predict loaded checkpoint=%s params=%d", path, store.count())
        return _cache["store"], _cache["meta"]


class PredictBody(BaseModel):
    csi: list[list[float]]
    normalized: bool = False


@router.get("/model")
def model_info():
    store, meta = get_model()
    config = store.config
    return {
        "input_channels": config.input_channels,
        "window_T": config.window_T,
        "keypoints": config.keypoints,
        "params": store.count(),
        "meta": serialize_dict(meta),
    }


@router.post("/predict")
def post_predict(body: PredictBody):
    t0 = time.perf_counter()
    store, _ = get_model()
    window = np.asarray(body.csi, dtype=np.float64)
    expected = (store.config.input_channels, store.config.window_T)
    if window.shape != expected:
        raise ShapeError(f"csi must be {expected[0]} x {expected[1]}, got {window.shape}")
    if not np.all(np.isfinite(window)):
        raise ShapeError("csi holds non-finite values")
    if not body.normalized:
        window = normalize_array(window[None])[0]
    with no_grad():
        keypoints = forward(window, store, "eval").data
    elapsed = time.perf_counter() - t0
    logger.info("predict %.3fs", elapsed)
    return {
        "keypoints": keypoints_to_records(keypoints, KEYPOINT_NAMES[: len(keypoints)]),
        "elapsed_ms": 1000 * elapsed,
    }
