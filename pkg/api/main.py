"""
WiFlow inference service: pose keypoints for single CSI windows, plus read access
to training-run metrics.

Run from project root: uvicorn api.main:app --reload
Environment: WIFLOW_CHECKPOINT (served model), WIFLOW_RUNS_DIR (default runs/),
CORS_ORIGINS (comma-separated), WIFLOW_LOG_LEVEL.
"""
import logging
import os
import sys
import time
from contextlib import asynccontextmanager
from pathlib import Path

_root = Path(__file__).resolve().parent.parent
if str(_root) not in sys.path:
    sys.path.insert(0, str(_root))

from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from api.routers import predict, runs
from core.config import configure_logging, load_environment
from core.errors import WiFlowError

load_environment()

logger = logging.getLogger(__name__)

DEFAULT_ORIGINS = "http://localhost:5173,http://localhost:3000"


def cors_origins() -> list:
    raw = os.environ.get("CORS_ORIGINS", DEFAULT_ORIGINS)
    return [o.strip() for o in raw.split(",") if o.strip()] or ["http://localhost:5173"]


def _error_detail(message: str, code: str = "error") -> dict:
    return {"message": message, "code": code}


@asynccontextmanager
async def lifespan(_app: FastAPI):
    configure_logging()
    logger.info("api start checkpoint=%s runs_dir=%s",
                os.environ.get("WIFLOW_CHECKPOINT", "-"), os.environ.get("WIFLOW_RUNS_DIR", "runs"))
    yield
    predict.reset_model_cache()


app = FastAPI(
    title="WiFlow API",
    description="2D keypoints from WiFi CSI windows; metrics of training runs",
    version="1.0.0",
    lifespan=lifespan,
)


@app.middleware("http")
async def log_request_time(request: Request, call_next):
    t0 = time.perf_counter()
    response = await call_next(request)
    logger.debug("%s %s status=%d %.3fs", request.method, request.url.path,
                 response.status_code, time.perf_counter() - t0)
    return response


@app.exception_handler(HTTPException)
def http_exception_handler(request: Request, exc: HTTPException) -> JSONResponse:
    """Every HTTP error carries a {message, code} detail."""
    detail = exc.detail
    if not (isinstance(detail, dict) and "message" in detail):
        detail = _error_detail(str(detail) if detail else "Error")
    return JSONResponse(status_code=exc.status_code, content={"detail": detail})


@app.exception_handler(WiFlowError)
def pipeline_exception_handler(request: Request, exc: WiFlowError) -> JSONResponse:
    logger.warning("request rejected code=%s %s", exc.code, exc)
    return JSONResponse(status_code=422, content={"detail": _error_detail(str(exc), exc.code)})


@app.exception_handler(Exception)
def unhandled_exception_handler(request: Request, exc: Exception) -> JSONResponse:
    # exception text stays in the log
    logger.exception("Unhandled exception on %s", request.url.path)
    return JSONResponse(status_code=500, content={"detail": _error_detail("Internal server error", "internal_error")})


_origins = cors_origins()
app.add_middleware(
    CORSMiddleware,
    allow_origins=_origins,
    allow_credentials="*" not in _origins,
    allow_methods=["GET", "POST", "OPTIONS"],
    allow_headers=["*"],
)

app.include_router(predict.router, prefix="/api", tags=["predict"])
app.include_router(runs.router, prefix="/api", tags=["runs"])


@app.get("/health")
def health():
    return {"status": "ok"}
