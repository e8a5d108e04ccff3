"""
Portable session directories and window/pose pairing.

One directory per session::

    <root>/<session_id>/csi.f32     row-major channels x N float32, little-endian
    <root>/<session_id>/labels.csv  see core.pose_labels
    <root>/<session_id>/meta.json   subject_id, session_id, action, rates, channels, n_ticks

Window j covers ticks [j*stride, j*stride + T) and is paired with the label
frame holding its last tick, ``(j*stride + T - 1) // packets_per_label``.
Windows whose frame has no label row are discarded.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from core.csi_ingest import IngestConfig, align_streams, normalize_array, window_array, window_starts
from core.errors import SchemaError, ShapeError
from core.pose_labels import LabelSequence, interpolate_missing, load_labels, save_labels

logger = logging.getLogger(__name__)

CSI_FILE = 'csi.f32'
LABELS_FILE = 'labels.csv'
META_FILE = 'meta.json'


@dataclass
class SessionMeta:
    subject_id: str
    session_id: str
    action: str = ''
    csi_rate_hz: float = 600.0
    label_fps: float = 30.0
    channels: int = 540
    n_ticks: int = 0
    extra: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> 'SessionMeta':
        known = {k: doc[k] for k in ('subject_id', 'session_id', 'action', 'csi_rate_hz',
                                     'label_fps', 'channels', 'n_ticks') if k in doc}
        if 'subject_id' not in known or 'session_id' not in known:
            raise SchemaError('meta.json needs subject_id and session_id')
        extra = {k: v for k, v in doc.items() if k not in known}
        return cls(extra=extra, **known)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.update(doc.pop('extra'))
        return doc


@dataclass
class Session:
    meta: SessionMeta
    csi: np.ndarray
    labels: LabelSequence
    path: Optional[Path] = None


# ---------------------------------------------------------------------------
# Session I/O
# ---------------------------------------------------------------------------

def write_session(directory, csi: np.ndarray, labels: Optional[LabelSequence], meta: SessionMeta) -> Path:
    """Write csi.f32, labels.csv and meta.json; ``labels=None`` leaves labels.csv to be added later."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if csi.ndim != 2 or csi.shape[0] != meta.channels:
        raise ShapeError(f'session csi must be {meta.channels} x N, got {csi.shape}')
    meta.n_ticks = int(csi.shape[1])
    np.ascontiguousarray(csi, dtype='<f4').tofile(directory / CSI_FILE)
    if labels is not None:
        save_labels(directory / LABELS_FILE, labels)
    (directory / META_FILE).write_text(json.dumps(meta.to_dict(), indent=2, sort_keys=True) + '\n',
                                       encoding='utf-8')
    return directory


def read_meta(directory) -> SessionMeta:
    path = Path(directory) / META_FILE
    try:
        return SessionMeta.from_dict(json.loads(path.read_text(encoding='utf-8')))
    except json.JSONDecodeError as exc:
        raise SchemaError(f'{path} is not valid JSON ({exc})') from exc


def read_session(directory) -> Session:
    directory = Path(directory)
    meta = read_meta(directory)
    raw = np.fromfile(directory / CSI_FILE, dtype='<f4')
    if raw.size % meta.channels:
        raise ShapeError(f'{directory / CSI_FILE}: {raw.size} floats is not a multiple of {meta.channels} channels')
    csi = raw.reshape(meta.channels, -1).astype(np.float32)
    if meta.n_ticks and csi.shape[1] != meta.n_ticks:
        raise ShapeError(f'{directory}: meta.json says {meta.n_ticks} ticks, csi.f32 holds {csi.shape[1]}')
    if not (directory / LABELS_FILE).exists():
        raise SchemaError(f'{directory} has no {LABELS_FILE}')
    labels = load_labels(directory / LABELS_FILE, meta.subject_id, meta.session_id)
    return Session(meta, csi, labels, directory)


def list_sessions(root) -> List[Path]:
    """Session directories under ``root`` (those holding a meta.json), sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f'dataset directory not found: {root}')
    return sorted(p.parent for p in root.glob(f'*/{META_FILE}'))


# ---------------------------------------------------------------------------
# Pairing
# ---------------------------------------------------------------------------

@dataclass
class PoseDataset:
    """Normalized windows with their aligned poses and per-window tags."""
    windows: np.ndarray
    poses: np.ndarray
    session_ids: np.ndarray
    subject_ids: np.ndarray
    actions: np.ndarray
    start_ticks: np.ndarray
    missing: np.ndarray

    def __len__(self) -> int:
        return len(self.windows)

    @classmethod
    def empty(cls, channels: int = 540, T: int = 20) -> 'PoseDataset':
        return cls(np.zeros((0, channels, T), np.float32), np.zeros((0, 15, 2), np.float32),
                   np.array([], dtype=object), np.array([], dtype=object), np.array([], dtype=object),
                   np.zeros(0, np.int64), np.zeros((0, 15), bool))

    @classmethod
    def concat(cls, parts: Sequence['PoseDataset']) -> 'PoseDataset':
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, name) for p in parts])
                     for name in ('windows', 'poses', 'session_ids', 'subject_ids',
                                  'actions', 'start_ticks', 'missing')))

    def subset(self, index) -> 'PoseDataset':
        index = np.asarray(index)
        return PoseDataset(self.windows[index], self.poses[index], self.session_ids[index],
                           self.subject_ids[index], self.actions[index], self.start_ticks[index],
                           self.missing[index])

    def indices_for(self, session_ids: Sequence[str]) -> np.ndarray:
        return np.flatnonzero(np.isin(self.session_ids, list(session_ids)))

    def sessions(self) -> Dict[str, str]:
        """session_id -> subject_id, in first-seen order."""
        out: Dict[str, str] = {}
        for session, subject in zip(self.session_ids, self.subject_ids):
            out.setdefault(str(session), str(subject))
        return out

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.windows).tobytes())
        digest.update(np.ascontiguousarray(self.poses).tobytes())
        digest.update('\n'.join(map(str, self.session_ids)).encode('utf-8'))
        return digest.hexdigest()[:16]


def build_pairs(session: Session, config: IngestConfig) -> PoseDataset:
    meta = session.meta
    if session.csi.shape[0] != config.channels:
        raise ShapeError(f'session {meta.session_id}: {session.csi.shape[0]} channels, expected {config.channels}')
    packets = align_streams(meta.csi_rate_hz, meta.label_fps)
    starts = window_starts(session.csi.shape[1], config.window_T, config.stride)
    frames = (starts + config.window_T - 1) // packets
    labels = session.labels
    pos = np.searchsorted(labels.frame_index, frames)
    pos_clipped = np.minimum(pos, max(len(labels) - 1, 0))
    found = (pos < len(labels)) & (labels.frame_index[pos_clipped] == frames) if len(labels) else np.zeros(len(frames), bool)
    if not found.all():
        logger.info('pairs session=%s unlabeled_windows=%d', meta.session_id, int((~found).sum()))
    keep = np.flatnonzero(found)
    windows = window_array(session.csi, config.window_T, config.stride)[keep]
    rows = pos[keep]
    n = len(keep)
    return PoseDataset(
        windows=normalize_array(windows, config.norm_eps),
        poses=labels.keypoints[rows].astype(np.float32),
        session_ids=np.array([meta.session_id] * n, dtype=object),
        subject_ids=np.array([meta.subject_id] * n, dtype=object),
        actions=np.array([meta.action] * n, dtype=object),
        start_ticks=starts[keep],
        missing=labels.missing[rows],
    )


def load_dataset(root, config: Optional[IngestConfig] = None, clean: Optional[bool] = None) -> PoseDataset:
    """Pair every session under ``root``; ``clean`` interpolates missing keypoints first."""
    config = config or IngestConfig()
    clean = config.clean_labels if clean is None else clean
    parts = []
    for directory in list_sessions(root):
        session = read_session(directory)
        if clean:
            session.labels = interpolate_missing(session.labels)
        parts.append(build_pairs(session, config))
    dataset = PoseDataset.concat(parts)
    logger.info('dataset root=%s sessions=%d windows=%d missing=%d',
                root, len(parts), len(dataset), int(dataset.missing.sum()))
    return dataset
