"""
Keypoint labels: labels.csv loading, occlusion repair and skeleton geometry.

labels.csv has one row per video frame::

    frame_index, nose_x, nose_y, nose_conf, neck_x, ... , left_ankle_conf

The ``*_conf`` columns are optional and default to 1.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.errors import ConfigError, MissingKeypointError, SchemaError

logger = logging.getLogger(__name__)

KEYPOINT_NAMES = (
    'nose', 'neck',
    'right_shoulder', 'left_shoulder',
    'right_elbow', 'left_elbow',
    'right_wrist', 'left_wrist',
    'mid_hip',
    'right_hip', 'left_hip',
    'right_knee', 'left_knee',
    'right_ankle', 'left_ankle',
)

SKELETON_EDGES = (
    ('nose', 'neck'),
    ('neck', 'right_shoulder'), ('right_shoulder', 'right_elbow'), ('right_elbow', 'right_wrist'),
    ('neck', 'left_shoulder'), ('left_shoulder', 'left_elbow'), ('left_elbow', 'left_wrist'),
    ('neck', 'mid_hip'),
    ('mid_hip', 'right_hip'), ('right_hip', 'right_knee'), ('right_knee', 'right_ankle'),
    ('mid_hip', 'left_hip'), ('left_hip', 'left_knee'), ('left_knee', 'left_ankle'),
)

SCALE_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SkeletonTopology:
    names: Tuple[str, ...] = KEYPOINT_NAMES
    edges: Tuple[Tuple[int, int], ...] = tuple(
        (KEYPOINT_NAMES.index(a), KEYPOINT_NAMES.index(b)) for a, b in SKELETON_EDGES)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        k = len(self.names)
        if k != 15 or len(set(self.names)) != k:
            raise ConfigError('topology.names', f'need 15 distinct keypoint names, got {k}')
        if len(self.edges) != 14:
            raise ConfigError('topology.edges', f'need 14 edges, got {len(self.edges)}')
        parent = list(range(k))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for a, b in self.edges:
            if not (0 <= a < k and 0 <= b < k) or a == b:
                raise ConfigError('topology.edges', f'edge {(a, b)} out of range')
            ra, rb = find(a), find(b)
            if ra == rb:
                raise ConfigError('topology.edges', f'edge {(a, b)} closes a cycle')
            parent[ra] = rb

    @property
    def num_keypoints(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def right_shoulder(self) -> int:
        return self.index('right_shoulder')

    @property
    def left_hip(self) -> int:
        return self.index('left_hip')

    def incidence(self) -> np.ndarray:
        """E x K matrix with +1 at the first and -1 at the second joint of each edge."""
        matrix = np.zeros((len(self.edges), len(self.names)))
        for e, (a, b) in enumerate(self.edges):
            matrix[e, a] = 1.0
            matrix[e, b] = -1.0
        return matrix

    @classmethod
    def from_json(cls, path) -> 'SkeletonTopology':
        """``{"names": [...15], "edges": [["nose", "neck"], ...]}``; edges by name or index."""
        doc = json.loads(Path(path).read_text(encoding='utf-8'))
        names = tuple(doc.get('names', KEYPOINT_NAMES))
        edges = []
        for a, b in doc['edges']:
            edges.append((names.index(a) if isinstance(a, str) else int(a),
                          names.index(b) if isinstance(b, str) else int(b)))
        return cls(names, tuple(edges))


DEFAULT_TOPOLOGY = SkeletonTopology()


# ---------------------------------------------------------------------------
# Samples and sequences
# ---------------------------------------------------------------------------

@dataclass
class PoseSample:
    keypoints: np.ndarray
    confidence: np.ndarray
    frame_index: int = 0
    subject_id: str = ''
    session_id: str = ''

    def __post_init__(self):
        if self.keypoints.shape != (15, 2):
            raise SchemaError(f'pose needs 15 x 2 keypoints, got {self.keypoints.shape}')
        if not np.all(np.isfinite(self.keypoints)):
            raise SchemaError('pose holds non-finite coordinates')


@dataclass
class LabelSequence:
    """All label frames of one session as stacked arrays."""
    frame_index: np.ndarray
    keypoints: np.ndarray
    confidence: np.ndarray
    missing: np.ndarray = None
    subject_id: str = ''
    session_id: str = ''

    def __post_init__(self):
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 15, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1, 15)
        if len(self.frame_index) > 1 and np.any(np.diff(self.frame_index) <= 0):
            raise SchemaError('frame indices must be strictly increasing')
        if self.missing is None:
            self.missing = detect_missing(self)

    def __len__(self) -> int:
        return len(self.frame_index)

    def __getitem__(self, i: int) -> PoseSample:
        return PoseSample(self.keypoints[i].copy(), self.confidence[i].copy(), int(self.frame_index[i]),
                          self.subject_id, self.session_id)

    def samples(self) -> Iterator[PoseSample]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_samples(cls, samples: Sequence[PoseSample], subject_id: str = '', session_id: str = '') -> 'LabelSequence':
        return cls(
            frame_index=np.array([s.frame_index for s in samples], dtype=np.int64),
            keypoints=np.stack([s.keypoints for s in samples]) if samples else np.zeros((0, 15, 2)),
            confidence=np.stack([s.confidence for s in samples]) if samples else np.zeros((0, 15)),
            subject_id=subject_id, session_id=session_id,
        )


def label_columns(names: Sequence[str] = KEYPOINT_NAMES, with_confidence: bool = True) -> List[str]:
    columns = ['frame_index']
    for name in names:
        columns += [f'{name}_x', f'{name}_y'] + ([f'{name}_conf'] if with_confidence else [])
    return columns


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def load_labels(path, subject_id: str = '', session_id: str = '') -> LabelSequence:
    """Read labels.csv; malformed rows raise SchemaError with their 1-based row number."""
    path = Path(path)
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise SchemaError(f'{path} has no header') from None
    except pd.errors.ParserError as exc:
        raise SchemaError(f'{path}: {exc}') from None

    xy_cols = [c for name in KEYPOINT_NAMES for c in (f'{name}_x', f'{name}_y')]
    conf_cols = [f'{name}_conf' for name in KEYPOINT_NAMES]
    missing_cols = [c for c in ['frame_index'] + xy_cols if c not in df.columns]
    if missing_cols:
        raise SchemaError(f'{path} lacks columns {missing_cols[:3]}{"..." if len(missing_cols) > 3 else ""}')
    has_conf = [c in df.columns for c in conf_cols]
    if any(has_conf) and not all(has_conf):
        raise SchemaError(f'{path} has confidence columns for some keypoints only')

    used = ['frame_index'] + xy_cols + (conf_cols if all(has_conf) else [])
    numeric = df[used].apply(pd.to_numeric, errors='coerce')
    bad = numeric.isna().any(axis=1).to_numpy()
    if bad.any():
        row = int(np.argmax(bad)) + 1
        raise SchemaError('expected frame_index plus 15 keypoints of numeric x, y'
                          + (', confidence' if all(has_conf) else ''), row=row)
    frames = numeric['frame_index'].to_numpy(dtype=np.float64)
    fractional = frames != np.round(frames)
    if fractional.any():
        raise SchemaError('frame_index must be an integer', row=int(np.argmax(fractional)) + 1)
    steps = np.diff(frames)
    if (steps <= 0).any():
        raise SchemaError('frame_index must be strictly increasing', row=int(np.argmax(steps <= 0)) + 2)

    keypoints = numeric[xy_cols].to_numpy(dtype=np.float64).reshape(-1, 15, 2)
    if all(has_conf):
        confidence = numeric[conf_cols].to_numpy(dtype=np.float64)
        outside = ((confidence < 0) | (confidence > 1)).any(axis=1)
        if outside.any():
            raise SchemaError('confidence must lie in [0, 1]', row=int(np.argmax(outside)) + 1)
    else:
        confidence = np.ones((len(df), 15))
    return LabelSequence(frames.astype(np.int64), keypoints, confidence,
                         subject_id=subject_id, session_id=session_id)


def save_labels(path, seq: LabelSequence) -> None:
    data = {'frame_index': seq.frame_index}
    for j, name in enumerate(KEYPOINT_NAMES):
        data[f'{name}_x'] = seq.keypoints[:, j, 0]
        data[f'{name}_y'] = seq.keypoints[:, j, 1]
        data[f'{name}_conf'] = seq.confidence[:, j]
    pd.DataFrame(data, columns=label_columns()).to_csv(path, index=False, float_format='%.6f')


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------

def detect_missing(seq: LabelSequence) -> np.ndarray:
    """Frames x keypoints mask: both coordinates exactly zero, or confidence exactly zero."""
    zero_xy = (seq.keypoints[..., 0] == 0) & (seq.keypoints[..., 1] == 0)
    return zero_xy | (seq.confidence == 0)


def interpolate_missing(seq: LabelSequence) -> LabelSequence:
    """Fill missing keypoints linearly in frame time from the nearest valid frames.

    Gaps before the first or after the last valid frame copy that frame.
    Confidence is interpolated the same way, so repaired entries stay valid.
    """
    mask = detect_missing(seq)
    keypoints = seq.keypoints.copy()
    confidence = seq.confidence.copy()
    t = seq.frame_index.astype(np.float64)
    for j, name in enumerate(KEYPOINT_NAMES):
        gaps = mask[:, j]
        if not gaps.any():
            continue
        valid = ~gaps
        if not valid.any():
            raise MissingKeypointError(name, seq.session_id)
        for c in range(2):
            keypoints[gaps, j, c] = np.interp(t[gaps], t[valid], keypoints[valid, j, c])
        confidence[gaps, j] = np.interp(t[gaps], t[valid], confidence[valid, j])
    filled = int(mask.sum())
    if filled:
        logger.info('labels session=%s interpolated=%d', seq.session_id or '-', filled)
    return LabelSequence(seq.frame_index.copy(), keypoints, confidence,
                         missing=np.zeros_like(mask), subject_id=seq.subject_id, session_id=seq.session_id)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

PoseLike = Union[PoseSample, np.ndarray]


def _coords(pose: PoseLike) -> np.ndarray:
    return np.asarray(pose.keypoints if isinstance(pose, PoseSample) else pose, dtype=np.float64)


def reference_scale(pose: PoseLike, topo: SkeletonTopology = DEFAULT_TOPOLOGY):
    """Right-shoulder to left-hip distance, floored at 1e-6 (per pose for stacked input)."""
    kp = _coords(pose)
    dist = np.linalg.norm(kp[..., topo.right_shoulder, :] - kp[..., topo.left_hip, :], axis=-1)
    scale = np.maximum(dist, SCALE_FLOOR)
    return float(scale) if np.ndim(scale) == 0 else scale


def bone_lengths(pose: PoseLike, topo: SkeletonTopology = DEFAULT_TOPOLOGY) -> np.ndarray:
    """Euclidean length of every edge, in edge order."""
    kp = _coords(pose)
    a = np.array([e[0] for e in topo.edges])
    b = np.array([e[1] for e in topo.edges])
    return np.linalg.norm(kp[..., a, :] - kp[..., b, :], axis=-1)
