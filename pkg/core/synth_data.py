"""
Synthetic CSI / pose sessions from a multipath channel model.

Poses come from parametric per-action motions over a fixed-length 2-D
skeleton (meters, y up). Each of the 540 channels is a static phasor plus
``n_paths`` dynamic paths whose lengths are affine in a few keypoint
coordinates::

    H(c, t) = H_s(c) + sum_n alpha_n(c) * exp(-2j * pi * d_n(c, t) / wavelength)
    d_n(c, t) = offset_n(c) + coupling_n(c) . pose(t)

The recorded amplitude is |H| plus Gaussian noise, clipped at zero.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.csi_ingest import (
    SUBCARRIERS,
    BfeeRecord,
    CsiFrame,
    LinkLayout,
    align_streams,
    encode_bfee,
)
from core.dataset import SessionMeta, write_session
from core.errors import ConfigError
from core.pose_labels import KEYPOINT_NAMES, LabelSequence

logger = logging.getLogger(__name__)

ACTIONS = ('walking', 'raising_hands', 'squatting', 'hands_up', 'kicking', 'waving', 'turning', 'jumping')

# Fraction of a motion cycle spent raising (then holding, then lowering).
RAISE_PHASE = (0.0, 0.4)
HOLD_PHASE = (0.4, 0.6)

# (parent, child, angle key) in forward-kinematics order.
BONES = (
    ('mid_hip', 'neck', 'spine'),
    ('neck', 'nose', 'head'),
    ('neck', 'right_shoulder', 'r_clavicle'),
    ('right_shoulder', 'right_elbow', 'r_upper_arm'),
    ('right_elbow', 'right_wrist', 'r_forearm'),
    ('neck', 'left_shoulder', 'l_clavicle'),
    ('left_shoulder', 'left_elbow', 'l_upper_arm'),
    ('left_elbow', 'left_wrist', 'l_forearm'),
    ('mid_hip', 'right_hip', 'r_pelvis'),
    ('right_hip', 'right_knee', 'r_thigh'),
    ('right_knee', 'right_ankle', 'r_shin'),
    ('mid_hip', 'left_hip', 'l_pelvis'),
    ('left_hip', 'left_knee', 'l_thigh'),
    ('left_knee', 'left_ankle', 'l_shin'),
)

TEMPLATE_SKELETON = {
    'spine': 0.50, 'head': 0.25,
    'r_clavicle': 0.18, 'r_upper_arm': 0.30, 'r_forearm': 0.27,
    'l_clavicle': 0.18, 'l_upper_arm': 0.30, 'l_forearm': 0.27,
    'r_pelvis': 0.10, 'r_thigh': 0.45, 'r_shin': 0.43,
    'l_pelvis': 0.10, 'l_thigh': 0.45, 'l_shin': 0.43,
}

# Absolute bone angles of the rest pose (radians from +x, y up); the subject's
# right side is drawn towards -x.
REST_ANGLES = {
    'spine': np.pi / 2, 'head': np.pi / 2,
    'r_clavicle': np.pi, 'r_upper_arm': -np.pi / 2, 'r_forearm': -np.pi / 2,
    'l_clavicle': 0.0, 'l_upper_arm': -np.pi / 2, 'l_forearm': -np.pi / 2,
    'r_pelvis': np.pi, 'r_thigh': -np.pi / 2, 'r_shin': -np.pi / 2,
    'l_pelvis': 0.0, 'l_thigh': -np.pi / 2, 'l_shin': -np.pi / 2,
}

HIP_HEIGHT = 1.0


@dataclass
class SynthConfig:
    wavelength: float = 0.06
    static_min: float = 1.0
    static_max: float = 2.0
    n_paths: int = 6
    alpha_min: float = 0.1
    alpha_max: float = 0.5
    keypoints_per_path: int = 2
    coupling_scale: float = 0.1
    noise_std: float = 0.01
    ticks: int = 12000
    seed: int = 7
    channels: int = 540
    csi_rate_hz: float = 600.0
    label_fps: float = 30.0
    action_frames: int = 90
    occlusion_rate: float = 0.0
    subjects: int = 5
    sessions_per_subject: int = 2
    captures: bool = False  # also write rx<N>.dat per session

    def validate(self) -> None:
        if self.wavelength <= 0:
            raise ConfigError('synth.wavelength', 'must be positive')
        if self.noise_std < 0:
            raise ConfigError('synth.noise_std', 'must be >= 0')
        if not 0 <= self.static_min <= self.static_max:
            raise ConfigError('synth.static_min', 'need 0 <= static_min <= static_max')
        if not 0 <= self.alpha_min <= self.alpha_max:
            raise ConfigError('synth.alpha_min', 'need 0 <= alpha_min <= alpha_max')
        if self.n_paths < 0:
            raise ConfigError('synth.n_paths', 'must be >= 0')
        if self.n_paths and not 1 <= self.keypoints_per_path <= len(KEYPOINT_NAMES):
            raise ConfigError('synth.keypoints_per_path', 'each dynamic path needs 1..15 driving keypoints')
        if self.ticks < 0 or self.channels < 1 or self.action_frames < 2:
            raise ConfigError('synth.ticks', 'ticks >= 0, channels >= 1 and action_frames >= 2 required')
        if not 0 <= self.occlusion_rate < 1:
            raise ConfigError('synth.occlusion_rate', 'must lie in [0, 1)')
        if self.subjects < 1 or self.sessions_per_subject < 1:
            raise ConfigError('synth.subjects', 'need at least one subject and one session each')
        align_streams(self.csi_rate_hz, self.label_fps)


# ---------------------------------------------------------------------------
# Skeleton and trajectories
# ---------------------------------------------------------------------------

def subject_skeleton(seed: int) -> Dict[str, float]:
    """Template bone lengths scaled by one per-subject factor in [0.9, 1.1]."""
    factor = np.random.default_rng(seed).uniform(0.9, 1.1)
    return {bone: length * factor for bone, length in TEMPLATE_SKELETON.items()}


def pose_from_angles(root: np.ndarray, angles: Dict[str, np.ndarray], skeleton: Dict[str, float]) -> np.ndarray:
    """Forward kinematics: mid-hip positions (F x 2) plus absolute bone angles -> F x 15 x 2."""
    frames = len(root)
    pose = np.zeros((frames, len(KEYPOINT_NAMES), 2))
    pose[:, KEYPOINT_NAMES.index('mid_hip')] = root
    for parent, child, key in BONES:
        theta = np.broadcast_to(angles[key], (frames,))
        step = skeleton[key] * np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        pose[:, KEYPOINT_NAMES.index(child)] = pose[:, KEYPOINT_NAMES.index(parent)] + step
    return pose


def smootherstep(u: np.ndarray) -> np.ndarray:
    """6u^5 - 15u^4 + 10u^3 on [0, 1]; first and second derivatives vanish at both ends."""
    u = np.clip(u, 0.0, 1.0)
    return u * u * u * (u * (6.0 * u - 15.0) + 10.0)


def raise_envelope(phase: np.ndarray) -> np.ndarray:
    """0 -> 1 over the raise phase, 1 while holding, back to 0 by the end of the cycle."""
    up = smootherstep((phase - RAISE_PHASE[0]) / (RAISE_PHASE[1] - RAISE_PHASE[0]))
    down = smootherstep((phase - HOLD_PHASE[1]) / (1.0 - HOLD_PHASE[1]))
    return up - down


def gen_trajectory(action: str, duration: int, seed: int = 0, skeleton: Optional[Dict[str, float]] = None,
                   cycle_frames: int = 90) -> np.ndarray:
    """``duration`` label frames of a cartoon motion as a F x 15 x 2 array (meters, y up)."""
    if action not in ACTIONS:
        raise ConfigError('synth.action', f'unknown action {action!r}; choose from {", ".join(ACTIONS)}')
    skeleton = skeleton or dict(TEMPLATE_SKELETON)
    if duration <= 0:
        return np.zeros((0, len(KEYPOINT_NAMES), 2))
    rng = np.random.default_rng(seed)
    gain = rng.uniform(0.8, 1.2)
    cycle = cycle_frames * rng.uniform(0.9, 1.1)
    shift = rng.uniform(0.0, 1.0)
    x0 = rng.uniform(-0.3, 0.3)

    frames = np.arange(duration, dtype=np.float64)
    phase = np.mod(frames / cycle, 1.0)
    wave = np.sin(2.0 * np.pi * (frames / cycle + shift))
    angles = {k: np.full(duration, v) for k, v in REST_ANGLES.items()}
    root = np.stack([np.full(duration, x0), np.full(duration, HIP_HEIGHT)], axis=-1)
    env = raise_envelope(phase)

    if action == 'walking':
        root[:, 0] += 0.6 * gain * np.sin(2.0 * np.pi * (frames / (4 * cycle) + shift))
        swing = 0.35 * gain * wave
        angles['r_thigh'] += swing
        angles['l_thigh'] -= swing
        angles['r_shin'] += 0.6 * swing
        angles['l_shin'] -= 0.6 * swing
        angles['r_upper_arm'] -= 0.8 * swing
        angles['l_upper_arm'] += 0.8 * swing
        angles['r_forearm'] -= 0.8 * swing
        angles['l_forearm'] += 0.8 * swing
    elif action == 'raising_hands':
        # Right arm sweeps down -> side -> up through -pi, the left one mirrored.
        angles['r_upper_arm'] = angles['r_forearm'] = -np.pi / 2 - np.pi * env
        angles['l_upper_arm'] = angles['l_forearm'] = -np.pi / 2 + np.pi * env
    elif action == 'hands_up':
        angles['r_upper_arm'] = -np.pi / 2 - (np.pi / 2) * env
        angles['l_upper_arm'] = -np.pi / 2 + (np.pi / 2) * env
        angles['r_forearm'] = -np.pi / 2 - (3 * np.pi / 2) * env
        angles['l_forearm'] = -np.pi / 2 + (3 * np.pi / 2) * env
    elif action == 'squatting':
        depth = 0.3 * gain * env
        root[:, 1] -= depth
        angles['r_thigh'] -= 0.9 * env
        angles['l_thigh'] += 0.9 * env
        angles['r_shin'] += 0.5 * env
        angles['l_shin'] -= 0.5 * env
        angles['r_upper_arm'] -= 0.6 * env
        angles['l_upper_arm'] += 0.6 * env
    elif action == 'kicking':
        angles['r_thigh'] -= 1.0 * gain * env
        angles['r_shin'] -= 1.3 * gain * env
        angles['l_upper_arm'] += 0.4 * env
        angles['r_upper_arm'] -= 0.4 * env
    elif action == 'waving':
        angles['r_upper_arm'] = -np.pi / 2 - 0.75 * np.pi * env
        angles['r_forearm'] = angles['r_upper_arm'] - 0.5 * gain * env * np.sin(6.0 * np.pi * phase)
    elif action == 'turning':
        twist = 0.6 * gain * wave
        angles['r_clavicle'] += twist
        angles['l_clavicle'] += twist
        angles['r_pelvis'] -= 0.5 * twist
        angles['l_pelvis'] -= 0.5 * twist
        angles['head'] += 0.2 * twist
    elif action == 'jumping':
        bump = np.sin(np.pi * phase) ** 2
        root[:, 1] += 0.3 * gain * bump
        angles['r_thigh'] -= 0.4 * bump
        angles['l_thigh'] += 0.4 * bump
        angles['r_shin'] += 0.3 * bump
        angles['l_shin'] -= 0.3 * bump
        angles['r_upper_arm'] -= 0.8 * bump
        angles['l_upper_arm'] += 0.8 * bump
    return pose_from_angles(root, angles, skeleton)


# ---------------------------------------------------------------------------
# Channel model
# ---------------------------------------------------------------------------

@dataclass
class ChannelModel:
    static: np.ndarray
    alphas: np.ndarray
    offsets: np.ndarray
    coupling: np.ndarray
    wavelength: float

    @property
    def channels(self) -> int:
        return len(self.static)


def build_channel_model(config: SynthConfig, seed: Optional[int] = None) -> ChannelModel:
    """Random static phasors, path gains, offsets and sparse joint couplings.

    Driving keypoints are dealt round-robin over (channel, path) first, so
    every keypoint drives at least one path once channels * n_paths >= 15.
    """
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    c, p = config.channels, config.n_paths
    static = rng.uniform(config.static_min, config.static_max, c) * np.exp(2j * np.pi * rng.uniform(0, 1, c))
    alphas = rng.uniform(config.alpha_min, config.alpha_max, (c, p))
    offsets = rng.uniform(0.0, config.wavelength, (c, p))
    coupling = np.zeros((c, p, len(KEYPOINT_NAMES), 2))
    k = len(KEYPOINT_NAMES)
    for q in range(c * p):
        ch, path = divmod(q, p)
        extra = rng.choice(k, size=config.keypoints_per_path - 1, replace=False)
        joints = sorted({q % k, *extra.tolist()})
        for joint in joints:
            coupling[ch, path, joint] = rng.uniform(-config.coupling_scale, config.coupling_scale, 2)
    return ChannelModel(static, alphas, offsets, coupling.reshape(c, p, -1), config.wavelength)


def multipath_amplitude(static: np.ndarray, alphas: np.ndarray, lengths: np.ndarray, wavelength: float) -> np.ndarray:
    """|H_s + sum_n alpha_n exp(-2j pi d_n / wavelength)| with paths on the last axis."""
    phasors = np.asarray(alphas) * np.exp(-2j * np.pi * np.asarray(lengths) / wavelength)
    return np.abs(np.asarray(static) + phasors.sum(axis=-1))


def amplitude_for_poses(model: ChannelModel, poses: np.ndarray) -> np.ndarray:
    """Noise-free amplitudes, F x 15 x 2 poses -> channels x F."""
    flat = poses.reshape(len(poses), -1)
    lengths = model.offsets[:, :, None] + np.einsum('cpk,fk->cpf', model.coupling, flat)
    phasors = model.alphas[:, :, None] * np.exp(-2j * np.pi * lengths / model.wavelength)
    return np.abs(model.static[:, None] + phasors.sum(axis=1))


def poses_at_ticks(poses: np.ndarray, packets: int) -> np.ndarray:
    """Linear interpolation of F label frames onto F * packets ticks.

    Tick i sits at frame time (i + 1) / packets - 1, so the last tick of each
    packet group coincides with its label frame.
    """
    frames = len(poses)
    t = (np.arange(frames * packets) + 1) / packets - 1.0
    grid = np.arange(frames, dtype=np.float64)
    flat = poses.reshape(frames, -1)
    out = np.empty((len(t), flat.shape[1]))
    for j in range(flat.shape[1]):
        out[:, j] = np.interp(t, grid, flat[:, j])
    return out.reshape(len(t), *poses.shape[1:])


def gen_csi_from_pose(poses: np.ndarray, config: SynthConfig, model: Optional[ChannelModel] = None,
                      rng: Optional[np.random.Generator] = None, chunk: int = 600) -> np.ndarray:
    """channels x (F * packets) float32 amplitudes for F label-frame poses."""
    model = model or build_channel_model(config)
    packets = align_streams(config.csi_rate_hz, config.label_fps)
    rng = rng or np.random.default_rng(config.seed)
    if len(poses) == 0:
        return np.zeros((model.channels, 0), dtype=np.float32)
    ticks = poses_at_ticks(np.asarray(poses, dtype=np.float64), packets)
    out = np.empty((model.channels, len(ticks)), dtype=np.float32)
    for start in range(0, len(ticks), chunk):
        block = amplitude_for_poses(model, ticks[start:start + chunk])
        if config.noise_std:
            block = block + rng.normal(0.0, config.noise_std, block.shape)
        out[:, start:start + chunk] = np.maximum(block, 0.0)
    return out


# ---------------------------------------------------------------------------
# Dataset emission
# ---------------------------------------------------------------------------

def occlude(keypoints: np.ndarray, rate: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Zero random (frame, keypoint) entries and their confidence; frame 0 is kept intact."""
    mask = rng.random(keypoints.shape[:2]) < rate
    mask[0] = False
    keypoints = keypoints.copy()
    keypoints[mask] = 0.0
    return keypoints, np.where(mask, 0.0, 1.0)


def session_plan(n_subjects: int, sessions_per_subject: int) -> List[Tuple[str, str, str]]:
    """(subject_id, session_id, action) for every session, actions dealt in order."""
    plan = []
    for s in range(n_subjects):
        for r in range(sessions_per_subject):
            action = ACTIONS[(s * sessions_per_subject + r) % len(ACTIONS)]
            plan.append((f'S{s + 1:02d}', f'S{s + 1:02d}_R{r + 1:02d}', action))
    return plan


def make_dataset(n_subjects: int, sessions_per_subject: int, config: Optional[SynthConfig] = None,
                 out_dir='data') -> List[Path]:
    """Write a portable dataset; identical arguments give byte-identical files."""
    config = config or SynthConfig()
    config.validate()
    out_dir = Path(out_dir)
    plan = session_plan(n_subjects, sessions_per_subject)
    for _, session_id, _ in plan:
        if (out_dir / session_id).exists():
            raise FileExistsError(f'session directory already exists: {out_dir / session_id}')

    packets = align_streams(config.csi_rate_hz, config.label_fps)
    frames = config.ticks // packets
    model = build_channel_model(config)
    seeds = np.random.SeedSequence(config.seed).spawn(len(plan) + n_subjects)
    subject_seeds = {f'S{s + 1:02d}': int(seeds[len(plan) + s].generate_state(1)[0]) for s in range(n_subjects)}
    written = []
    for index, (subject_id, session_id, action) in enumerate(plan):
        rng = np.random.default_rng(seeds[index])
        skeleton = subject_skeleton(subject_seeds[subject_id])
        poses = gen_trajectory(action, frames, int(rng.integers(2 ** 31)), skeleton, config.action_frames)
        csi = gen_csi_from_pose(poses, config, model, rng)
        keypoints, confidence = poses, np.ones(poses.shape[:2])
        if config.occlusion_rate:
            keypoints, confidence = occlude(poses, config.occlusion_rate, rng)
        labels = LabelSequence(np.arange(frames), keypoints, confidence, subject_id=subject_id, session_id=session_id)
        meta = SessionMeta(subject_id, session_id, action, config.csi_rate_hz, config.label_fps, config.channels,
                           extra={'source': 'synthetic', 'seed': config.seed, 'units': 'm'})
        written.append(write_session(out_dir / session_id, csi, labels, meta))
        logger.info('synth session=%s action=%s frames=%d ticks=%d', session_id, action, frames, csi.shape[1])
    return written


def to_capture_records(csi: np.ndarray, layout: LinkLayout, gain: float = 20.0,
                       n_tx: int = 3, n_rx: int = 3) -> Dict[int, List[BfeeRecord]]:
    """Quantize amplitudes into per-receiver bfee records (real part only, clipped to int8)."""
    records: Dict[int, List[BfeeRecord]] = {r: [] for r in layout.receivers}
    values = np.clip(np.rint(np.asarray(csi) * gain), 0, 127)
    for tick in range(values.shape[1]):
        matrices = {r: np.zeros((SUBCARRIERS, n_rx, n_tx), dtype=np.complex128) for r in layout.receivers}
        for block, (receiver, tx, rx) in enumerate(layout.links):
            matrices[receiver][:, rx, tx] = values[block * SUBCARRIERS:(block + 1) * SUBCARRIERS, tick]
        for receiver, matrix in matrices.items():
            frame = CsiFrame(matrix, timestamp=tick, receiver_id=receiver)
            records[receiver].append(encode_bfee(frame, bfee_count=tick))
    return records
