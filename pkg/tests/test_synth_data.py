"""
Tests for the synthetic session generator: skeleton motions, the multipath
channel model and byte-identical dataset emission.

Run with: pytest tests/test_synth_data.py -v
"""
import numpy as np
import pytest

from core.dataset import read_session
from core.errors import ConfigError
from core.pose_labels import KEYPOINT_NAMES
from core.synth_data import (
    ACTIONS,
    BONES,
    TEMPLATE_SKELETON,
    SynthConfig,
    amplitude_for_poses,
    build_channel_model,
    gen_csi_from_pose,
    gen_trajectory,
    make_dataset,
    multipath_amplitude,
    occlude,
    poses_at_ticks,
    session_plan,
    subject_skeleton,
)

SMALL = SynthConfig(channels=30, ticks=200, n_paths=3, seed=5)


def _joint(name):
    return KEYPOINT_NAMES.index(name)


@pytest.mark.parametrize("action", ACTIONS)
def test_motions_keep_bone_lengths(action):
    skeleton = subject_skeleton(3)
    poses = gen_trajectory(action, 120, seed=1, skeleton=skeleton)
    assert poses.shape == (120, 15, 2)
    for parent, child, key in BONES:
        lengths = np.linalg.norm(poses[:, _joint(child)] - poses[:, _joint(parent)], axis=-1)
        assert np.allclose(lengths, skeleton[key], atol=1e-9)


def test_raising_hands_lifts_wrists_above_head():
    poses = gen_trajectory('raising_hands', 180, seed=2)
    above = poses[:, _joint('right_wrist'), 1] - poses[:, _joint('nose'), 1]
    assert above.max() > 0.0
    assert above[0] < 0.0


def test_subject_skeleton_scales_uniformly():
    skeleton = subject_skeleton(9)
    ratios = {skeleton[k] / v for k, v in TEMPLATE_SKELETON.items()}
    assert max(ratios) - min(ratios) < 1e-12
    assert 0.9 <= ratios.pop() <= 1.1


def test_unknown_action_and_empty_duration():
    with pytest.raises(ConfigError):
        gen_trajectory('dancing', 10)
    assert gen_trajectory('walking', 0).shape == (0, 15, 2)


def test_static_channel_without_paths():
    static = np.array([1.0 + 1.0j, 2.0])
    out = multipath_amplitude(static, np.zeros((2, 3)), np.ones((2, 3)), 0.06)
    assert np.allclose(out, np.abs(static))


def test_amplitude_follows_pose():
    model = build_channel_model(SMALL)
    poses = gen_trajectory('walking', 40, seed=0)
    amplitude = amplitude_for_poses(model, poses)
    assert amplitude.shape == (30, 40)
    assert np.all(amplitude >= 0.0)
    assert amplitude.std(axis=1).mean() > 1e-3


def test_ticks_end_on_label_frames():
    poses = gen_trajectory('squatting', 6, seed=4)
    ticks = poses_at_ticks(poses, 20)
    assert ticks.shape == (120, 15, 2)
    assert np.allclose(ticks[19::20], poses)


def test_csi_extent_and_type():
    poses = gen_trajectory('kicking', 10, seed=0)
    csi = gen_csi_from_pose(poses, SMALL, rng=np.random.default_rng(0))
    assert csi.shape == (30, 200)
    assert csi.dtype == np.float32
    assert np.all(csi >= 0.0)


def test_occlusion_keeps_first_frame(rng):
    poses = rng.uniform(0.1, 1.0, size=(50, 15, 2))
    keypoints, confidence = occlude(poses, 0.3, rng)
    hidden = confidence == 0.0
    assert hidden.any()
    assert not hidden[0].any()
    assert np.all(keypoints[hidden] == 0.0)
    assert np.array_equal(keypoints[~hidden], poses[~hidden])


def test_session_plan_ids():
    plan = session_plan(2, 2)
    assert [p[1] for p in plan] == ['S01_R01', 'S01_R02', 'S02_R01', 'S02_R02']
    assert [p[2] for p in plan] == list(ACTIONS[:4])


def test_make_dataset_is_byte_identical(tmp_path):
    first = make_dataset(2, 1, SMALL, tmp_path / 'a')
    second = make_dataset(2, 1, SMALL, tmp_path / 'b')
    for a, b in zip(first, second):
        for name in ('csi.f32', 'labels.csv', 'meta.json'):
            assert (a / name).read_bytes() == (b / name).read_bytes()
    session = read_session(first[0])
    assert session.csi.shape == (30, 200)
    assert len(session.labels) == 10
    assert session.meta.extra['source'] == 'synthetic'


def test_make_dataset_refuses_to_overwrite(tmp_path):
    make_dataset(1, 1, SMALL, tmp_path)
    with pytest.raises(FileExistsError):
        make_dataset(1, 1, SMALL, tmp_path)


def test_occluded_dataset_marks_missing(tmp_path):
    config = SynthConfig(channels=30, ticks=600, n_paths=3, seed=5, occlusion_rate=0.2)
    session = read_session(make_dataset(1, 1, config, tmp_path)[0])
    assert session.labels.missing.any()
    assert not session.labels.missing[0].any()


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(occlusion_rate=1.0).validate()
    with pytest.raises(ConfigError):
        SynthConfig(subjects=0).validate()
    with pytest.raises(ConfigError):
        SynthConfig(label_fps=35.0).validate()
