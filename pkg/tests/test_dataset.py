"""
Tests for portable session directories and window/pose pairing.

Run with: pytest tests/test_dataset.py -v
"""
import json

import numpy as np
import pytest

from core.csi_ingest import IngestConfig
from core.dataset import (
    PoseDataset,
    SessionMeta,
    build_pairs,
    list_sessions,
    load_dataset,
    read_meta,
    read_session,
    write_session,
)
from core.errors import SchemaError, ShapeError
from core.pose_labels import LabelSequence


def _session(tmp_path, rng, frames=5, ticks=100, channels=4, missing=None):
    keypoints = rng.uniform(0.5, 2.0, size=(frames, 15, 2))
    confidence = np.ones((frames, 15))
    if missing:
        frame, joint = missing
        keypoints[frame, joint] = 0.0
    labels = LabelSequence(np.arange(frames), keypoints, confidence, subject_id='S01', session_id='S01_R01')
    meta = SessionMeta('S01', 'S01_R01', 'walking', channels=channels)
    csi = rng.uniform(0.0, 3.0, size=(channels, ticks)).astype(np.float32)
    return write_session(tmp_path / 'S01_R01', csi, labels, meta), csi, labels


def test_session_round_trip(tmp_path, rng):
    directory, csi, labels = _session(tmp_path, rng)
    session = read_session(directory)
    assert np.array_equal(session.csi, csi)
    assert session.meta.n_ticks == 100
    assert session.meta.action == 'walking'
    assert np.allclose(session.labels.keypoints, labels.keypoints, atol=1e-6)
    assert list_sessions(tmp_path) == [directory]


def test_meta_keeps_extra_fields(tmp_path, rng):
    directory, _, _ = _session(tmp_path, rng)
    doc = json.loads((directory / 'meta.json').read_text())
    doc['room'] = 'lab'
    (directory / 'meta.json').write_text(json.dumps(doc))
    assert read_meta(directory).extra == {'room': 'lab'}
    assert read_meta(directory).to_dict()['room'] == 'lab'


def test_session_without_labels_is_rejected_on_read(tmp_path, rng):
    meta = SessionMeta('S02', 'S02_R01', channels=4)
    directory = write_session(tmp_path / 'S02_R01', np.ones((4, 40), np.float32), None, meta)
    assert not (directory / 'labels.csv').exists()
    with pytest.raises(SchemaError):
        read_session(directory)


def test_write_rejects_channel_mismatch(tmp_path):
    with pytest.raises(ShapeError):
        write_session(tmp_path / 'x', np.ones((3, 10)), None, SessionMeta('S01', 'x', channels=4))


def test_truncated_csi_file_is_rejected(tmp_path, rng):
    directory, _, _ = _session(tmp_path, rng)
    raw = (directory / 'csi.f32').read_bytes()
    (directory / 'csi.f32').write_bytes(raw[:-4])
    with pytest.raises(ShapeError):
        read_session(directory)


def test_pairing_uses_last_tick_of_window(tmp_path, rng):
    """600 Hz CSI with 30 fps labels: 20 ticks per frame; frame 4 is unlabeled when only 4 rows exist."""
    directory, csi, labels = _session(tmp_path, rng, frames=4)
    config = IngestConfig(window_T=20, stride=10, channels=4)
    pairs = build_pairs(read_session(directory), config)
    assert list(pairs.start_ticks) == [0, 10, 20, 30, 40, 50, 60]
    expected_frames = [(s + 19) // 20 for s in pairs.start_ticks]
    assert expected_frames == [0, 1, 1, 2, 2, 3, 3]
    assert np.allclose(pairs.poses, labels.keypoints[expected_frames], atol=1e-6)
    raw = csi[:, 30:50]
    assert np.allclose(pairs.windows[3], (raw - raw.mean()) / raw.std(), atol=1e-5)


def test_pairing_rejects_wrong_channel_count(tmp_path, rng):
    directory, _, _ = _session(tmp_path, rng)
    with pytest.raises(ShapeError):
        build_pairs(read_session(directory), IngestConfig(window_T=20, stride=10, channels=8))


def test_clean_flag_interpolates_labels(tmp_path, rng):
    _session(tmp_path, rng, missing=(2, 6))
    config = IngestConfig(window_T=20, stride=20, channels=4)
    raw = load_dataset(tmp_path, config)
    cleaned = load_dataset(tmp_path, config, clean=True)
    assert raw.missing.any()
    assert not cleaned.missing.any()
    assert np.all(cleaned.poses[:, 6] != 0.0)


def test_load_dataset_tags_every_window(synth_dataset, synth_config):
    assert len(synth_dataset) == 6 * 120
    assert synth_dataset.windows.shape[1:] == (80, 5)
    assert synth_dataset.poses.shape[1:] == (15, 2)
    sessions = synth_dataset.sessions()
    assert list(sessions) == ['S01_R01', 'S01_R02', 'S02_R01', 'S02_R02', 'S03_R01', 'S03_R02']
    assert set(sessions.values()) == {'S01', 'S02', 'S03'}
    assert len(synth_dataset.indices_for(['S02_R02'])) == 120


def test_subset_concat_and_hash(synth_dataset):
    first = synth_dataset.subset(np.arange(10))
    second = synth_dataset.subset(np.arange(10, 20))
    joined = PoseDataset.concat([first, PoseDataset.empty(80, 5), second])
    assert len(joined) == 20
    assert joined.content_hash() == synth_dataset.subset(np.arange(20)).content_hash()
    assert joined.content_hash() != first.content_hash()


def test_list_sessions_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        list_sessions(tmp_path / 'nowhere')
