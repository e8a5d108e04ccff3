"""
Tests for capture parsing, the bfee payload codec, link fusion and windowing.

Run with: pytest tests/test_csi_ingest.py -v
"""
import itertools
import logging

import numpy as np
import pytest

from core.csi_ingest import (
    BFEE_CODE,
    BFEE_HEADER,
    SUBCARRIERS,
    BfeeRecord,
    CsiFrame,
    LinkLayout,
    align_streams,
    assemble_ticks,
    decode_bfee,
    encode_bfee,
    encode_dat_stream,
    encode_record,
    ingest_captures,
    normalize_array,
    parse_dat_stream,
    payload_length,
    window,
    window_array,
    write_capture,
)
from core.errors import ConfigError, InvalidRecordError, ShapeError
from core.synth_data import to_capture_records


def _record(payload: bytes, n_rx: int = 1, n_tx: int = 1, antenna_sel: int = 0b100100, count: int = 0) -> BfeeRecord:
    return BfeeRecord(timestamp_low=1000 + count, bfee_count=count, n_rx=n_rx, n_tx=n_tx, rssi_a=40, rssi_b=41,
                      rssi_c=42, noise=-92, agc=30, antenna_sel=antenna_sel, payload=payload, rate=0x1c1)


def _antenna_sel(perm):
    return sum(p << (2 * i) for i, p in enumerate(perm))


def _random_frame(rng, n_rx, n_tx):
    real = rng.integers(-128, 128, size=(SUBCARRIERS, n_rx, n_tx))
    imag = rng.integers(-128, 128, size=(SUBCARRIERS, n_rx, n_tx))
    return CsiFrame(real + 1j * imag, timestamp=int(rng.integers(0, 2 ** 32)), bfee_count=int(rng.integers(0, 2 ** 16)))


def test_hand_packed_payload_decodes():
    """1x1 record: 3 skip bits, then int8 real and imag, least-significant bit first."""
    stride = 3 + 16
    packed = 0
    for s in range(SUBCARRIERS):
        real, imag = s - 15, -(s % 7) - 1
        packed |= ((real & 0xFF) | ((imag & 0xFF) << 8)) << (s * stride + 3)
    payload = packed.to_bytes(payload_length(1, 1), 'little')
    frame = decode_bfee(_record(payload))
    expected = np.array([complex(s - 15, -(s % 7) - 1) for s in range(SUBCARRIERS)])
    assert frame.csi.shape == (SUBCARRIERS, 1, 1)
    assert np.array_equal(frame.csi[:, 0, 0], expected)


def test_payload_length_for_full_mimo():
    assert payload_length(3, 3) == 552
    assert payload_length(1, 1) == 72


def test_codec_round_trip_random_records(rng):
    """encode then decode is the identity across antenna counts and receive permutations."""
    configs = []
    for n_rx in (1, 2, 3):
        for perm in itertools.permutations(range(n_rx)):
            for n_tx in (1, 2, 3):
                configs.append((n_rx, n_tx, _antenna_sel(perm)))
    records, frames = [], []
    for i in range(1000):
        n_rx, n_tx, sel = configs[i % len(configs)]
        frame = _random_frame(rng, n_rx, n_tx)
        frames.append(frame)
        records.append(encode_bfee(frame, antenna_sel=sel))
    parsed = parse_dat_stream(encode_dat_stream(records))
    assert parsed.error is None
    assert len(parsed.records) == 1000
    for frame, record in zip(frames, parsed.records):
        decoded = decode_bfee(record)
        assert np.array_equal(decoded.csi, frame.csi)
        assert decoded.bfee_count == frame.bfee_count
        assert decoded.timestamp == frame.timestamp


def test_encode_rejects_out_of_range_parts():
    csi = np.zeros((SUBCARRIERS, 1, 1), dtype=complex)
    csi[0, 0, 0] = 200
    with pytest.raises(InvalidRecordError):
        encode_bfee(CsiFrame(csi))


def test_truncated_stream_keeps_complete_records(rng):
    stream = encode_dat_stream([encode_bfee(_random_frame(rng, 3, 3)) for _ in range(3)])
    parsed = parse_dat_stream(stream[:-10])
    assert len(parsed.records) == 2
    assert parsed.truncated == 1
    assert parsed.error


def test_short_tail_is_truncation(rng):
    stream = encode_dat_stream([encode_bfee(_random_frame(rng, 1, 1))]) + b'\x00'
    parsed = parse_dat_stream(stream)
    assert len(parsed.records) == 1
    assert parsed.truncated == 1


def test_non_bfee_records_are_skipped(rng, caplog):
    caplog.set_level(logging.DEBUG, logger='core.csi_ingest')
    other = (4).to_bytes(2, 'big') + bytes([0xC1, 1, 2, 3])
    bfee = encode_record(encode_bfee(_random_frame(rng, 2, 2)))
    parsed = parse_dat_stream(other + bfee + other)
    assert parsed.skipped == 2
    assert len(parsed.records) == 1
    assert len(parsed.slots) == 1
    offsets = [m for m in caplog.messages if m.startswith('parse skipped_record')]
    assert offsets == ['parse skipped_record offset=0 code=0xC1',
                       f'parse skipped_record offset={len(other) + len(bfee)} code=0xC1']


def test_invalid_record_leaves_gap(rng, caplog):
    caplog.set_level(logging.DEBUG, logger='core.csi_ingest')
    good = encode_record(encode_bfee(_random_frame(rng, 1, 1)))
    body = BFEE_HEADER.pack(0, 1, 1, 1, 40, 40, 40, -92, 30, 0b100100, 10, 0) + bytes(10)
    bad = (len(body) + 1).to_bytes(2, 'big') + bytes([BFEE_CODE]) + body
    parsed = parse_dat_stream(good + bad + good)
    assert parsed.invalid == 1
    assert len(parsed.records) == 2
    assert parsed.slots[1] is None
    assert any(m.startswith(f'parse invalid_record offset={len(good)} ') for m in caplog.messages)


def test_empty_stream():
    parsed = parse_dat_stream(b'')
    assert parsed.records == [] and parsed.error is None


def test_assemble_drops_ticks_with_missing_receiver(rng):
    layout = LinkLayout.default()
    frames = [[encode_bfee(_random_frame(rng, 3, 3)) for _ in range(4)] for _ in range(2)]
    frames[1][2] = None
    matrix, dropped = assemble_ticks({0: frames[0], 1: frames[1]}, layout)
    assert matrix.shape == (540, 3)
    assert dropped == 1
    first = decode_bfee(frames[0][0])
    assert np.allclose(matrix[:SUBCARRIERS, 0], np.abs(first.csi[:, 0, 0]))
    # block 4 is receiver 0, tx 1, rx 1
    assert np.allclose(matrix[4 * SUBCARRIERS:5 * SUBCARRIERS, 0], np.abs(first.csi[:, 1, 1]))


def test_ingest_captures_recovers_quantized_amplitudes(tmp_path, rng):
    layout = LinkLayout.default()
    csi = rng.uniform(0.0, 5.0, size=(540, 12))
    paths = []
    for receiver, records in to_capture_records(csi, layout).items():
        path = tmp_path / f'rx{receiver}.dat'
        write_capture(path, records)
        paths.append(path)
    matrix, report = ingest_captures(paths, layout)
    assert report['ticks'] == 12 and report['dropped_ticks'] == 0
    assert np.allclose(matrix, np.clip(np.rint(csi * 20), 0, 127))


def test_layout_json_round_trip(tmp_path):
    layout = LinkLayout(((1, 0, 0), (0, 2, 1)))
    layout.to_json(tmp_path / 'layout.json')
    loaded = LinkLayout.from_json(tmp_path / 'layout.json')
    assert loaded == layout
    assert loaded.receivers == (0, 1)
    assert loaded.channels == 60


def test_layout_rejects_duplicates():
    with pytest.raises(ConfigError):
        LinkLayout(((0, 0, 0), (0, 0, 0)))
    with pytest.raises(ConfigError):
        LinkLayout.default(receivers=1).check_complete(18)


def test_windows_cover_expected_ticks():
    ticks = np.arange(3 * 50, dtype=np.float32).reshape(3, 50)
    wins = window(ticks, T=20, stride=10)
    assert [w.start_tick for w in wins] == [0, 10, 20, 30]
    assert np.array_equal(wins[2].values, ticks[:, 20:40])
    assert window_array(ticks[:, :19], T=20, stride=20).shape == (0, 3, 20)


def test_raw_window_rejects_negative_amplitude():
    with pytest.raises(ShapeError):
        window(-np.ones((2, 4)), T=4, stride=4)


def test_normalize_is_per_window(rng):
    windows = rng.uniform(1, 10, size=(4, 6, 20))
    out = normalize_array(windows)
    assert out.dtype == np.float32
    assert np.allclose(out.mean(axis=(1, 2)), 0.0, atol=1e-5)
    assert np.allclose(out.std(axis=(1, 2)), 1.0, atol=1e-4)
    flat = normalize_array(np.full((1, 6, 20), 3.0))
    assert np.array_equal(flat, np.zeros((1, 6, 20), dtype=np.float32))


def test_align_streams():
    assert align_streams(600, 30) == 20
    with pytest.raises(ConfigError):
        align_streams(600, 35)
    with pytest.raises(ConfigError):
        align_streams(0, 30)
