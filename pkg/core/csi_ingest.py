"""
CSI capture ingestion.

Parses Intel 5300 beamforming-feedback (bfee) capture streams, decodes the
bit-packed CSI payload, keeps amplitudes only, fuses the 18 antenna links of
the two receivers into 540 channels and cuts per-window standardized
540 x 20 network inputs.

Capture stream layout, one record after another::

    u16 BE field_len | u8 code | field_len - 1 bytes of body

A body with code 0xBB is a 20-byte little-endian header followed by the
payload. Inside the payload every subcarrier starts with 3 unused bits,
then one signed 8-bit real and one signed 8-bit imaginary value per
(rx, tx) pair, read least-significant bit first.
"""
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.errors import ConfigError, InvalidRecordError, ShapeError

logger = logging.getLogger(__name__)

SUBCARRIERS = 30
BFEE_CODE = 0xBB
BFEE_HEADER = struct.Struct('<IHxxBBBBBbBBHH')
MAX_ANTENNAS = 3
DEFAULT_RECEIVERS = 2
DEFAULT_ANTENNA_SEL = 0b100100
_TRIANGLE = (0, 1, 3)


# ---------------------------------------------------------------------------
# Records and frames
# ---------------------------------------------------------------------------

def payload_length(n_rx: int, n_tx: int) -> int:
    """Bytes needed for 30 subcarriers of n_rx x n_tx complex int8 values."""
    return math.ceil(SUBCARRIERS * (n_rx * n_tx * 16 + 3) / 8)


@dataclass(frozen=True)
class BfeeRecord:
    timestamp_low: int
    bfee_count: int
    n_rx: int
    n_tx: int
    rssi_a: int
    rssi_b: int
    rssi_c: int
    noise: int
    agc: int
    antenna_sel: int
    payload: bytes
    rate: int = 0

    def validate(self) -> None:
        if not (1 <= self.n_rx <= MAX_ANTENNAS and 1 <= self.n_tx <= MAX_ANTENNAS):
            raise InvalidRecordError(f'antenna counts out of range: n_rx={self.n_rx} n_tx={self.n_tx}')
        expected = payload_length(self.n_rx, self.n_tx)
        if len(self.payload) != expected:
            raise InvalidRecordError(
                f'payload is {len(self.payload)} bytes, {self.n_rx}x{self.n_tx} needs {expected}')


@dataclass
class CsiFrame:
    """Decoded CSI of one packet: complex 30 x n_rx x n_tx, integer parts in [-128, 127]."""
    csi: np.ndarray
    timestamp: int = 0
    receiver_id: int = 0
    bfee_count: int = 0

    def __post_init__(self):
        if self.csi.ndim != 3 or self.csi.shape[0] != SUBCARRIERS:
            raise ShapeError(f'CSI must be {SUBCARRIERS} x n_rx x n_tx, got {self.csi.shape}')

    @property
    def n_rx(self) -> int:
        return self.csi.shape[1]

    @property
    def n_tx(self) -> int:
        return self.csi.shape[2]


@dataclass
class ParseResult:
    """Outcome of one stream parse.

    ``slots`` keeps every bfee record position in file order, with ``None``
    where a record was invalid, so streams of different receivers stay
    aligned tick by tick.
    """
    records: List[BfeeRecord] = field(default_factory=list)
    slots: List[Optional[BfeeRecord]] = field(default_factory=list)
    skipped: int = 0
    invalid: int = 0
    truncated: int = 0
    error: Optional[str] = None


def antenna_permutation(antenna_sel: int, n_rx: int) -> Optional[Tuple[int, ...]]:
    """Receive-antenna order from ``antenna_sel`` (2 bits per antenna), None if invalid."""
    perm = tuple((antenna_sel >> (2 * i)) & 0x3 for i in range(n_rx))
    if sum(perm) != _TRIANGLE[n_rx - 1] or sorted(perm) != list(range(n_rx)):
        return None
    return perm


def _value_offsets(n_rx: int, n_tx: int) -> np.ndarray:
    """Bit offset of each real part, shaped 30 x n_rx x n_tx."""
    per_subcarrier = 3 + 16 * n_rx * n_tx
    sub = np.arange(SUBCARRIERS)[:, None, None] * per_subcarrier + 3
    pair = 16 * (np.arange(n_rx)[None, :, None] * n_tx + np.arange(n_tx)[None, None, :])
    return sub + pair


def _read_bfee(body: bytes) -> BfeeRecord:
    if len(body) < BFEE_HEADER.size:
        raise InvalidRecordError(f'bfee body of {len(body)} bytes is shorter than its header')
    (timestamp_low, bfee_count, n_rx, n_tx, rssi_a, rssi_b, rssi_c,
     noise, agc, antenna_sel, declared, rate) = BFEE_HEADER.unpack_from(body)
    if not (1 <= n_rx <= MAX_ANTENNAS and 1 <= n_tx <= MAX_ANTENNAS):
        raise InvalidRecordError(f'antenna counts out of range: n_rx={n_rx} n_tx={n_tx}')
    expected = payload_length(n_rx, n_tx)
    if declared != expected:
        raise InvalidRecordError(f'declared payload {declared} bytes, {n_rx}x{n_tx} needs {expected}')
    payload = body[BFEE_HEADER.size:BFEE_HEADER.size + declared]
    if len(payload) != declared:
        raise InvalidRecordError(f'payload cut short: {len(payload)} of {declared} bytes')
    return BfeeRecord(timestamp_low, bfee_count, n_rx, n_tx, rssi_a, rssi_b, rssi_c,
                      noise, agc, antenna_sel, bytes(payload), rate)


# ---------------------------------------------------------------------------
# Stream parsing / encoding
# ---------------------------------------------------------------------------

def parse_dat_stream(data: bytes) -> ParseResult:
    """Parse a capture byte stream into bfee records, in file order."""
    result = ParseResult()
    total = len(data)
    pos = 0
    while pos < total:
        if total - pos < 3:
            result.truncated += 1
            result.error = f'{total - pos} trailing bytes at offset {pos} do not hold a record header'
            break
        field_len = int.from_bytes(data[pos:pos + 2], 'big')
        code = data[pos + 2]
        if field_len < 1:
            result.error = f'zero field length at offset {pos}'
            break
        end = pos + 2 + field_len
        if end > total:
            result.truncated += 1
            result.error = f'record at offset {pos} declares {field_len} bytes, {total - pos - 2} remain'
            break
        body = data[pos + 3:end]
        start, pos = pos, end
        if code != BFEE_CODE:
            logger.debug('parse skipped_record offset=%d code=0x%02X', start, code)
            result.skipped += 1
            continue
        try:
            record = _read_bfee(body)
        except InvalidRecordError as exc:
            logger.debug('parse invalid_record offset=%d reason=%s', start, exc)
            result.invalid += 1
            result.slots.append(None)
            continue
        result.records.append(record)
        result.slots.append(record)

    if result.truncated or result.invalid or result.skipped:
        logger.warning('parse records=%d skipped=%d invalid=%d truncated=%d',
                       len(result.records), result.skipped, result.invalid, result.truncated)
    if result.error:
        logger.warning('parse stopped early: %s', result.error)
    return result


def encode_record(record: BfeeRecord) -> bytes:
    record.validate()
    body = BFEE_HEADER.pack(
        record.timestamp_low, record.bfee_count, record.n_rx, record.n_tx,
        record.rssi_a, record.rssi_b, record.rssi_c, record.noise, record.agc,
        record.antenna_sel, len(record.payload), record.rate,
    ) + record.payload
    return (len(body) + 1).to_bytes(2, 'big') + bytes([BFEE_CODE]) + body


def encode_dat_stream(records: Sequence[BfeeRecord]) -> bytes:
    return b''.join(encode_record(r) for r in records)


def read_capture(path) -> ParseResult:
    return parse_dat_stream(Path(path).read_bytes())


def write_capture(path, records: Sequence[BfeeRecord]) -> None:
    Path(path).write_bytes(encode_dat_stream(records))


# ---------------------------------------------------------------------------
# Payload codec
# ---------------------------------------------------------------------------

def decode_bfee(record: BfeeRecord, receiver_id: int = 0) -> CsiFrame:
    """Unpack the CSI matrix of one record, applying the receive-antenna permutation."""
    n_rx, n_tx = record.n_rx, record.n_tx
    bits = np.unpackbits(np.frombuffer(record.payload, dtype=np.uint8), bitorder='little')
    offsets = _value_offsets(n_rx, n_tx)
    if offsets.max() + 16 > bits.size:
        raise InvalidRecordError(
            f'bit cursor overruns payload: needs {offsets.max() + 16} bits, has {bits.size}')
    lanes = np.arange(8)
    real = np.packbits(bits[offsets[..., None] + lanes], axis=-1, bitorder='little')[..., 0].view(np.int8)
    imag = np.packbits(bits[offsets[..., None] + 8 + lanes], axis=-1, bitorder='little')[..., 0].view(np.int8)
    raw = real.astype(np.float64) + 1j * imag.astype(np.float64)

    perm = antenna_permutation(record.antenna_sel, n_rx)
    csi = raw
    if perm is not None:
        csi = np.empty_like(raw)
        csi[:, list(perm), :] = raw
    return CsiFrame(csi=csi, timestamp=record.timestamp_low, receiver_id=receiver_id,
                    bfee_count=record.bfee_count)


def encode_bfee(frame: CsiFrame, antenna_sel: int = DEFAULT_ANTENNA_SEL, bfee_count: Optional[int] = None,
                rssi: Tuple[int, int, int] = (40, 40, 40), noise: int = -92, agc: int = 30,
                rate: int = 0) -> BfeeRecord:
    """Pack a frame into a bfee record; inverse of ``decode_bfee``."""
    n_rx, n_tx = frame.n_rx, frame.n_tx
    if not (1 <= n_rx <= MAX_ANTENNAS and 1 <= n_tx <= MAX_ANTENNAS):
        raise InvalidRecordError(f'antenna counts out of range: n_rx={n_rx} n_tx={n_tx}')
    parts = np.stack([frame.csi.real, frame.csi.imag])
    if np.any(parts != np.round(parts)) or parts.min() < -128 or parts.max() > 127:
        raise InvalidRecordError('CSI parts must be integers in [-128, 127]')

    perm = antenna_permutation(antenna_sel, n_rx)
    raw = frame.csi if perm is None else frame.csi[:, list(perm), :]
    offsets = _value_offsets(n_rx, n_tx)
    bits = np.zeros(payload_length(n_rx, n_tx) * 8, dtype=np.uint8)
    lanes = np.arange(8)
    for shift, values in ((0, raw.real), (8, raw.imag)):
        as_bytes = values.astype(np.int8).view(np.uint8)
        bits[offsets[..., None] + shift + lanes] = np.unpackbits(as_bytes[..., None], axis=-1, bitorder='little')
    payload = np.packbits(bits, bitorder='little').tobytes()
    return BfeeRecord(
        timestamp_low=int(frame.timestamp) & 0xFFFFFFFF,
        bfee_count=(frame.bfee_count if bfee_count is None else bfee_count) & 0xFFFF,
        n_rx=n_rx, n_tx=n_tx,
        rssi_a=rssi[0], rssi_b=rssi[1], rssi_c=rssi[2],
        noise=noise, agc=agc, antenna_sel=antenna_sel,
        payload=payload, rate=rate & 0xFFFF,
    )


def amplitude(frame: CsiFrame) -> np.ndarray:
    """Entrywise modulus; phase is discarded."""
    return np.abs(frame.csi)


# ---------------------------------------------------------------------------
# Link fusion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinkLayout:
    """Channel-block order of the (receiver_id, tx_antenna, rx_antenna) links.

    Link ``links[b]`` fills channels ``30*b .. 30*b + 29``.
    """
    links: Tuple[Tuple[int, int, int], ...]

    def __post_init__(self):
        if len(set(self.links)) != len(self.links):
            raise ConfigError('layout', 'link layout lists a link twice')
        for receiver, tx, rx in self.links:
            if receiver < 0 or not (0 <= tx < MAX_ANTENNAS) or not (0 <= rx < MAX_ANTENNAS):
                raise ConfigError('layout', f'link {(receiver, tx, rx)} out of range')

    @classmethod
    def default(cls, receivers: int = DEFAULT_RECEIVERS, n_tx: int = 3, n_rx: int = 3) -> 'LinkLayout':
        """Receiver-major, then transmit antenna, then receive antenna."""
        return cls(tuple((r, t, x) for r in range(receivers) for t in range(n_tx) for x in range(n_rx)))

    @classmethod
    def from_json(cls, path) -> 'LinkLayout':
        doc = json.loads(Path(path).read_text(encoding='utf-8'))
        links = doc['links'] if isinstance(doc, dict) else doc
        return cls(tuple(tuple(int(v) for v in link) for link in links))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({'links': [list(link) for link in self.links]}, indent=2) + '\n',
                              encoding='utf-8')

    @property
    def receivers(self) -> Tuple[int, ...]:
        return tuple(sorted({link[0] for link in self.links}))

    @property
    def channels(self) -> int:
        return SUBCARRIERS * len(self.links)

    def block(self, link: Tuple[int, int, int]) -> int:
        return self.links.index(tuple(link))

    def check_complete(self, expected_links: int = 18) -> None:
        if len(self.links) != expected_links:
            raise ConfigError('layout', f'expected {expected_links} links, layout has {len(self.links)}')


def assemble_links(frames: Mapping[int, CsiFrame], layout: LinkLayout) -> Optional[np.ndarray]:
    """Fuse one tick of per-receiver frames into a channel vector.

    Returns None when any receiver of the layout is absent.
    """
    if any(r not in frames for r in layout.receivers):
        return None
    amplitudes = {r: amplitude(frames[r]) for r in layout.receivers}
    vector = np.empty(layout.channels, dtype=np.float64)
    for block, (receiver, tx, rx) in enumerate(layout.links):
        amp = amplitudes[receiver]
        if rx >= amp.shape[1] or tx >= amp.shape[2]:
            raise ShapeError(f'receiver {receiver} frame is {amp.shape[1]}x{amp.shape[2]}, '
                             f'layout needs rx={rx} tx={tx}')
        vector[SUBCARRIERS * block:SUBCARRIERS * (block + 1)] = amp[:, rx, tx]
    return vector


def assemble_ticks(slots_per_receiver: Mapping[int, Sequence[Optional[BfeeRecord]]],
                   layout: LinkLayout) -> Tuple[np.ndarray, int]:
    """Channel x tick amplitude matrix from aligned receiver streams.

    Tick ``i`` is the ``i``-th bfee slot of every receiver. Ticks with a
    missing or invalid frame on any receiver are dropped and counted.
    """
    length = max((len(s) for s in slots_per_receiver.values()), default=0)
    columns = []
    dropped = 0
    for i in range(length):
        frames = {}
        for receiver, slots in slots_per_receiver.items():
            if i < len(slots) and slots[i] is not None:
                frames[receiver] = decode_bfee(slots[i], receiver_id=receiver)
        vector = assemble_links(frames, layout)
        if vector is None:
            dropped += 1
            continue
        columns.append(vector)
    if dropped:
        logger.warning('assemble dropped_ticks=%d kept=%d', dropped, len(columns))
    matrix = np.stack(columns, axis=1) if columns else np.zeros((layout.channels, 0))
    return matrix.astype(np.float32), dropped


def ingest_captures(paths: Sequence, layout: LinkLayout) -> Tuple[np.ndarray, Dict[str, int]]:
    """Parse one capture file per receiver (receiver id = position) and fuse them."""
    slots = {}
    report = {'skipped': 0, 'invalid': 0, 'truncated': 0}
    for receiver, path in enumerate(paths):
        parsed = read_capture(path)
        slots[receiver] = parsed.slots
        report['skipped'] += parsed.skipped
        report['invalid'] += parsed.invalid
        report['truncated'] += parsed.truncated
    matrix, dropped = assemble_ticks(slots, layout)
    report['dropped_ticks'] = dropped
    report['ticks'] = matrix.shape[1]
    return matrix, report


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------

@dataclass
class IngestConfig:
    window_T: int = 20
    stride: int = 20
    csi_rate_hz: float = 600.0
    label_fps: float = 30.0
    channels: int = 540
    norm_eps: float = 1e-8
    clean_labels: bool = False

    def validate(self) -> None:
        if self.window_T < 1:
            raise ConfigError('data.window_T', 'must be >= 1')
        if self.stride < 1:
            raise ConfigError('data.stride', 'must be >= 1')
        if self.channels < 1:
            raise ConfigError('data.channels', 'must be >= 1')
        if self.norm_eps <= 0:
            raise ConfigError('data.norm_eps', 'must be positive')
        align_streams(self.csi_rate_hz, self.label_fps)


@dataclass
class CsiWindow:
    values: np.ndarray
    start_tick: int = 0
    subject_id: str = ''
    session_id: str = ''
    normalized: bool = False

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError(f'window must be channels x T, got {self.values.shape}')
        if not np.all(np.isfinite(self.values)):
            raise ShapeError('window holds non-finite values')
        if not self.normalized and np.any(self.values < 0):
            raise ShapeError('raw amplitude window holds negative values')


def window_array(ticks: np.ndarray, T: int = 20, stride: int = 20) -> np.ndarray:
    """All windows of a channel x N matrix as an M x channels x T array."""
    if stride < 1:
        raise ConfigError('data.stride', 'must be >= 1')
    channels, n = ticks.shape
    if n < T:
        return np.zeros((0, channels, T), dtype=ticks.dtype)
    views = sliding_window_view(ticks, T, axis=1)[:, ::stride]
    return np.ascontiguousarray(views.transpose(1, 0, 2))


def window_starts(n: int, T: int = 20, stride: int = 20) -> np.ndarray:
    if n < T:
        return np.zeros(0, dtype=np.int64)
    return np.arange((n - T) // stride + 1, dtype=np.int64) * stride


def window(ticks: np.ndarray, T: int = 20, stride: int = 20,
           subject_id: str = '', session_id: str = '') -> List[CsiWindow]:
    """Window j covers ticks [j*stride, j*stride + T)."""
    values = window_array(ticks, T, stride)
    starts = window_starts(ticks.shape[1], T, stride)
    return [CsiWindow(v, int(s), subject_id, session_id) for v, s in zip(values, starts)]


def normalize_array(windows: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per-window standardization over all channel x time entries of each window."""
    values = windows.astype(np.float64)
    axes = tuple(range(values.ndim - 2, values.ndim))
    mean = values.mean(axis=axes, keepdims=True)
    var = values.var(axis=axes, keepdims=True)
    return ((values - mean) / np.sqrt(np.maximum(var, eps))).astype(np.float32)


def normalize(win: CsiWindow, eps: float = 1e-8) -> CsiWindow:
    return CsiWindow(normalize_array(win.values, eps), win.start_tick, win.subject_id,
                     win.session_id, normalized=True)


def align_streams(csi_ticks_hz: float, label_fps: float) -> int:
    """CSI packets per label frame; the ratio must be a positive integer."""
    if csi_ticks_hz <= 0 or label_fps <= 0:
        raise ConfigError('data.csi_rate_hz', f'rates must be positive, got {csi_ticks_hz} / {label_fps}')
    ratio = csi_ticks_hz / label_fps
    packets = int(round(ratio))
    if packets < 1 or abs(ratio - packets) > 1e-9:
        raise ConfigError('data.csi_rate_hz',
                          f'{csi_ticks_hz} Hz is not an integer multiple of {label_fps} fps')
    return packets
