"""
Checkpoint container for a ParameterStore.

Layout (all integers little-endian)::

    b'WFLW'  u32 version  u64 header_len  header (UTF-8 JSON)
    then per tensor, in header order: u64 byte_len  float32 data (row-major)

The header carries the model config echo, the init seed, free-form run
metadata and the tensor index (name, shape, param or buffer).
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from core.config import build_section, section_to_flat
from core.errors import ConfigError, ShapeError
from core.tensor_core import Tensor
from core.wiflow_model import ParameterStore, WiFlowConfig

logger = logging.getLogger(__name__)

MAGIC = b'WFLW'
VERSION = 1
_U32 = struct.Struct('<I')
_U64 = struct.Struct('<Q')


def save_checkpoint(path, store: ParameterStore, meta: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = [(name, tensor.data, 'param') for name, tensor in store.params.items()]
    entries += [(name, array, 'buffer') for name, array in store.buffers.items()]
    header = {
        'config': section_to_flat(store.config, 'model'),
        'seed': int(store.seed),
        'meta': meta or {},
        'tensors': [{'name': name, 'shape': list(array.shape), 'kind': kind} for name, array, kind in entries],
    }
    blob = json.dumps(header, sort_keys=True).encode('utf-8')
    tmp = path.with_suffix(path.suffix + '.tmp')
    with open(tmp, 'wb') as fh:
        fh.write(MAGIC + _U32.pack(VERSION) + _U64.pack(len(blob)) + blob)
        for _, array, _ in entries:
            data = np.ascontiguousarray(array, dtype='<f4').tobytes()
            fh.write(_U64.pack(len(data)) + data)
    tmp.replace(path)
    logger.debug('checkpoint saved path=%s tensors=%d', path, len(entries))
    return path


def _take(buf: memoryview, offset: int, size: int, what: str) -> Tuple[memoryview, int]:
    if offset + size > len(buf):
        raise ShapeError(f'checkpoint truncated while reading {what}')
    return buf[offset:offset + size], offset + size


def load_checkpoint(path) -> Tuple[ParameterStore, Dict[str, Any]]:
    """Rebuild the store (float32) and return it with the header's ``meta``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'checkpoint not found: {path}')
    buf = memoryview(path.read_bytes())
    magic, offset = _take(buf, 0, 4, 'magic')
    if bytes(magic) != MAGIC:
        raise ConfigError('checkpoint', f'{path} is not a checkpoint file')
    raw, offset = _take(buf, offset, 4, 'version')
    version = _U32.unpack(raw)[0]
    if version != VERSION:
        raise ConfigError('checkpoint', f'unsupported checkpoint version {version}')
    raw, offset = _take(buf, offset, 8, 'header length')
    blob, offset = _take(buf, offset, _U64.unpack(raw)[0], 'header')
    header = json.loads(bytes(blob).decode('utf-8'))

    config = build_section(WiFlowConfig, header['config'], 'model')
    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}
    for entry in header['tensors']:
        raw, offset = _take(buf, offset, 8, entry['name'])
        size = _U64.unpack(raw)[0]
        expected = 4 * int(np.prod(entry['shape'], dtype=np.int64))
        if size != expected:
            raise ShapeError(f'checkpoint tensor {entry["name"]}: {size} bytes for shape {entry["shape"]}')
        data, offset = _take(buf, offset, size, entry['name'])
        array = np.frombuffer(data, dtype='<f4').reshape(entry['shape']).astype(np.float32)
        if entry['kind'] == 'buffer':
            buffers[entry['name']] = array
        else:
            params[entry['name']] = Tensor(array, requires_grad=True, dtype=np.float32)
    store = ParameterStore(params, buffers, config, header.get('seed', 0))
    return store, header.get('meta', {})
