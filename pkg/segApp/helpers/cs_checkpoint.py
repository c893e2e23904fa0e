"""
Single-file checkpoint container.

    8 bytes   magic b'CSEGCKPT'
    8 bytes   header length, unsigned little-endian
    N bytes   UTF-8 JSON header: schema_version, config, vocabulary (table + hash),
              tensors [{name, dtype, shape, offset, nbytes}]
    payload   raw little-endian IEEE-754 tensors, in header order
"""

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch
from django.core.exceptions import ValidationError

from segApp.helpers.cs_config import RunConfig
from segApp.helpers.cs_errors import DatasetParseError
from segApp.helpers.cs_types import Vocabulary

logger = logging.getLogger(__name__)

MAGIC = b'CSEGCKPT'
CHECKPOINT_SCHEMA_VERSION = 1
_DTYPES = {
    torch.float32: ('float32', '<f4'),
    torch.float64: ('float64', '<f8'),
}
_NUMPY_DTYPES = {name: code for name, code in _DTYPES.values()}
_TORCH_DTYPES = {name: dtype for dtype, (name, _) in _DTYPES.items()}


@dataclass
class Checkpoint:
    header: dict
    state: Dict[str, torch.Tensor]

    @property
    def config(self) -> RunConfig:
        return RunConfig.model_validate(self.header['config'])

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary.from_table(self.header['vocabulary']['table'])


def save_checkpoint(path, model: torch.nn.Module, config: RunConfig, vocabulary: Vocabulary,
                    extra: Optional[dict] = None) -> Path:
    """Serialize every parameter of ``model`` plus config and vocabulary."""
    path = Path(path)
    entries, payloads, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        if tensor.dtype not in _DTYPES:
            raise ValidationError(f"Cannot serialize tensor {name} of dtype {tensor.dtype}")
        dtype_name, code = _DTYPES[tensor.dtype]
        raw = np.ascontiguousarray(tensor.detach().cpu().numpy()).astype(code).tobytes()
        entries.append({'name': name, 'dtype': dtype_name, 'shape': list(tensor.shape),
                        'offset': offset, 'nbytes': len(raw)})
        payloads.append(raw)
        offset += len(raw)

    header = {
        'schema_version': CHECKPOINT_SCHEMA_VERSION,
        'config': config.model_dump(mode='json'),
        'vocabulary': {'hash': vocabulary.content_hash(), 'table': vocabulary.to_table()},
        'tensors': entries,
        'extra': extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, 'wb') as fh:
            fh.write(MAGIC)
            fh.write(struct.pack('<Q', len(header_bytes)))
            fh.write(header_bytes)
            for raw in payloads:
                fh.write(raw)
    except OSError as e:
        raise OSError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint with {len(entries)} tensors to {path}")
    return path


def load_checkpoint(path, vocabulary: Optional[Vocabulary] = None) -> Checkpoint:
    """
    Raises:
        DatasetParseError: Missing/truncated file, bad magic or schema version.
        ValidationError: ``vocabulary`` given and its hash differs from the stored one.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DatasetParseError(path, f'cannot read checkpoint ({e})') from e
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise DatasetParseError(path, 'not a checkpoint file (bad magic)')
    (header_len,) = struct.unpack('<Q', blob[8:16])
    try:
        header = json.loads(blob[16:16 + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetParseError(path, f'corrupt checkpoint header ({e})') from e
    if header.get('schema_version') != CHECKPOINT_SCHEMA_VERSION:
        raise DatasetParseError(path, f"unsupported checkpoint schema_version {header.get('schema_version')!r}")
    if vocabulary is not None and vocabulary.content_hash() != header['vocabulary']['hash']:
        raise ValidationError(f"{path}: checkpoint was trained on a different vocabulary")

    base = 16 + header_len
    state = OrderedDict()
    for entry in header['tensors']:
        start = base + entry['offset']
        raw = blob[start:start + entry['nbytes']]
        if len(raw) != entry['nbytes']:
            raise DatasetParseError(path, f"truncated payload for tensor {entry['name']}")
        array = np.frombuffer(raw, dtype=_NUMPY_DTYPES[entry['dtype']]).reshape(entry['shape'])
        state[entry['name']] = torch.from_numpy(array.copy()).to(_TORCH_DTYPES[entry['dtype']])
    return Checkpoint(header=header, state=state)


def restore_model(checkpoint: Checkpoint, model: torch.nn.Module) -> torch.nn.Module:
    model.load_state_dict(checkpoint.state, strict=True)
    return model
