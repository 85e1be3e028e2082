"""
Checkpoint file:

    b"NLVCCKPT" | header length u64 | JSON header | little-endian float64 blob

The header lists every tensor (name, shape, offset in values) plus the model config
and its hash, so a model can be rebuilt from the file alone.
"""
import hashlib
import json
import struct
from dataclasses import asdict
from typing import Optional, Tuple

import numpy as np
import torch

from src.architectures.conditional_codec import ConditionalVideoCodec
from src.experiment_planning.experiment_config import ModelConfig, config_hash
from src.utilities.exceptions import ConfigError, ResultsIOError
from src.utilities.tensor_ops import DTYPE

CHECKPOINT_MAGIC = b'NLVCCKPT'
CHECKPOINT_VERSION = 1
_LENGTH = struct.Struct('<Q')


def checkpoint_bytes(model: ConditionalVideoCodec, extra: Optional[dict] = None) -> bytes:
    model_config = asdict(model.config)
    tensors, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        values = tensor.detach().to(DTYPE).reshape(-1).numpy().astype('<f8')
        tensors.append({'name': name, 'shape': list(tensor.shape), 'offset': offset})
        blobs.append(values.tobytes())
        offset += values.size
    header = {
        'format_version': CHECKPOINT_VERSION,
        'model_config': model_config,
        'config_hash': config_hash(model_config),
        'tensors': tensors,
        'extra': extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':'), default=list).encode('utf-8')
    return CHECKPOINT_MAGIC + _LENGTH.pack(len(header_bytes)) + header_bytes + b''.join(blobs)


def save_checkpoint(model: ConditionalVideoCodec, path: str, extra: Optional[dict] = None) -> str:
    """Write the checkpoint and return its sha256."""
    data = checkpoint_bytes(model, extra)
    try:
        with open(path, 'wb') as f:
            f.write(data)
    except OSError as e:
        raise ResultsIOError(path, f"Could not write checkpoint: {e}") from e
    return hashlib.sha256(data).hexdigest()


def read_checkpoint(path: str) -> Tuple[dict, np.ndarray]:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise ResultsIOError(path, f"Could not read checkpoint: {e}") from e
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ResultsIOError(path, "Not a checkpoint file (bad magic)")
    start = len(CHECKPOINT_MAGIC)
    (length,) = _LENGTH.unpack_from(data, start)
    start += _LENGTH.size
    try:
        header = json.loads(data[start:start + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ResultsIOError(path, f"Corrupted checkpoint header: {e}") from e
    blob = data[start + length:]
    if len(blob) % 8:
        raise ResultsIOError(path, "Checkpoint blob is not a whole number of float64 values")
    return header, np.frombuffer(blob, dtype='<f8')


def load_state(model: ConditionalVideoCodec, header: dict, values: np.ndarray):
    """Copy the blob into `model`; names and shapes must match exactly."""
    state = model.state_dict()
    names = [t['name'] for t in header['tensors']]
    if set(names) != set(state):
        missing = sorted(set(state) - set(names))
        unexpected = sorted(set(names) - set(state))
        raise ConfigError(f"Checkpoint does not match the model: missing {missing}, unexpected {unexpected}")
    new_state = {}
    for entry in header['tensors']:
        shape = tuple(entry['shape'])
        if shape != tuple(state[entry['name']].shape):
            raise ConfigError(f"Shape mismatch for {entry['name']}: checkpoint {shape}, "
                              f"model {tuple(state[entry['name']].shape)}")
        count = int(np.prod(shape)) if shape else 1
        chunk = values[entry['offset']:entry['offset'] + count]
        if chunk.size != count:
            raise ConfigError(f"Checkpoint blob truncated at {entry['name']}")
        new_state[entry['name']] = torch.from_numpy(chunk.copy()).view(shape).to(DTYPE)
    model.load_state_dict(new_state)


def load_checkpoint(path: str) -> Tuple[ConditionalVideoCodec, dict]:
    """Rebuild the model from the config stored in the header, then load the weights."""
    header, values = read_checkpoint(path)
    model_config = dict(header['model_config'])
    model_config['channels'] = tuple(model_config['channels'])
    model = ConditionalVideoCodec(ModelConfig(**model_config))
    load_state(model, header, values)
    return model, header

