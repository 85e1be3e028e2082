"""
Frame ingestion: binary PPM (P6) / PGM (P5) directories and raw planar u8 files
with a JSON sidecar. Frames are normalized to [0, 1] and edge-padded to multiples
of 4; the original size is kept for cropping before metrics.
"""
import os
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from batchgenerators.utilities.file_and_folder_operations import isdir, isfile, join, load_json, save_json, subfiles

from src.utilities.exceptions import DimensionError, InputError
from src.utilities.tensor_ops import DTYPE

PAD_MULTIPLE = 4
_TOKEN = re.compile(rb'(#[^\n]*\n)|(\S+)')


@dataclass
class Sequence:
    """
    frames: (T, 3, H, W) in [0, 1], padded extents
    flows:  (T, 2, H, W) ground-truth motion, flows[t] maps frame t-1 onto frame t; None for files
    """
    frames: torch.Tensor
    original_size: Tuple[int, int]
    fps: float = 30.0
    flows: Optional[torch.Tensor] = None
    annotations: Dict[str, object] = field(default_factory=dict)
    name: str = 'sequence'

    def __len__(self):
        return self.frames.shape[0]

    @property
    def padded_size(self) -> Tuple[int, int]:
        return tuple(self.frames.shape[-2:])

    def frame(self, t: int) -> torch.Tensor:
        return self.frames[t:t + 1]

    def flow(self, t: int) -> torch.Tensor:
        if self.flows is None:
            return torch.zeros((1, 2) + self.padded_size, dtype=DTYPE)
        return self.flows[t:t + 1]

    def crop(self, x: torch.Tensor) -> torch.Tensor:
        h, w = self.original_size
        return x[..., :h, :w]

    def subsequence(self, start: int, count: int) -> 'Sequence':
        if start < 0 or start + count > len(self):
            raise InputError(f"Frames [{start}, {start + count}) outside a {len(self)}-frame sequence")
        flows = None if self.flows is None else self.flows[start:start + count]
        return Sequence(self.frames[start:start + count], self.original_size, self.fps, flows,
                        dict(self.annotations), self.name)


def pad_to_multiple(x: torch.Tensor, multiple: int = PAD_MULTIPLE) -> torch.Tensor:
    """Replicate the last row/column until both extents divide `multiple`. x: (..., C, H, W)"""
    h, w = x.shape[-2:]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return x
    if x.dim() != 4:
        raise DimensionError(f"Padding expects a 4-D tensor, got {tuple(x.shape)}")
    return F.pad(x, (0, pad_w, 0, pad_h), mode='replicate')


def make_sequence(frames: torch.Tensor, fps: float = 30.0, flows: Optional[torch.Tensor] = None,
                  annotations: Optional[dict] = None, name: str = 'sequence') -> Sequence:
    original_size = tuple(frames.shape[-2:])
    frames = pad_to_multiple(frames.to(DTYPE))
    if flows is not None:
        flows = pad_to_multiple(flows.to(DTYPE))
    return Sequence(frames, original_size, fps, flows, annotations or {}, name)


def _parse_pnm_header(data: bytes) -> Tuple[bytes, int, int, int, int]:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        match = _TOKEN.search(data, pos)
        if match is None:
            raise InputError("Truncated PNM header")
        pos = match.end()
        if match.group(2) is not None:
            tokens.append(match.group(2))
    magic = tokens[0]
    if magic not in (b'P5', b'P6'):
        raise InputError(f"Unsupported PNM magic {magic!r}; only binary P5/P6 are read")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as e:
        raise InputError(f"Malformed PNM header: {e}") from e
    if maxval != 255:
        raise InputError(f"Only 8-bit PNM files are supported, got maxval {maxval}")
    # exactly one whitespace byte separates the header from the raster
    return magic, width, height, maxval, pos + 1


def read_pnm(path: str) -> np.ndarray:
    """Binary PPM/PGM -> (3, H, W) uint8; grayscale is replicated to three channels."""
    with open(path, 'rb') as f:
        data = f.read()
    magic, width, height, _, offset = _parse_pnm_header(data)
    channels = 3 if magic == b'P6' else 1
    expected = width * height * channels
    raster = np.frombuffer(data, dtype=np.uint8, count=-1, offset=offset)
    if raster.size < expected:
        raise InputError(f"Truncated raster in {path}: {raster.size} of {expected} bytes")
    image = raster[:expected].reshape(height, width, channels).transpose(2, 0, 1)
    if channels == 1:
        image = np.repeat(image, 3, axis=0)
    return np.ascontiguousarray(image)


def write_pnm(path: str, image: np.ndarray):
    """(3, H, W) or (1, H, W) uint8 -> P6 / P5."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[0] not in (1, 3):
        raise DimensionError(f"Expected (1|3, H, W) uint8 image, got {image.shape} {image.dtype}")
    magic = b'P6' if image.shape[0] == 3 else b'P5'
    height, width = image.shape[1:]
    with open(path, 'wb') as f:
        f.write(magic + b'\n%d %d\n255\n' % (width, height))
        f.write(np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())


def to_uint8(frame: torch.Tensor) -> np.ndarray:
    return np.round(frame.detach().clamp(0, 1).numpy() * 255).astype(np.uint8)


def from_uint8(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(image, dtype=np.float64) / 255.0)


def write_frames(folder: str, sequence: Sequence, crop: bool = True):
    os.makedirs(folder, exist_ok=True)
    for t in range(len(sequence)):
        frame = sequence.frames[t]
        if crop:
            frame = sequence.crop(frame)
        write_pnm(join(folder, f'frame_{t:04d}.ppm'), to_uint8(frame))


def _load_pnm_directory(folder: str) -> List[np.ndarray]:
    files = [f for f in subfiles(folder, join=True, sort=True) if f.lower().endswith(('.ppm', '.pgm'))]
    if not files:
        raise InputError(f"No PPM/PGM frames found in {folder}")
    images = [read_pnm(f) for f in files]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise InputError(f"Inconsistent frame sizes in {folder}: {sorted(shapes)}")
    return images


def _sidecar_path(path: str) -> str:
    return os.path.splitext(path)[0] + '.json'


def _load_raw(path: str) -> Tuple[List[np.ndarray], dict]:
    sidecar_file = _sidecar_path(path)
    if not isfile(sidecar_file):
        raise InputError(f"Raw file {path} has no sidecar {sidecar_file}")
    sidecar = load_json(sidecar_file)
    missing = {'height', 'width', 'channels', 'count'} - set(sidecar)
    if missing:
        raise InputError(f"Sidecar {sidecar_file} lacks keys {sorted(missing)}")
    height, width = int(sidecar['height']), int(sidecar['width'])
    channels, count = int(sidecar['channels']), int(sidecar['count'])
    if channels not in (1, 3):
        raise InputError(f"Raw files carry 1 or 3 planes, got {channels}")
    data = np.fromfile(path, dtype=np.uint8)
    frame_size = height * width * channels
    if data.size != frame_size * count:
        raise InputError(f"Raw file {path} holds {data.size} bytes, header announces {frame_size * count}")
    frames = data.reshape(count, channels, height, width)
    if channels == 1:
        frames = np.repeat(frames, 3, axis=1)
    return list(frames), sidecar


def load_sequence(path: str) -> Sequence:
    """Directory of PPM/PGM frames, or a raw planar u8 file next to a JSON sidecar."""
    fps = 30.0
    if isdir(path):
        images = _load_pnm_directory(path)
    elif isfile(path):
        images, sidecar = _load_raw(path)
        fps = float(sidecar.get('fps', fps))
    else:
        raise InputError(f"Sequence path not found: {path}")
    frames = torch.stack([from_uint8(im) for im in images])
    return make_sequence(frames, fps=fps, name=os.path.basename(os.path.normpath(path)))


def save_raw(path: str, sequence: Sequence, crop: bool = True):
    frames = sequence.crop(sequence.frames) if crop else sequence.frames
    data = np.stack([to_uint8(f) for f in frames])
    data.tofile(path)
    save_json({'height': int(data.shape[2]), 'width': int(data.shape[3]), 'channels': 3,
               'count': int(data.shape[0]), 'fps': sequence.fps}, _sidecar_path(path))


# BT.601 full-range constants
KR, KG, KB = 0.299, 0.587, 0.114


def rgb_to_ycbcr(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x.unbind(dim=-3)
    y = KR * r + KG * g + KB * b
    cb = 0.5 + (b - y) / (2 * (1 - KB))
    cr = 0.5 + (r - y) / (2 * (1 - KR))
    return torch.stack([y, cb, cr], dim=-3)


def ycbcr_to_rgb(x: torch.Tensor) -> torch.Tensor:
    y, cb, cr = x.unbind(dim=-3)
    r = y + 2 * (1 - KR) * (cr - 0.5)
    b = y + 2 * (1 - KB) * (cb - 0.5)
    g = (y - KR * r - KB * b) / KG
    return torch.stack([r, g, b], dim=-3)
