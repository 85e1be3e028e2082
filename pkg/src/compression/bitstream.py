"""
Sequence container:

    magic "NLVC" | version u8 | H u16 | W u16 | frame count u32
    per frame: payload length u32 | payload (first byte = frame type)

All integers little-endian.
"""
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Union

from src.utilities.exceptions import BitstreamError, ResultsIOError

MAGIC = b"NLVC"
VERSION = 1
HEADER = struct.Struct('<4sBHHI')
LENGTH = struct.Struct('<I')

FRAME_INTRA = 0
FRAME_INTER = 1


@dataclass
class FramePayload:
    frame_type: int
    body: bytes

    def to_bytes(self) -> bytes:
        return bytes([self.frame_type]) + self.body

    @classmethod
    def from_bytes(cls, data: bytes) -> 'FramePayload':
        if not data:
            raise BitstreamError("Empty frame payload")
        if data[0] not in (FRAME_INTRA, FRAME_INTER):
            raise BitstreamError(f"Unknown frame type {data[0]}")
        return cls(data[0], bytes(data[1:]))


@dataclass
class Container:
    height: int
    width: int
    frames: List[FramePayload] = field(default_factory=list)

    def total_bits(self) -> int:
        return 8 * len(self.to_bytes())

    def to_bytes(self) -> bytes:
        return write_container(self)


def write_container(container: Container) -> bytes:
    if not (0 < container.height < 1 << 16 and 0 < container.width < 1 << 16):
        raise ValueError(f"Frame size {container.height} x {container.width} does not fit u16")
    out = bytearray(HEADER.pack(MAGIC, VERSION, container.height, container.width, len(container.frames)))
    for frame in container.frames:
        payload = frame.to_bytes()
        out += LENGTH.pack(len(payload))
        out += payload
    return bytes(out)


def read_container(data: bytes) -> Container:
    if len(data) < HEADER.size:
        raise BitstreamError(f"Stream of {len(data)} bytes is shorter than the header")
    magic, version, height, width, count = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BitstreamError(f"Bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"Unsupported container version {version}")
    offset = HEADER.size
    frames = []
    for i in range(count):
        if offset + LENGTH.size > len(data):
            raise BitstreamError(f"Truncated stream at frame {i}")
        (length,) = LENGTH.unpack_from(data, offset)
        offset += LENGTH.size
        if offset + length > len(data):
            raise BitstreamError(f"Frame {i} payload truncated ({length} bytes announced)")
        frames.append(FramePayload.from_bytes(data[offset:offset + length]))
        offset += length
    if offset != len(data):
        raise BitstreamError(f"{len(data) - offset} trailing bytes after the last frame")
    return Container(height, width, frames)


def save_bitstream(path: Union[str, Path], container: Container):
    try:
        Path(path).write_bytes(write_container(container))
    except OSError as e:
        raise ResultsIOError(path, f"Could not write bitstream: {e}") from e


def load_bitstream(path: Union[str, Path]) -> Container:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise ResultsIOError(path, f"Could not read bitstream: {e}") from e
    return read_container(data)
