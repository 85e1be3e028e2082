"""
Closed-loop sequence coding: GOP scheduling, container assembly, decoding with
integrity verification and per-frame / aggregate quality-rate rows.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence as SequenceType, Tuple

import numpy as np
import torch

from src.architectures.conditional_codec import ConditionalVideoCodec, ReferenceState
from src.architectures.motion import motion_side_bits
from src.compression.bitstream import FRAME_INTRA, Container, FramePayload, read_container, write_container
from src.compression.entropy_model import bits_to_bpp
from src.evaluation.quality_metrics import MAX_PSNR, ms_ssim, psnr
from src.training.checkpointing import load_checkpoint
from src.training.dataloading.sequence_io import Sequence
from src.utilities.exceptions import CodecIntegrityError, InputError, MetricUndefinedError


def intra_schedule(num_frames: int, intra_period: int = -1) -> List[bool]:
    """
    True where frame t (0-based) is intra coded. intra_period -1 means a single intra
    frame followed by P-frames only.
    """
    if intra_period == 0 or intra_period < -1:
        raise InputError(f"intra_period must be -1 or a positive integer, got {intra_period}")
    if intra_period == -1:
        return [t == 0 for t in range(num_frames)]
    return [t % intra_period == 0 for t in range(num_frames)]


@dataclass
class EncodedSequence:
    container: Container
    recons: List[torch.Tensor] = field(default_factory=list)
    rows: List[dict] = field(default_factory=list)

    @property
    def bitstream(self) -> bytes:
        return write_container(self.container)


class SequenceCoder(object):
    """
    Codes whole sequences with a ConditionalVideoCodec. Motion fields are side
    information handed to both encoder and decoder; their cost enters the rate through
    the model's motion_bits_per_pixel.
    """

    def __init__(self, model: ConditionalVideoCodec, intra_period: int = -1, verify: bool = True,
                 max_psnr: float = MAX_PSNR, verbose: bool = False):
        self.model = model
        self.intra_period = intra_period
        self.verify = verify
        self.max_psnr = max_psnr
        self.verbose = verbose

    @classmethod
    def from_checkpoint(cls, checkpoint_path: str, **kwargs) -> 'SequenceCoder':
        model, _ = load_checkpoint(checkpoint_path)
        return cls(model, **kwargs)

    def _side_bits(self, v_t: torch.Tensor) -> float:
        return motion_side_bits(v_t, self.model.config.motion_bits_per_pixel)

    @torch.no_grad()
    def encode_sequence(self, sequence: Sequence, frames: Optional[int] = None) -> EncodedSequence:
        frames = len(sequence) if frames is None else frames
        if not 1 <= frames <= len(sequence):
            raise InputError(f"Cannot code {frames} frames of a {len(sequence)}-frame sequence")
        self.model.eval()
        height, width = sequence.padded_size
        container = Container(height, width)
        encoded = EncodedSequence(container)
        state = None
        for t, is_intra in enumerate(intra_schedule(frames, self.intra_period)):
            x = sequence.frame(t)
            if is_intra:
                coded = self.model.encode_intra(x)
                side_bits = 0.0
            else:
                _, coded = self.model.encode_frame(x, state, sequence.flow(t))
                side_bits = self._side_bits(sequence.flow(t))
            state = coded.next_state(state)
            container.frames.append(FramePayload.from_bytes(coded.bitstream))
            encoded.recons.append(coded.recon)
            encoded.rows.append({'frame': t + 1,
                                 'frame_type': 'I' if coded.frame_type == FRAME_INTRA else 'P',
                                 'bits_actual': coded.bits_actual + side_bits,
                                 'bits_estimated': coded.bits_estimated + side_bits})
            if self.verbose:
                print(f"frame {t + 1}/{frames} ({encoded.rows[-1]['frame_type']}): "
                      f"{coded.bits_actual} bits")
        return encoded

    @torch.no_grad()
    def decode_sequence(self, container: Container, flows: Callable[[int], torch.Tensor]) -> List[torch.Tensor]:
        """Decode every frame from the container; flows(t) returns the motion field of frame t."""
        self.model.eval()
        state: Optional[ReferenceState] = None
        recons = []
        for t, frame in enumerate(container.frames):
            coded = self.model.decode_frame(frame.to_bytes(), state, flows(t), container.height, container.width)
            state = coded.next_state(state)
            recons.append(coded.recon)
        return recons

    def check_integrity(self, encoded: EncodedSequence, decoded: SequenceType[torch.Tensor]):
        if len(decoded) != len(encoded.recons):
            raise CodecIntegrityError(f"Decoded {len(decoded)} frames, encoded {len(encoded.recons)}")
        for t, (a, b) in enumerate(zip(encoded.recons, decoded)):
            if not torch.equal(a, b):
                diff = float((a - b).abs().max())
                raise CodecIntegrityError(f"Frame {t + 1}: decoder reconstruction differs from the encoder "
                                          f"(max abs diff {diff:.3e})")

    def frame_rows(self, sequence: Sequence, encoded: EncodedSequence) -> List[dict]:
        height, width = sequence.padded_size
        rows = []
        for t, (row, recon) in enumerate(zip(encoded.rows, encoded.recons)):
            a, b = sequence.crop(recon), sequence.crop(sequence.frame(t))
            try:
                msssim = ms_ssim(a, b)
            except MetricUndefinedError:
                msssim = float('nan')
            rows.append(dict(row, bpp=bits_to_bpp(row['bits_actual'], height, width),
                             psnr_db=psnr(a, b, max_psnr=self.max_psnr), msssim=msssim))
        return rows

    def evaluate(self, sequence: Sequence, frames: Optional[int] = None) -> Tuple[List[dict], dict]:
        """Encode, decode and verify, then return (per-frame rows, aggregate row)."""
        encoded = self.encode_sequence(sequence, frames)
        if self.verify:
            container = read_container(encoded.bitstream)
            self.check_integrity(encoded, self.decode_sequence(container, sequence.flow))
        rows = self.frame_rows(sequence, encoded)
        height, width = sequence.padded_size
        total_bits = sum(r['bits_actual'] for r in rows)
        aggregate = {
            'label': sequence.name,
            'frames': len(rows),
            'intra_frames': sum(r['frame_type'] == 'I' for r in rows),
            'container_bits': encoded.container.total_bits(),
            'bpp': total_bits / (len(rows) * height * width),
            'bpp_estimated': sum(r['bits_estimated'] for r in rows) / (len(rows) * height * width),
            'psnr_db': float(np.mean([r['psnr_db'] for r in rows])),
            'msssim': _mean_defined([r['msssim'] for r in rows]),
        }
        return rows, aggregate


def _mean_defined(values: List[float]) -> float:
    defined = [v for v in values if not math.isnan(v)]
    return float(np.mean(defined)) if defined else float('nan')


def run_jobs(fn: Callable, items: SequenceType, jobs: int = 1) -> List:
    """Map fn over independent work items, in order, on up to `jobs` threads."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        return list(executor.map(fn, items))


def evaluate_many(coders_and_sequences: SequenceType[Tuple[SequenceCoder, Sequence]],
                  jobs: int = 1) -> List[Dict[str, object]]:
    def _one(pair):
        coder, sequence = pair
        return coder.evaluate(sequence)[1]
    return run_jobs(_one, list(coders_and_sequences), jobs)
