"""
Error-propagation probe: code a sequence twice, once clean and once with Gaussian
noise added to the propagated reference feature before one frame, and compare the
per-frame quality and estimated rate.
"""
from dataclasses import dataclass, replace
from typing import Optional

import pandas as pd
import torch

from src.architectures.conditional_codec import ConditionalVideoCodec, ReferenceState
from src.compression.entropy_model import bits_to_bpp
from src.evaluation.quality_metrics import psnr
from src.training.dataloading.sequence_io import Sequence
from src.utilities.exceptions import InputError


@dataclass
class ProbeReport:
    inject_at: int
    noise_std: float
    frames: pd.DataFrame

    def peak_frame(self) -> int:
        """1-based frame with the largest bpp increase."""
        return int(self.frames.loc[self.frames['delta_bpp'].idxmax(), 'frame'])

    def delta_bpp_at(self, frame: int) -> float:
        return float(self.frames.loc[self.frames['frame'] == frame, 'delta_bpp'].iloc[0])

    def to_csv(self, path: str):
        self.frames.to_csv(path, index=False)


@torch.no_grad()
def code_sequence_estimated(model: ConditionalVideoCodec, sequence: Sequence, frames: Optional[int] = None,
                            inject_at: Optional[int] = None, noise_std: float = 0.0, seed: int = 0) -> pd.DataFrame:
    """Per-frame (psnr, bpp) with estimated bits in eval mode; frame numbers are 1-based."""
    frames = len(sequence) if frames is None else frames
    height, width = sequence.padded_size
    generator = torch.Generator().manual_seed(seed)
    was_training = model.training
    model.eval()

    rows = []
    recon, f_intra, bits = model.intra_frame(sequence.frame(0))
    state = ReferenceState.from_intra(f_intra, recon)
    rows.append({'frame': 1, 'psnr': psnr(sequence.crop(recon), sequence.crop(sequence.frame(0))),
                 'bpp': bits_to_bpp(bits, height, width)})
    for t in range(1, frames):
        if inject_at is not None and t + 1 == inject_at:
            noise = torch.randn(state.f_ref1.shape, generator=generator, dtype=state.f_ref1.dtype)
            state = replace(state, f_ref1=state.f_ref1 + noise_std * noise)
        out = model.forward_inter(sequence.frame(t), state, sequence.flow(t), training=False)
        rows.append({'frame': t + 1,
                     'psnr': psnr(sequence.crop(out.recon), sequence.crop(sequence.frame(t))),
                     'bpp': bits_to_bpp(out.bits, height, width)})
        state = out.next_state(state)

    model.train(was_training)
    return pd.DataFrame(rows)


def noise_probe(model: ConditionalVideoCodec, sequence: Sequence, inject_at: int, noise_std: float = 1.0,
                frames: Optional[int] = None, seed: int = 0) -> ProbeReport:
    """
    Args:
        inject_at: 1-based index of the first frame coded from the noisy reference (>= 2)
        noise_std: standard deviation of the additive Gaussian noise
    """
    frames = len(sequence) if frames is None else frames
    if not 2 <= inject_at <= frames:
        raise InputError(f"inject_at must be an inter frame in [2, {frames}], got {inject_at}")
    if noise_std < 0:
        raise InputError(f"noise_std must be non-negative, got {noise_std}")
    clean = code_sequence_estimated(model, sequence, frames)
    noisy = code_sequence_estimated(model, sequence, frames, inject_at, noise_std, seed)
    table = clean.merge(noisy, on='frame', suffixes=('_clean', '_noisy'))
    table['delta_psnr'] = table['psnr_noisy'] - table['psnr_clean']
    table['delta_bpp'] = table['bpp_noisy'] - table['bpp_clean']
    return ProbeReport(inject_at, noise_std, table)
