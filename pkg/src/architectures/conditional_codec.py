"""
Conditional inter-frame codec.

    encoder:  x -> fuse(ctx0) -> stride-2 conv -> fuse(ctx1) -> stride-2 conv -> fuse(ctx2) -> y (H/4)
    decoder:  y_hat -> conv -> fuse(ctx2) -> subpel up -> fuse(ctx1) -> subpel up -> fuse(ctx0) -> F_{t+1}
              recon = clamp(warp(x_{t-1}, v_t) + conv(res block(F_{t+1})), 0, 1)
    prior:    (mu, sigma) from the scale-2 local contexts

Fusion bodies, the prior head and the reconstruction head start at zero: an
untrained codec reproduces the motion-compensated previous reconstruction and its
propagated feature does not feed back into itself.

Local contexts depend only on references and motion and are computed once per frame
for both ladders. Non-local contexts are mined from the encoder's y on one side and
from the decoder's y_hat on the other, so decoding never needs the source frame.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from src.architectures.building_blocks import ResBlock, SubpelUp, initialize, zero_conv
from src.architectures.context_mining import (ContextFusion, FeaturePyramid, LocalContextMiner,
                                              MultiScaleFeatures, NonLocalContextMiner, mine_contexts,
                                              mine_local_contexts)
from src.architectures.motion import motion_side_bits, warp
from src.compression.bitstream import FRAME_INTER, FRAME_INTRA, FramePayload
from src.compression.entropy_model import GaussianConditional, clamp_scales, rate_estimate
from src.compression.range_coder import RangeDecoder, RangeEncoder
from src.experiment_planning.experiment_config import ModelConfig
from src.utilities.exceptions import BitstreamError, DimensionError
from src.utilities.tensor_ops import DTYPE, leaky_relu

FRAME_CHANNELS = 3


def clamp_pixels(x: torch.Tensor) -> torch.Tensor:
    return x.clamp(0.0, 1.0)


@dataclass
class ReferenceState:
    """
    Decoder-side state carried between frames: F_t, F_{t-1}, the stored local contexts
    and the previous reconstruction x_ref (None: no pixel prediction).
    """
    f_ref1: torch.Tensor
    f_ref2: torch.Tensor
    c_prev: Optional[List[torch.Tensor]] = None
    x_ref: Optional[torch.Tensor] = None

    @classmethod
    def from_intra(cls, f_intra: torch.Tensor, x_intra: Optional[torch.Tensor] = None) -> 'ReferenceState':
        # one reference at sequence start: F_0 := F_1
        return cls(f_intra, f_intra, None, x_intra)

    def advance(self, f_next: torch.Tensor, context_next: List[torch.Tensor],
                x_next: Optional[torch.Tensor] = None) -> 'ReferenceState':
        return ReferenceState(f_next, self.f_ref1, context_next, x_next)

    def detach(self) -> 'ReferenceState':
        f1 = self.f_ref1.detach()
        f2 = f1 if self.f_ref2 is self.f_ref1 else self.f_ref2.detach()
        c_prev = None if self.c_prev is None else [c.detach() for c in self.c_prev]
        x_ref = None if self.x_ref is None else self.x_ref.detach()
        return ReferenceState(f1, f2, c_prev, x_ref)

    def prediction(self, v_t: torch.Tensor) -> Optional[torch.Tensor]:
        """Motion-compensated previous reconstruction, the starting point of the decoder output."""
        if self.x_ref is None:
            return None
        return warp(self.x_ref, v_t)

    @property
    def single_reference(self) -> bool:
        return self.f_ref2 is self.f_ref1


@dataclass
class LatentPlan:
    y: torch.Tensor
    y_hat: torch.Tensor
    mu: torch.Tensor
    sigma: torch.Tensor


@dataclass
class InterOutput:
    plan: LatentPlan
    recon: torch.Tensor
    f_prop_next: torch.Tensor
    context_next: List[torch.Tensor]
    bits: torch.Tensor

    def next_state(self, state: ReferenceState) -> ReferenceState:
        return state.advance(self.f_prop_next, self.context_next, self.recon)


@dataclass
class CodedFrame:
    bitstream: bytes
    bits_actual: int
    bits_estimated: float
    recon: torch.Tensor
    f_prop_next: torch.Tensor
    context_next: List[torch.Tensor] = field(default_factory=list)
    frame_type: int = FRAME_INTER

    def next_state(self, state: Optional[ReferenceState]) -> ReferenceState:
        if self.frame_type == FRAME_INTRA or state is None:
            return ReferenceState.from_intra(self.f_prop_next, self.recon)
        return state.advance(self.f_prop_next, self.context_next, self.recon)


class IntraStub(nn.Module):
    """
    Stand-in intra coder: pixels quantized with step 2^q and sent as fixed-length
    literals; the reference feature is a conv embedding of the reconstruction.
    """

    def __init__(self, feature_channels: int, slope: float):
        super().__init__()
        self.slope = slope
        self.embed_in = nn.Conv2d(FRAME_CHANNELS, feature_channels, 3, padding=1)
        self.embed_out = nn.Conv2d(feature_channels, feature_channels, 3, padding=1)

    @staticmethod
    def step(q: int) -> int:
        if not 0 <= q <= 7:
            raise ValueError(f"Intra quality must be in [0, 7], got {q}")
        return 1 << q

    @staticmethod
    def levels(q: int) -> int:
        return int(round(255 / IntraStub.step(q))) + 1

    @staticmethod
    def quantize_indices(x: torch.Tensor, q: int) -> torch.Tensor:
        pixels = torch.round(x.detach().clamp(0, 1) * 255)
        return torch.round(pixels / IntraStub.step(q))

    @staticmethod
    def reconstruct(indices: torch.Tensor, q: int) -> torch.Tensor:
        return torch.clamp(indices * IntraStub.step(q), 0, 255) / 255

    @staticmethod
    def modeled_bits(x: torch.Tensor, q: int) -> float:
        return 8.0 * x[0].numel() / IntraStub.step(q)

    def embed(self, recon: torch.Tensor) -> torch.Tensor:
        return self.embed_out(leaky_relu(self.embed_in(recon), self.slope))

    def forward(self, x: torch.Tensor, q: int) -> Tuple[torch.Tensor, torch.Tensor, float]:
        recon = self.reconstruct(self.quantize_indices(x, q), q).to(DTYPE)
        return recon, self.embed(recon), self.modeled_bits(x, q)

    def compress(self, x: torch.Tensor, q: int) -> bytes:
        indices = self.quantize_indices(x, q).reshape(-1).long().tolist()
        encoder = RangeEncoder()
        encoder.encode_literal(q, 3)
        levels = self.levels(q)
        for v in indices:
            encoder.encode_freq(1, v, levels)
        return encoder.finish()

    def decompress(self, data: bytes, shape: Tuple[int, ...]) -> Tuple[torch.Tensor, int]:
        decoder = RangeDecoder(data)
        q = decoder.decode_literal(3)
        levels = self.levels(q)
        count = 1
        for extent in shape:
            count *= extent
        values = []
        for _ in range(count):
            v = decoder.decode_freq(levels)
            decoder.update(1, v)
            values.append(v)
        decoder.finish()
        indices = torch.tensor(values, dtype=DTYPE).view(shape)
        return self.reconstruct(indices, q), q


class ContextualEncoder(nn.Module):
    def __init__(self, channels, latent_channels: int, num_heads: int, slope: float):
        super().__init__()
        d0, d1, d2 = channels
        self.nonlocal_miner = NonLocalContextMiner((FRAME_CHANNELS, d1, d2), channels, num_heads, slope)
        self.fusion = nn.ModuleList([
            ContextFusion(FRAME_CHANNELS, d0, d0, slope),
            ContextFusion(d1, d1, d1, slope),
            ContextFusion(d2, d2, d2, slope),
        ])
        self.down1 = nn.Conv2d(d0, d1, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(d1, d2, 3, stride=2, padding=1)
        self.latent = nn.Conv2d(d2, latent_channels, 3, padding=1)

    def analysis(self, x: torch.Tensor, feats_t1: MultiScaleFeatures, feats_t2: MultiScaleFeatures,
                 local: List[Tuple[torch.Tensor, torch.Tensor]], mode: str) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """Latent y plus the attention query input of every scale."""
        queries = []
        y_i = x
        for i in range(3):
            if i == 1:
                y_i = self.down1(y_i)
            elif i == 2:
                y_i = self.down2(y_i)
            queries.append(y_i)
            ctx = mine_contexts(y_i, feats_t1, feats_t2, None, None, i, None, self.nonlocal_miner,
                                mode=mode, local=local[i])
            y_i = self.fusion[i](y_i, ctx)
        return self.latent(y_i), queries

    def forward(self, x: torch.Tensor, feats_t1: MultiScaleFeatures, feats_t2: MultiScaleFeatures,
                local: List[Tuple[torch.Tensor, torch.Tensor]], mode: str) -> torch.Tensor:
        return self.analysis(x, feats_t1, feats_t2, local, mode)[0]


class ContextualDecoder(nn.Module):
    def __init__(self, channels, latent_channels: int, num_heads: int, slope: float):
        super().__init__()
        d0, d1, d2 = channels
        self.slope = slope
        self.nonlocal_miner = NonLocalContextMiner(channels, channels, num_heads, slope)
        self.fusion = nn.ModuleList([
            ContextFusion(d0, d0, d0, slope),
            ContextFusion(d1, d1, d1, slope),
            ContextFusion(d2, d2, d2, slope),
        ])
        self.latent = nn.Conv2d(latent_channels, d2, 3, padding=1)
        self.up2 = SubpelUp(d2, d1)
        self.up1 = SubpelUp(d1, d0)
        self.recon_block = ResBlock(d0, slope)
        self.recon_out = zero_conv(d0, FRAME_CHANNELS)

    def forward(self, y_hat: torch.Tensor, feats_t1: MultiScaleFeatures, feats_t2: MultiScaleFeatures,
                local: List[Tuple[torch.Tensor, torch.Tensor]], mode: str,
                prediction: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """(recon in [0, 1], propagated feature F_{t+1})"""
        g = self.latent(y_hat)
        for i in (2, 1, 0):
            if i == 1:
                g = self.up2(g)
            elif i == 0:
                g = self.up1(g)
            ctx = mine_contexts(g, feats_t1, feats_t2, None, None, i, None, self.nonlocal_miner,
                                mode=mode, local=local[i])
            g = self.fusion[i](g, ctx)
        recon = self.recon_out(self.recon_block(g))
        if prediction is not None:
            recon = prediction + recon
        return clamp_pixels(recon), g


class EntropyPrior(nn.Module):
    """
    (mu, sigma) of the latent from the two scale-2 local contexts. The output conv
    starts at zero: mu = 0 and sigma = softplus(0) everywhere until trained.
    """

    def __init__(self, context_channels: int, latent_channels: int, slope: float):
        super().__init__()
        self.slope = slope
        self.latent_channels = latent_channels
        self.conv1 = nn.Conv2d(2 * context_channels, context_channels, 3, padding=1)
        self.conv2 = zero_conv(context_channels, 2 * latent_channels)

    def forward(self, cl_ref1: torch.Tensor, cl_ref2: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        params = self.conv2(leaky_relu(self.conv1(torch.cat([cl_ref1, cl_ref2], dim=1)), self.slope))
        mu, raw_scale = params.split(self.latent_channels, dim=1)
        return mu, clamp_scales(raw_scale)


class ConditionalVideoCodec(nn.Module):
    def __init__(self, config: ModelConfig = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        slope = cfg.leaky_slope
        d0 = cfg.channels[0]

        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.intra = IntraStub(d0, slope)
            self.pyramid = FeaturePyramid(d0, cfg.channels, slope)
            self.local_miner = LocalContextMiner(cfg.channels, cfg.offset_groups, cfg.max_residue_magnitude, slope)
            self.encoder = ContextualEncoder(cfg.channels, cfg.latent_channels, cfg.num_heads, slope)
            self.decoder = ContextualDecoder(cfg.channels, cfg.latent_channels, cfg.num_heads, slope)
            self.prior = EntropyPrior(cfg.channels[2], cfg.latent_channels, slope)
            self.apply(initialize)
        self.entropy = GaussianConditional(cfg.seed)
        self.to(DTYPE)

    @property
    def mode(self) -> str:
        return self.config.context_mode

    def _check_frame(self, x: torch.Tensor):
        if x.dim() != 4 or x.shape[1] != FRAME_CHANNELS:
            raise DimensionError(f"Frames must be N x 3 x H x W, got {tuple(x.shape)}")
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise DimensionError(f"Frame extents must be divisible by 4, got {tuple(x.shape[-2:])}")

    def reference_features(self, state: ReferenceState) -> Tuple[MultiScaleFeatures, MultiScaleFeatures]:
        feats_t1 = self.pyramid(state.f_ref1)
        feats_t2 = feats_t1 if state.single_reference else self.pyramid(state.f_ref2)
        return feats_t1, feats_t2

    def frame_contexts(self, state: ReferenceState, v_t: torch.Tensor):
        feats_t1, feats_t2 = self.reference_features(state)
        local = mine_local_contexts(self.local_miner, feats_t1, v_t, state.c_prev, self.mode)
        mu, sigma = self.prior(*local[2])
        return feats_t1, feats_t2, local, mu, sigma

    def intra_frame(self, x: torch.Tensor, q: Optional[int] = None) -> Tuple[torch.Tensor, torch.Tensor, float]:
        self._check_frame(x)
        return self.intra(x, self.config.intra_quality if q is None else q)

    def forward_inter(self, x: torch.Tensor, state: ReferenceState, v_t: torch.Tensor,
                      training: Optional[bool] = None) -> InterOutput:
        """One P-frame through encoder, quantizer, entropy model and decoder."""
        self._check_frame(x)
        feats_t1, feats_t2, local, mu, sigma = self.frame_contexts(state, v_t)
        y = self.encoder(x, feats_t1, feats_t2, local, self.mode)
        y_hat, _ = self.entropy(y, mu, sigma, training=training)
        recon, f_next = self.decoder(y_hat, feats_t1, feats_t2, local, self.mode, state.prediction(v_t))
        bits = rate_estimate(y_hat, mu, sigma) + motion_side_bits(v_t, self.config.motion_bits_per_pixel)
        context_next = [cl_ref1 for cl_ref1, _ in local]
        return InterOutput(LatentPlan(y, y_hat, mu, sigma), recon, f_next, context_next, bits)

    @torch.no_grad()
    def encode_intra(self, x: torch.Tensor, q: Optional[int] = None) -> CodedFrame:
        q = self.config.intra_quality if q is None else q
        recon, f_intra, bits = self.intra_frame(x, q)
        body = self.intra.compress(x, q)
        payload = FramePayload(FRAME_INTRA, body).to_bytes()
        return CodedFrame(payload, 8 * len(payload), bits, recon, f_intra, [], FRAME_INTRA)

    @torch.no_grad()
    def encode_frame(self, x: torch.Tensor, state: ReferenceState, v_t: torch.Tensor) -> Tuple[LatentPlan, CodedFrame]:
        out = self.forward_inter(x, state, v_t, training=False)
        plan = out.plan
        body = self.entropy.compress(plan.y_hat, plan.mu, plan.sigma)
        payload = FramePayload(FRAME_INTER, body).to_bytes()
        coded = CodedFrame(payload, 8 * len(payload), float(out.bits), out.recon, out.f_prop_next,
                           out.context_next, FRAME_INTER)
        return plan, coded

    @torch.no_grad()
    def decode_frame(self, payload: bytes, state: Optional[ReferenceState], v_t: Optional[torch.Tensor],
                     height: int, width: int) -> CodedFrame:
        """Decode one payload using only the bitstream, the references and the motion field."""
        frame = FramePayload.from_bytes(payload)
        if frame.frame_type == FRAME_INTRA:
            recon, _ = self.intra.decompress(frame.body, (1, FRAME_CHANNELS, height, width))
            return CodedFrame(payload, 8 * len(payload), float('nan'), recon, self.intra.embed(recon),
                              [], FRAME_INTRA)
        if state is None:
            raise BitstreamError("Inter frame without a preceding intra frame")
        feats_t1, feats_t2, local, mu, sigma = self.frame_contexts(state, v_t)
        y_hat = self.entropy.decompress(frame.body, mu, sigma)
        recon, f_next = self.decoder(y_hat, feats_t1, feats_t2, local, self.mode, state.prediction(v_t))
        context_next = [cl_ref1 for cl_ref1, _ in local]
        return CodedFrame(payload, 8 * len(payload), float('nan'), recon, f_next, context_next, FRAME_INTER)

    @torch.no_grad()
    def attention_argmax(self, x: torch.Tensor, state: ReferenceState, v_t: torch.Tensor,
                         scale: int = 0) -> torch.Tensor:
        """Encoder-side arg-max key position per query position at `scale`, attending to F_t. (N, L)"""
        self._check_frame(x)
        feats_t1, feats_t2, local, _, _ = self.frame_contexts(state, v_t)
        _, queries = self.encoder.analysis(x, feats_t1, feats_t2, local, self.mode)
        return self.encoder.nonlocal_miner.attention[scale].attention_argmax(queries[scale], feats_t1[scale])
