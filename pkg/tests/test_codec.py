import math

import pytest
import torch
import torch.nn.functional as F

from src.architectures.conditional_codec import (CodedFrame, ConditionalVideoCodec, IntraStub, ReferenceState)
from src.architectures.motion import warp
from src.compression.bitstream import FRAME_INTER, FRAME_INTRA, FramePayload
from src.evaluation.quality_metrics import psnr
from src.inference.sequence_coder import SequenceCoder, evaluate_many, intra_schedule
from src.training.checkpointing import save_checkpoint
from src.utilities.exceptions import BitstreamError, CodecIntegrityError, DimensionError, InputError
from src.utilities.gradient_check import sampled_gradient_check
from src.utilities.tensor_ops import DTYPE
from tests.helpers import perturb_zero_init, toy_model_config


def _pixels(generator, shape=(1, 3, 16, 16)):
    return torch.randint(0, 256, shape, generator=generator).to(DTYPE) / 255


def _closed_loop(model, sequence, frames):
    """Encoder-side coded frames plus decoder-side reconstructions of the same frames."""
    coded, state = [], None
    for t in range(frames):
        if t == 0:
            frame = model.encode_intra(sequence.frame(0))
        else:
            _, frame = model.encode_frame(sequence.frame(t), state, sequence.flow(t))
        state = frame.next_state(state)
        coded.append(frame)
    decoded, state = [], None
    height, width = sequence.padded_size
    for t, frame in enumerate(coded):
        out = model.decode_frame(frame.bitstream, state, sequence.flow(t), height, width)
        state = out.next_state(state)
        decoded.append(out)
    return coded, decoded


class TestIntraStub:
    def test_lossless_at_unit_step(self, toy_model, generator):
        x = _pixels(generator)
        recon, f_intra, bits = toy_model.intra_frame(x, q=0)
        assert torch.equal(recon, x)
        assert psnr(recon, x) == 99.0
        assert bits == 8 * 3 * 16 * 16
        assert f_intra.shape == (1, toy_model.config.channels[0], 16, 16)

    def test_step_two_error_bound(self, toy_model):
        x = (torch.arange(768) % 256).to(DTYPE).view(1, 3, 16, 16) / 255
        recon, _, _ = toy_model.intra_frame(x, q=1)
        assert float(((recon - x) * 255).abs().max()) <= 1.0 + 1e-9

    def test_bits_decrease_with_step(self, generator):
        x = _pixels(generator)
        bits = [IntraStub.modeled_bits(x, q) for q in range(8)]
        assert all(a > b for a, b in zip(bits, bits[1:]))

    def test_compress_round_trip(self, toy_model, generator):
        x = _pixels(generator)
        data = toy_model.intra.compress(x, 2)
        recon, q = toy_model.intra.decompress(data, tuple(x.shape))
        assert q == 2
        assert torch.equal(recon, toy_model.intra_frame(x, 2)[0])

    def test_quality_range(self):
        with pytest.raises(ValueError):
            IntraStub.step(8)


class TestReferenceState:
    def test_first_p_frame_uses_one_reference(self, generator):
        f = torch.randn(1, 4, 8, 8, generator=generator, dtype=DTYPE)
        state = ReferenceState.from_intra(f)
        assert state.single_reference and state.c_prev is None
        assert state.detach().single_reference

    def test_advance_shifts_references(self, generator):
        f1, f2 = (torch.randn(1, 4, 8, 8, generator=generator, dtype=DTYPE) for _ in range(2))
        state = ReferenceState.from_intra(f1).advance(f2, [f2])
        assert state.f_ref1 is f2 and state.f_ref2 is f1
        assert not state.single_reference


class TestInterFrame:
    def test_shapes_and_rate(self, toy_model, tiny_sequence):
        state = ReferenceState.from_intra(toy_model.intra_frame(tiny_sequence.frame(0))[1])
        out = toy_model.forward_inter(tiny_sequence.frame(1), state, tiny_sequence.flow(1), training=False)
        cfg = toy_model.config
        assert out.recon.shape == (1, 3, 16, 16)
        assert out.f_prop_next.shape == (1, cfg.channels[0], 16, 16)
        assert out.plan.y_hat.shape == (1, cfg.latent_channels, 4, 4)
        assert [tuple(c.shape[-2:]) for c in out.context_next] == [(16, 16), (8, 8), (4, 4)]
        assert float(out.bits) >= 0 and torch.isfinite(out.bits)
        assert bool((out.plan.sigma >= 0.04).all())

    @pytest.mark.parametrize('mode', ['base', 'nlc', 'mnlc'])
    def test_context_modes(self, mode, tiny_sequence):
        model = ConditionalVideoCodec(toy_model_config(context_mode=mode))
        coded, decoded = _closed_loop(model, tiny_sequence, 3)
        for a, b in zip(coded, decoded):
            assert torch.equal(a.recon, b.recon)

    def test_untrained_codec_reproduces_warped_reference(self, toy_model, tiny_sequence):
        recon0, f_intra, _ = toy_model.intra_frame(tiny_sequence.frame(0))
        state = ReferenceState.from_intra(f_intra, recon0)
        out = toy_model.forward_inter(tiny_sequence.frame(1), state, tiny_sequence.flow(1), training=False)
        assert torch.equal(out.recon, warp(recon0, tiny_sequence.flow(1)).clamp(0, 1))
        assert out.next_state(state).x_ref is out.recon

    def test_reconstruction_stays_in_pixel_range(self, tiny_sequence):
        model = ConditionalVideoCodec(toy_model_config())
        perturb_zero_init(model, std=5.0)
        recon0, f_intra, _ = model.intra_frame(tiny_sequence.frame(0))
        out = model.forward_inter(tiny_sequence.frame(1), ReferenceState.from_intra(f_intra, recon0),
                                  tiny_sequence.flow(1), training=False)
        assert float(out.recon.min()) >= 0.0 and float(out.recon.max()) <= 1.0

    def test_frame_extent_must_divide_four(self, toy_model):
        with pytest.raises(DimensionError):
            toy_model.intra_frame(torch.zeros(1, 3, 10, 16, dtype=DTYPE))

    def test_gradients_match_finite_differences(self, tiny_sequence):
        model = ConditionalVideoCodec(toy_model_config(leaky_slope=1.0))
        perturb_zero_init(model, std=0.05)
        x0, x1, v1 = tiny_sequence.frame(0), tiny_sequence.frame(1), tiny_sequence.flow(1)

        def loss_fn():
            model.entropy.reseed(0)
            recon0, f_intra, _ = model.intra_frame(x0)
            out = model.forward_inter(x1, ReferenceState.from_intra(f_intra, recon0), v1, training=True)
            return out.bits / 256 + 64 * F.mse_loss(out.recon, x1)

        errors = sampled_gradient_check(loss_fn, model.named_parameters(), samples_per_tensor=1, floor=1e-4)
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-4, worst


class TestClosedLoop:
    def test_decoder_matches_encoder(self, toy_model, tiny_sequence):
        coded, decoded = _closed_loop(toy_model, tiny_sequence, 4)
        assert [c.frame_type for c in coded] == [FRAME_INTRA] + [FRAME_INTER] * 3
        for a, b in zip(coded, decoded):
            assert torch.equal(a.recon, b.recon)
            assert torch.equal(a.f_prop_next, b.f_prop_next)

    def test_identical_models_write_identical_streams(self, model_config, tiny_sequence):
        a, _ = _closed_loop(ConditionalVideoCodec(model_config), tiny_sequence, 3)
        b, _ = _closed_loop(ConditionalVideoCodec(model_config), tiny_sequence, 3)
        assert [f.bitstream for f in a] == [f.bitstream for f in b]

    def test_inter_frame_without_reference(self, toy_model):
        payload = FramePayload(FRAME_INTER, b'\x00' * 8).to_bytes()
        with pytest.raises(BitstreamError):
            toy_model.decode_frame(payload, None, torch.zeros(1, 2, 16, 16, dtype=DTYPE), 16, 16)

    def test_intra_frame_resets_state(self, toy_model, generator):
        f = torch.randn(1, 4, 16, 16, generator=generator, dtype=DTYPE)
        coded = CodedFrame(b'', 0, 0.0, f, f, [], FRAME_INTRA)
        state = coded.next_state(ReferenceState(f, f.clone(), [f]))
        assert state.single_reference and state.c_prev is None

    def test_attention_argmax(self, toy_model, tiny_sequence):
        state = ReferenceState.from_intra(toy_model.intra_frame(tiny_sequence.frame(0))[1])
        argmax = toy_model.attention_argmax(tiny_sequence.frame(1), state, tiny_sequence.flow(1), scale=0)
        assert argmax.shape == (1, 256)
        assert toy_model.attention_argmax(tiny_sequence.frame(1), state, tiny_sequence.flow(1), scale=2).shape == (1, 16)


class TestSequenceCoder:
    def test_intra_schedule(self):
        assert [t for t, intra in enumerate(intra_schedule(96, 32)) if intra] == [0, 32, 64]
        assert sum(intra_schedule(10, -1)) == 1
        with pytest.raises(InputError):
            intra_schedule(10, 0)

    def test_evaluate_single_intra(self, toy_model, tiny_sequence):
        rows, aggregate = SequenceCoder(toy_model).evaluate(tiny_sequence, frames=4)
        assert [r['frame_type'] for r in rows] == ['I', 'P', 'P', 'P']
        assert aggregate['intra_frames'] == 1 and aggregate['frames'] == 4
        assert aggregate['bpp'] > 0 and math.isfinite(aggregate['psnr_db'])
        # container adds its own header and per-frame length fields
        assert aggregate['container_bits'] > sum(r['bits_actual'] for r in rows)

    def test_periodic_intra(self, toy_model, tiny_sequence):
        rows, aggregate = SequenceCoder(toy_model, intra_period=2).evaluate(tiny_sequence, frames=5)
        assert [r['frame_type'] for r in rows] == ['I', 'P', 'I', 'P', 'I']
        assert aggregate['intra_frames'] == 3

    def test_integrity_violation(self, toy_model, tiny_sequence):
        coder = SequenceCoder(toy_model)
        encoded = coder.encode_sequence(tiny_sequence, frames=2)
        decoded = [r.clone() for r in encoded.recons]
        decoded[1][0, 0, 0, 0] += 1e-9
        with pytest.raises(CodecIntegrityError):
            coder.check_integrity(encoded, decoded)

    def test_too_many_frames(self, toy_model, tiny_sequence):
        with pytest.raises(InputError):
            SequenceCoder(toy_model).encode_sequence(tiny_sequence, frames=len(tiny_sequence) + 1)

    def test_evaluate_many_in_order(self, toy_model, tiny_sequence, tmp_path):
        save_checkpoint(toy_model, str(tmp_path / 'toy.nlvc'))
        coders = [SequenceCoder.from_checkpoint(str(tmp_path / 'toy.nlvc')), SequenceCoder(toy_model, intra_period=2)]
        single = [SequenceCoder(toy_model).evaluate(tiny_sequence)[1],
                  SequenceCoder(toy_model, intra_period=2).evaluate(tiny_sequence)[1]]
        aggregates = evaluate_many([(c, tiny_sequence) for c in coders], jobs=2)
        assert [a['intra_frames'] for a in aggregates] == [1, 3]
        assert [a['container_bits'] for a in aggregates] == [a['container_bits'] for a in single]
