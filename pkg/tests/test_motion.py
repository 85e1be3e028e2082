import numpy as np
import pytest
import torch

from src.architectures.motion import (MultiScaleRefine, OffsetDiversity, blend_candidates, check_motion_field,
                                      downsample_flow, motion_side_bits, second_reference_context, warp)
from src.evaluation.quality_metrics import psnr
from src.experiment_planning.experiment_config import SequenceSpec
from src.training.dataloading.synthetic_sequences import generate
from src.utilities.exceptions import DimensionError, ReferenceUnavailable
from src.utilities.gradient_check import sampled_gradient_check
from src.utilities.tensor_ops import DTYPE
from tests.helpers import perturb_zero_init


def _constant_flow(dx, dy, h, w):
    v = torch.zeros(1, 2, h, w, dtype=DTYPE)
    v[:, 0] = dx
    v[:, 1] = dy
    return v


def _smooth_field(h, w, channels=2):
    ys, xs = torch.meshgrid(torch.arange(h, dtype=DTYPE), torch.arange(w, dtype=DTYPE), indexing='ij')
    planes = [0.5 + 0.3 * torch.sin(2 * np.pi * (xs / 16 + c * ys / 20)) for c in range(channels)]
    return torch.stack(planes).unsqueeze(0)


class TestWarp:
    def test_zero_flow_identity(self, generator):
        f = torch.randn(1, 3, 8, 8, generator=generator, dtype=DTYPE)
        torch.testing.assert_close(warp(f, torch.zeros(1, 2, 8, 8, dtype=DTYPE)), f, atol=1e-12, rtol=0)

    def test_integer_flow_shifts_ramp(self):
        ramp = torch.arange(6, dtype=DTYPE).repeat(4, 1).view(1, 1, 4, 6)
        out = warp(ramp, _constant_flow(1.0, 0.0, 4, 6))
        expected = torch.tensor([0, 0, 1, 2, 3, 4], dtype=DTYPE).repeat(4, 1).view(1, 1, 4, 6)
        assert torch.equal(out, expected)

    def test_half_pixel_interpolation(self):
        f = torch.tensor([[[[0.0, 10.0]]]], dtype=DTYPE)
        out = warp(f, _constant_flow(0.5, 0.0, 1, 2))
        assert out[0, 0, 0, 1].item() == pytest.approx(5.0)

    def test_constant_image_stays_constant(self, generator):
        f = torch.full((1, 2, 10, 10), 0.37, dtype=DTYPE)
        for _ in range(10):
            v = 4 * torch.randn(1, 2, 10, 10, generator=generator, dtype=DTYPE).clamp(-2.5, 2.5)
            assert torch.equal(warp(f, v), f)

    def test_unbatched_input(self, generator):
        f = torch.randn(3, 4, 4, generator=generator, dtype=DTYPE)
        assert warp(f, torch.zeros(2, 4, 4, dtype=DTYPE)).shape == (3, 4, 4)

    def test_composition(self):
        f = _smooth_field(32, 32)
        a, b = _constant_flow(0.3, 0.2, 32, 32), _constant_flow(0.4, -0.1, 32, 32)
        twice = warp(warp(f, a), b)[..., 4:-4, 4:-4]
        once = warp(f, a + b)[..., 4:-4, 4:-4]
        assert float((twice - once).norm() / once.norm()) < 0.05

    def test_gradient_wrt_features(self, generator):
        f = torch.randn(1, 2, 6, 6, generator=generator, dtype=DTYPE, requires_grad=True)
        v = (1.5 * torch.randn(1, 2, 6, 6, generator=generator, dtype=DTYPE)).clamp(-3, 3)
        assert torch.autograd.gradcheck(lambda t: warp(t, v), (f,))


class TestMotionField:
    def test_shape(self):
        with pytest.raises(DimensionError):
            check_motion_field(torch.zeros(1, 3, 4, 4, dtype=DTYPE), 4, 4)

    def test_magnitude(self):
        with pytest.raises(ValueError):
            check_motion_field(_constant_flow(9.0, 0.0, 4, 4), 4, 4)

    def test_downsample_divides_magnitude(self):
        v = downsample_flow(_constant_flow(2.0, -4.0, 8, 8), 2)
        assert v.shape == (1, 2, 2, 2)
        torch.testing.assert_close(v, _constant_flow(0.5, -1.0, 2, 2))

    def test_side_bits(self):
        assert motion_side_bits(torch.zeros(1, 2, 8, 4), 0.0) == 0.0
        assert motion_side_bits(torch.zeros(1, 2, 8, 4), 0.5) == 16.0


class TestOffsetDiversity:
    def test_zero_init_is_identity(self, generator):
        od = OffsetDiversity(4, groups=3)
        f = torch.randn(1, 4, 8, 8, generator=generator, dtype=DTYPE)
        offsets, masks = od.predict(f, torch.zeros(1, 2, 8, 8, dtype=DTYPE))
        assert bool((offsets == 0).all())
        torch.testing.assert_close(masks, torch.full_like(masks, 1 / 3))
        torch.testing.assert_close(od(f, torch.zeros(1, 2, 8, 8, dtype=DTYPE)), f, atol=1e-12, rtol=0)

    def test_one_hot_mask_selects_candidate(self, generator):
        f = torch.randn(1, 2, 6, 6, generator=generator, dtype=DTYPE)
        offsets = torch.randn(1, 3, 2, 6, 6, generator=generator, dtype=DTYPE).clamp(-2, 2)
        masks = torch.zeros(1, 3, 6, 6, dtype=DTYPE)
        masks[:, 1] = 1
        torch.testing.assert_close(blend_candidates(f, offsets, masks), warp(f, offsets[:, 1]))

    def test_masks_are_distributions_and_offsets_bounded(self, generator):
        od = OffsetDiversity(4, groups=4, max_residue_magnitude=1.5)
        perturb_zero_init(od, std=1.0)
        f = torch.randn(1, 4, 8, 8, generator=generator, dtype=DTYPE)
        offsets, masks = od.predict(f, _constant_flow(1.0, 0.5, 8, 8))
        assert bool((masks >= 0).all())
        torch.testing.assert_close(masks.sum(dim=1), torch.ones(1, 8, 8, dtype=DTYPE), atol=1e-12, rtol=0)
        assert float(offsets.abs().max()) <= 1.5

    def test_gradient_wrt_features(self, generator):
        od = OffsetDiversity(2, groups=2, max_residue_magnitude=0.5)
        perturb_zero_init(od, std=0.1)
        f = torch.randn(1, 2, 6, 6, generator=generator, dtype=DTYPE, requires_grad=True)
        v = _constant_flow(0.3, -0.2, 6, 6)
        errors = sampled_gradient_check(lambda: od(f, v).pow(2).sum(), [('f', f)], samples_per_tensor=8)
        assert errors['f'] < 1e-4

    def test_offset_head_receives_gradient(self, generator):
        od = OffsetDiversity(2, groups=2)
        perturb_zero_init(od, std=0.1)
        f = _smooth_field(8, 8)
        od(f, _constant_flow(0.3, 0.1, 8, 8)).pow(2).sum().backward()
        assert float(od.conv_offset[-1].weight.grad.abs().sum()) > 0


class TestMultiScaleRefine:
    def test_identity_at_init(self, generator):
        refine = MultiScaleRefine(4)
        c = torch.randn(1, 4, 8, 8, generator=generator, dtype=DTYPE)
        assert torch.equal(refine(c), c)

    def test_second_reference_static_scene(self, generator):
        refine = MultiScaleRefine(4)
        c_prev = torch.randn(1, 4, 8, 8, generator=generator, dtype=DTYPE)
        out = second_reference_context(c_prev, torch.zeros(1, 2, 8, 8, dtype=DTYPE), refine)
        torch.testing.assert_close(out, c_prev, atol=1e-12, rtol=0)

    def test_second_reference_unavailable(self):
        with pytest.raises(ReferenceUnavailable):
            second_reference_context(None, torch.zeros(1, 2, 8, 8, dtype=DTYPE), MultiScaleRefine(4))


class TestGroundTruthMotion:
    @staticmethod
    def _translation(velocity):
        return generate(SequenceSpec(kind='translation', height=32, width=32, frames=4, velocity=velocity))

    @pytest.mark.parametrize('velocity', [(1.0, 0.0), (0.5, 0.25), (2.5, -1.5)])
    def test_flow_warps_previous_frame(self, velocity):
        sequence = self._translation(velocity)
        margin = 4
        for t in range(1, 4):
            warped = warp(sequence.frame(t - 1), sequence.flow(t))[..., margin:-margin, margin:-margin]
            assert psnr(warped, sequence.frame(t)[..., margin:-margin, margin:-margin]) > 40.0

    def test_warped_reused_context_aligns_better(self):
        sequence = self._translation((2.0, 1.0))
        # the context stored while coding frame 1 lives on frame 1's grid
        c_prev = sequence.frame(1)
        reused = second_reference_context(c_prev, sequence.flow(2), MultiScaleRefine(3))
        target = sequence.frame(2)

        def correlation(a):
            a, b = a[..., 4:-4, 4:-4].reshape(-1).detach().numpy(), target[..., 4:-4, 4:-4].reshape(-1).numpy()
            return float(np.corrcoef(a, b)[0, 1])

        assert correlation(reused) > correlation(c_prev)
        assert correlation(reused) > 0.99
