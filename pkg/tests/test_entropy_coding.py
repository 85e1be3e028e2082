import math

import numpy as np
import pytest
import torch

from src.compression.bitstream import (FRAME_INTER, FRAME_INTRA, Container, FramePayload, load_bitstream,
                                       read_container, save_bitstream, write_container)
from src.compression.entropy_model import (SIGMA_MIN, GaussianConditional, alphabet_extent, clamp_scales,
                                           likelihood, quantize, rate_estimate)
from src.compression.range_coder import (TOTAL, RangeDecoder, RangeEncoder, check_cdf, pmf_to_quantized_cdf,
                                         range_decode, range_encode)
from src.utilities.exceptions import BitstreamError, DimensionError, ResultsIOError
from src.utilities.tensor_ops import DTYPE

UNIFORM_256 = np.arange(257, dtype=np.int64) * 256


def _random_tables(rng, count, max_alphabet=20):
    sizes = rng.integers(1, max_alphabet + 1, size=count)
    return [pmf_to_quantized_cdf(rng.dirichlet(np.full(n, 0.5)))[0] for n in sizes]


def _round_trip(rng, count):
    cdfs = _random_tables(rng, count)
    symbols = [int(rng.integers(0, len(c) - 1)) for c in cdfs]
    assert range_decode(range_encode(symbols, cdfs), cdfs) == symbols


class TestQuantizedCdf:
    def test_tables_are_valid(self, rng):
        pmf = rng.dirichlet(np.ones(12), size=50)
        pmf[:, 3] = 0.0
        cdf = pmf_to_quantized_cdf(pmf)
        assert cdf.shape == (50, 13)
        assert bool((cdf[:, -1] == TOTAL).all())
        for row in cdf:
            check_cdf(row)

    def test_non_increasing_rejected(self):
        with pytest.raises(ValueError):
            check_cdf(np.array([0, 10, 10, 65536]))


class TestRangeCoder:
    def test_round_trip(self, rng):
        for _ in range(20):
            _round_trip(rng, 500)

    @pytest.mark.slow
    def test_round_trip_million_symbols(self, rng):
        for _ in range(1000):
            _round_trip(rng, 1000)

    def test_uniform_source_costs_eight_bits(self, rng):
        symbols = rng.integers(0, 256, size=100_000).tolist()
        cdfs = [UNIFORM_256] * len(symbols)
        data = range_encode(symbols, cdfs)
        assert abs(8 * len(data) - 800_000) <= 0.02 * 800_000
        assert range_decode(data, cdfs) == symbols

    def test_single_symbol_alphabet(self):
        cdf = np.array([0, TOTAL])
        data = range_encode([0] * 1000, [cdf] * 1000)
        assert 8 * len(data) <= 64
        assert range_decode(data, [cdf] * 1000) == [0] * 1000

    def test_literals(self):
        encoder = RangeEncoder()
        values = [(5, 3), (0, 1), (40000, 16), (1, 1)]
        for value, bits in values:
            encoder.encode_literal(value, bits)
        decoder = RangeDecoder(encoder.finish())
        assert [decoder.decode_literal(bits) for _, bits in values] == [v for v, _ in values]
        decoder.finish()

    def test_truncated_stream(self, rng):
        cdfs = _random_tables(rng, 200)
        symbols = [int(rng.integers(0, len(c) - 1)) for c in cdfs]
        data = range_encode(symbols, cdfs)
        with pytest.raises(BitstreamError):
            range_decode(data[:-1], cdfs)

    def test_trailing_bytes(self, rng):
        cdfs = _random_tables(rng, 200)
        symbols = [int(rng.integers(0, len(c) - 1)) for c in cdfs]
        with pytest.raises(BitstreamError):
            range_decode(range_encode(symbols, cdfs) + b'\x00', cdfs)

    def test_symbol_outside_alphabet(self):
        with pytest.raises(ValueError):
            range_encode([4], [np.array([0, 100, TOTAL])])


class TestQuantize:
    def test_mean_maps_to_zero_symbol(self, generator):
        mu = torch.randn(2, 3, generator=generator, dtype=DTYPE)
        y_hat = quantize(mu.clone(), 'eval', mu)
        np.testing.assert_array_equal(GaussianConditional.symbols(y_hat, mu), np.zeros(6, dtype=np.int64))
        torch.testing.assert_close(y_hat, mu)

    def test_eval_idempotent(self, generator):
        y = 5 * torch.randn(100, generator=generator, dtype=DTYPE)
        mu = torch.randn(100, generator=generator, dtype=DTYPE)
        once = quantize(y, 'eval', mu)
        torch.testing.assert_close(quantize(once, 'eval', mu), once, atol=1e-12, rtol=0)

    def test_train_noise_is_seeded_and_bounded(self, generator):
        y = torch.randn(1000, generator=generator, dtype=DTYPE)
        a = quantize(y, 'train', generator=torch.Generator().manual_seed(3))
        b = quantize(y, 'train', generator=torch.Generator().manual_seed(3))
        assert torch.equal(a, b)
        assert float((a - y).abs().max()) <= 0.5

    def test_invalid_mode(self):
        with pytest.raises(ValueError):
            quantize(torch.zeros(1, dtype=DTYPE), 'stochastic')


class TestRateEstimate:
    def test_concentrated_mass(self):
        bits = rate_estimate(torch.zeros(1, dtype=DTYPE), torch.zeros(1, dtype=DTYPE),
                             torch.full((1,), 0.1, dtype=DTYPE)).item()
        tail = math.erfc(5 / math.sqrt(2))
        assert bits == pytest.approx(-math.log2(1 - tail), rel=1e-3)
        assert bits == pytest.approx(8.3e-7, rel=0.01)

    def test_monotone_in_scale(self):
        sigmas = torch.logspace(-1, 2, 40, dtype=DTYPE)
        zeros = torch.zeros_like(sigmas)
        bits = -torch.log2(likelihood(zeros, zeros, sigmas))
        assert bool((torch.diff(bits) > 0).all())
        # the zero symbol costs -log2 of the peak density once sigma is large
        assert bits[-1].item() == pytest.approx(math.log2(100.0 * math.sqrt(2 * math.pi)), abs=0.01)
        # below the differential entropy log2(sigma * sqrt(2 pi e)) of the whole distribution
        assert math.log2(100.0 * math.sqrt(2 * math.pi * math.e)) > bits[-1].item()

    def test_scale_below_floor(self):
        with pytest.raises(ValueError):
            rate_estimate(torch.zeros(1, dtype=DTYPE), torch.zeros(1, dtype=DTYPE), torch.full((1,), 0.01, dtype=DTYPE))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            rate_estimate(torch.zeros(2, dtype=DTYPE), torch.zeros(3, dtype=DTYPE), torch.ones(3, dtype=DTYPE))

    def test_gradient(self, generator):
        y_hat = torch.round(2 * torch.randn(8, generator=generator, dtype=DTYPE)).clamp(-4, 4).requires_grad_(True)
        mu = (torch.rand(8, generator=generator, dtype=DTYPE) * 0.8 + 0.1).requires_grad_(True)
        sigma = (torch.rand(8, generator=generator, dtype=DTYPE) * 1.5 + 1.0).requires_grad_(True)
        assert torch.autograd.gradcheck(rate_estimate, (y_hat, mu, sigma))

    def test_clamp_scales(self):
        sigma = clamp_scales(torch.tensor([-20.0, 0.0, 5.0], dtype=DTYPE))
        assert float(sigma.min()) == SIGMA_MIN


class TestGaussianConditional:
    def test_round_trip_with_escapes(self, generator):
        mu = torch.randn(1, 4, 6, 6, generator=generator, dtype=DTYPE)
        sigma = torch.rand(1, 4, 6, 6, generator=generator, dtype=DTYPE) * 3 + SIGMA_MIN
        y = mu + sigma * torch.randn(1, 4, 6, 6, generator=generator, dtype=DTYPE)
        y[0, 0, 0, 0] = mu[0, 0, 0, 0] + 500.0
        y[0, 1, 2, 3] = mu[0, 1, 2, 3] - 70000.0
        model = GaussianConditional()
        y_hat = quantize(y, 'eval', mu)
        decoded = model.decompress(model.compress(y_hat, mu, sigma), mu, sigma)
        assert torch.equal(decoded, y_hat)

    def test_alphabet_extent(self):
        np.testing.assert_array_equal(alphabet_extent(np.array([0.04, 0.5, 2.0, 100.0])), [1, 3, 12, 64])

    def test_zero_latent_costs_only_overhead(self):
        shape = (1, 4, 16, 16)
        mu = torch.zeros(shape, dtype=DTYPE)
        sigma = torch.full(shape, SIGMA_MIN, dtype=DTYPE)
        data = GaussianConditional().compress(mu.clone(), mu, sigma)
        assert 8 * len(data) <= 64 + 8

    def test_actual_bits_track_estimate(self, generator):
        shape = (1, 10, 100, 100)
        mu = torch.randn(shape, generator=generator, dtype=DTYPE)
        sigma = torch.rand(shape, generator=generator, dtype=DTYPE) * 3.5 + 0.5
        y_hat = quantize(mu + sigma * torch.randn(shape, generator=generator, dtype=DTYPE), 'eval', mu)
        estimated = rate_estimate(y_hat, mu, sigma).item()
        actual = 8 * len(GaussianConditional().compress(y_hat, mu, sigma))
        assert abs(actual - estimated) <= 0.02 * estimated


class TestContainer:
    def _container(self):
        return Container(32, 48, [FramePayload(FRAME_INTRA, b'\x01\x02\x03'), FramePayload(FRAME_INTER, b''),
                                  FramePayload(FRAME_INTER, bytes(range(200)))])

    def test_round_trip(self, tmp_path):
        container = self._container()
        data = write_container(container)
        assert read_container(data) == container
        assert container.total_bits() == 8 * len(data)
        save_bitstream(tmp_path / 'seq.nlvc', container)
        assert load_bitstream(tmp_path / 'seq.nlvc') == container

    def test_bad_magic(self):
        data = bytearray(write_container(self._container()))
        data[0:4] = b'XXXX'
        with pytest.raises(BitstreamError):
            read_container(bytes(data))

    def test_truncated(self):
        data = write_container(self._container())
        with pytest.raises(BitstreamError):
            read_container(data[:-5])

    def test_trailing_bytes(self):
        with pytest.raises(BitstreamError):
            read_container(write_container(self._container()) + b'\x00')

    def test_unknown_frame_type(self):
        with pytest.raises(BitstreamError):
            FramePayload.from_bytes(b'\x07abc')

    def test_missing_file(self, tmp_path):
        with pytest.raises(ResultsIOError):
            load_bitstream(tmp_path / 'missing.nlvc')
