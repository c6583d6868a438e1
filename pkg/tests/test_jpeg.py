import numpy as np
import pytest
import torch

from rstego import core
from rstego.attacks import jpeg

from conftest import natural_images


def matrix_dct_oracle(blocks: np.ndarray) -> np.ndarray:
    """Direct 64x64 matrix-multiplication 2-D DCT (independent of the
    einsum-based implementation): flatten each 8x8 block, multiply once."""
    k = np.arange(8)[:, None]
    j = np.arange(8)[None, :]
    d = np.sqrt(2.0 / 8.0) * np.cos((2 * j + 1) * k * np.pi / 16.0)
    d[0, :] = 1.0 / np.sqrt(8.0)
    big = np.kron(d, d)  # [64, 64], row-major over (freq_i, freq_j)
    flat = blocks.reshape(-1, 64)
    return (flat @ big.T).reshape(blocks.shape)


def numpy_jpeg_round_mirror(x: torch.Tensor, qf: int) -> np.ndarray:
    """Full-precision numpy mirror of the rounding simulator's forward pass."""
    arr = x.double().numpy()
    px = (arr + 1.0) * 127.5
    ycc = np.einsum("ij,bjhw->bihw", jpeg._RGB_TO_YCC, px)
    ycc[:, 0] -= 127.5
    b, c, h, w = ycc.shape
    blocks = (ycc.reshape(b, c, h // 8, 8, w // 8, 8)
                 .transpose(0, 1, 2, 4, 3, 5).reshape(b, c, -1, 8, 8))
    k = np.arange(8)[:, None]
    j = np.arange(8)[None, :]
    d = np.sqrt(2.0 / 8.0) * np.cos((2 * j + 1) * k * np.pi / 16.0)
    d[0, :] = 1.0 / np.sqrt(8.0)
    coeffs = np.einsum("ij,bcnjk,lk->bcnil", d, blocks, d)
    luma = jpeg.scaled_quant_table(jpeg.QUANT_TABLE_LUMA, qf)
    chroma = jpeg.scaled_quant_table(jpeg.QUANT_TABLE_CHROMA, qf)
    q = np.stack([luma, chroma, chroma]).reshape(1, 3, 1, 8, 8)
    coeffs = np.round(coeffs / q) * q
    pixels = np.einsum("ji,bcnjk,kl->bcnil", d, coeffs, d)
    planes = (pixels.reshape(b, c, h // 8, w // 8, 8, 8)
                    .transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w))
    planes[:, 0] += 127.5
    rgb = np.einsum("ij,bjhw->bihw", jpeg._YCC_TO_RGB, planes)
    return np.clip(rgb / 127.5 - 1.0, -1.0, 1.0)


class TestDct:
    def test_constant_block_dc_only(self):
        for value in (0.5, -0.3, 1.0):
            x = torch.full((1, 1, 8, 8), value, dtype=torch.float64)
            coeffs = jpeg.dct_8x8(x)
            assert coeffs[0, 0, 0, 0].item() == pytest.approx(8.0 * value, abs=1e-12)
            ac = coeffs.clone()
            ac[0, 0, 0, 0] = 0.0
            assert ac.abs().max().item() < 1e-12

    def test_round_trip(self):
        rng = torch.Generator().manual_seed(0)
        x = torch.rand((2, 3, 40, 40), generator=rng, dtype=torch.float64) * 2 - 1
        back = jpeg.idct_8x8(jpeg.dct_8x8(x))
        assert (back - x).abs().max().item() < 1e-5

    def test_matches_matrix_oracle_and_preserves_energy(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, size=(1, 3, 32, 32))
        coeffs = jpeg.dct_8x8(torch.from_numpy(x)).numpy()
        blocks = (x.reshape(1, 3, 4, 8, 4, 8).transpose(0, 1, 2, 4, 3, 5))
        expected = matrix_dct_oracle(blocks)
        got = coeffs.reshape(1, 3, 4, 8, 4, 8).transpose(0, 1, 2, 4, 3, 5)
        assert np.abs(got - expected).max() < 1e-10
        energy_in = np.linalg.norm(x)
        energy_out = np.linalg.norm(coeffs)
        assert abs(energy_in - energy_out) / energy_in < 1e-5

    def test_rejects_non_multiple_of_eight(self):
        with pytest.raises(ValueError):
            jpeg.dct_8x8(torch.zeros(1, 3, 12, 12))

    def test_linear_in_input(self):
        rng = torch.Generator().manual_seed(2)
        a = torch.rand((1, 3, 16, 16), generator=rng, dtype=torch.float64)
        b = torch.rand((1, 3, 16, 16), generator=rng, dtype=torch.float64)
        lhs = jpeg.dct_8x8(2.5 * a - 0.5 * b)
        rhs = 2.5 * jpeg.dct_8x8(a) - 0.5 * jpeg.dct_8x8(b)
        assert (lhs - rhs).abs().max().item() < 1e-12


class TestJpegMask:
    def test_constant_image_invariant(self):
        x = torch.full((1, 3, 16, 16), 0.25, dtype=torch.float64)
        for qf in (10, 50, 90):
            out = jpeg.jpeg_mask(x, qf)
            assert (out - x).abs().max().item() < 1e-9

    def test_full_quality_is_identity(self):
        rng = torch.Generator().manual_seed(3)
        x = torch.rand((1, 3, 24, 24), generator=rng, dtype=torch.float64) * 1.6 - 0.8
        out = jpeg.jpeg_mask(x, 100)
        assert (out - x).abs().max().item() < 1e-5

    def test_retained_counts_monotone(self):
        previous = (0, 0)
        for qf in range(10, 101):
            counts = jpeg.mask_retained_counts(qf)
            assert counts >= previous
            previous = counts
        assert jpeg.mask_retained_counts(100) == (64, 64)

    def test_checkerboard_collapses_to_block_mean(self):
        # A period-2 checkerboard has all its energy in the highest spatial
        # frequency; at qf=10 the mask keeps only low frequencies, so each
        # block collapses to its mean. Verified against a from-scratch numpy
        # reconstruction using the matrix DCT oracle.
        side = 16
        pattern = torch.zeros(1, 3, side, side, dtype=torch.float64)
        for i in range(side):
            for j in range(side):
                pattern[0, :, i, j] = 0.4 if (i + j) % 2 == 0 else -0.2
        out = jpeg.jpeg_mask(pattern, 10)
        # the checkerboard has its luma energy on odd-odd coefficient pairs;
        # the low-frequency mask wipes all but a faint (1,1) ripple, so the
        # output sits near the block mean (deviation < 10% of the amplitude)
        block_mean = pattern.mean().item()  # every block has the same mean
        amplitude = 0.3
        assert (out - block_mean).abs().max().item() < 0.1 * amplitude

        # exact expectation from an independent numpy reconstruction
        arr = pattern.numpy()
        px = (arr + 1.0) * 127.5
        ycc = np.einsum("ij,bjhw->bihw", jpeg._RGB_TO_YCC, px)
        ycc[:, 0] -= 127.5
        blocks = (ycc.reshape(1, 3, 2, 8, 2, 8).transpose(0, 1, 2, 4, 3, 5))
        coeffs = matrix_dct_oracle(blocks)
        keep_luma, keep_chroma = jpeg.mask_retained_counts(10)
        order = jpeg._zigzag_order()
        mask = np.zeros((3, 8, 8))
        for idx in range(keep_luma):
            mask[0][order[idx]] = 1.0
        for idx in range(keep_chroma):
            mask[1][order[idx]] = 1.0
            mask[2][order[idx]] = 1.0
        masked = coeffs * mask[None, :, None, None]
        k = np.arange(8)[:, None]
        j = np.arange(8)[None, :]
        d = np.sqrt(2.0 / 8.0) * np.cos((2 * j + 1) * k * np.pi / 16.0)
        d[0, :] = 1.0 / np.sqrt(8.0)
        pixels = np.einsum("ji,bcnmjk,kl->bcnmil", d, masked, d)
        planes = pixels.transpose(0, 1, 2, 4, 3, 5).reshape(1, 3, 16, 16)
        planes[:, 0] += 127.5
        rgb = np.einsum("ij,bjhw->bihw", jpeg._YCC_TO_RGB, planes)
        expected = np.clip(rgb / 127.5 - 1.0, -1, 1)
        assert np.abs(out.numpy() - expected).max() < 1e-9


class TestJpegSoft:
    def test_lattice_points_are_fixed(self):
        values = torch.tensor([-3.0, -1.0, 0.0, 1.0, 2.0, 7.0], dtype=torch.float64)
        assert torch.equal(jpeg.soft_round(values), values)

    def test_soft_round_stays_within_half_step(self):
        v = torch.linspace(-4, 4, 1001, dtype=torch.float64)
        assert (jpeg.soft_round(v) - v).abs().max().item() <= 0.375 + 1e-12

    def test_high_quality_stays_faithful(self, natural_corpus):
        # threshold derived from the real codec: qf=100 keeps natural images
        # above 40 dB, and the soft simulator must too
        for index in range(natural_corpus.shape[0]):
            x = natural_corpus[index:index + 1].double()
            assert core.psnr(x, jpeg.real_jpeg(x, 100)) >= 40.0
            assert core.psnr(x, jpeg.jpeg_soft(x, 100)) >= 40.0


class TestJpegRound:
    def test_quantize_dequantize_bit_matches_integer_oracle(self):
        rng = np.random.default_rng(4)
        coeffs = rng.uniform(-300, 300, size=(5, 3, 7, 8, 8))
        for qf in (10, 50, 90):
            luma = jpeg.scaled_quant_table(jpeg.QUANT_TABLE_LUMA, qf)
            chroma = jpeg.scaled_quant_table(jpeg.QUANT_TABLE_CHROMA, qf)
            q = np.stack([luma, chroma, chroma]).reshape(1, 3, 1, 8, 8)
            ours = (jpeg.straight_through_round(torch.from_numpy(coeffs / q))
                    * torch.from_numpy(q)).numpy()
            oracle = np.round(coeffs / q) * q
            assert np.array_equal(ours, oracle)

    def test_forward_matches_numpy_mirror(self):
        rng = torch.Generator().manual_seed(5)
        x = torch.rand((1, 3, 16, 16), generator=rng, dtype=torch.float64) * 1.6 - 0.8
        for qf in (30, 70):
            ours = jpeg.jpeg_round(x, qf).numpy()
            mirror = numpy_jpeg_round_mirror(x, qf)
            assert np.abs(ours - mirror).max() < 1e-9

    def test_quality_ordering_on_natural_image(self, natural_corpus):
        x = natural_corpus[0:1].double()
        assert core.psnr(x, jpeg.jpeg_round(x, 10)) < core.psnr(x, jpeg.jpeg_round(x, 90))

    def test_zero_image_is_fixed_point(self):
        x = torch.zeros(1, 3, 16, 16, dtype=torch.float64)
        for qf in (10, 50, 90):
            assert jpeg.jpeg_round(x, qf).abs().max().item() < 1e-9


class TestMonotoneDegradation:
    def test_all_simulators_and_codec(self, natural_corpus):
        qfs = (10, 30, 50, 70, 90)
        sims = {"mask": jpeg.jpeg_mask, "soft": jpeg.jpeg_soft,
                "round": jpeg.jpeg_round, "codec": jpeg.real_jpeg}
        for index in range(3):
            x = natural_corpus[index:index + 1].double()
            for name, sim in sims.items():
                series = [core.psnr(x, sim(x, qf)) for qf in qfs]
                assert all(a <= b + 1e-9 for a, b in zip(series, series[1:])), \
                    f"{name} not monotone on image {index}: {series}"


class TestMixup:
    def test_one_hot_reproduces_simulator_bit_exactly(self):
        rng = torch.Generator().manual_seed(6)
        x = torch.rand((1, 3, 16, 16), generator=rng) * 1.6 - 0.8
        out = jpeg.jpeg_mixup(x, [("mask", 90, 1.0), ("soft", 50, 0.0)])
        assert torch.equal(out, jpeg.jpeg_mask(x, 90))

    def test_duplicate_half_weights_degenerate(self):
        rng = torch.Generator().manual_seed(7)
        x = torch.rand((1, 3, 16, 16), generator=rng) * 1.6 - 0.8
        out = jpeg.jpeg_mixup(x, [("round", 50, 0.5), ("round", 50, 0.5)])
        assert torch.equal(out, jpeg.jpeg_round(x, 50))

    def test_two_branch_mix_is_pixelwise_mean(self):
        rng = torch.Generator().manual_seed(8)
        x = torch.rand((1, 3, 16, 16), generator=rng) * 1.6 - 0.8
        out = jpeg.jpeg_mixup(x, [("mask", 50, 0.5), ("round", 50, 0.5)])
        expected = 0.5 * jpeg.jpeg_mask(x, 50) + 0.5 * jpeg.jpeg_round(x, 50)
        assert (out - expected).abs().max().item() < 1e-6

    def test_linear_in_weights(self):
        # moving mass delta from one branch to another shifts the output by
        # exactly delta times the branch difference
        rng = torch.Generator().manual_seed(9)
        x = (torch.rand((1, 3, 16, 16), generator=rng, dtype=torch.float64) * 1.6 - 0.8)
        delta = 0.25
        base = jpeg.jpeg_mixup(x, [("mask", 50, 0.5), ("soft", 70, 0.5)])
        moved = jpeg.jpeg_mixup(x, [("mask", 50, 0.5 - delta), ("soft", 70, 0.5 + delta)])
        branch_diff = jpeg.jpeg_soft(x, 70) - jpeg.jpeg_mask(x, 50)
        assert ((moved - base) - delta * branch_diff).abs().max().item() < 1e-12

    def test_weights_must_sum_to_one(self):
        x = torch.zeros(1, 3, 8, 8)
        with pytest.raises(ValueError):
            jpeg.jpeg_mixup(x, [("mask", 50, 0.5), ("soft", 50, 0.4)])

    def test_negative_weight_rejected(self):
        x = torch.zeros(1, 3, 8, 8)
        with pytest.raises(ValueError):
            jpeg.jpeg_mixup(x, [("mask", 50, 1.5), ("soft", 50, -0.5)])


class TestRealJpeg:
    def test_shape_and_range(self):
        rng = torch.Generator().manual_seed(10)
        x = torch.rand((2, 3, 24, 24), generator=rng) * 2 - 1
        out = jpeg.real_jpeg(x, 70)
        assert out.shape == x.shape
        assert out.min().item() >= -1.0 and out.max().item() <= 1.0

    def test_constant_image_survives(self):
        # mid-gray is a quantizer fixed point at every quality; other
        # constants pick up DC quantization error at harsh qualities (the
        # codec oracle measures ~34 dB for 0.2 at qf=10), so the blanket
        # threshold is asserted at the fixed point only
        mid = torch.zeros(1, 3, 32, 32)
        for qf in (10, 50, 90):
            assert core.psnr(mid, jpeg.real_jpeg(mid, qf)) >= 50.0
        x = torch.full((1, 3, 32, 32), 0.2)
        assert core.psnr(x, jpeg.real_jpeg(x, 90)) >= 50.0

    def test_range_invariant_after_simulators(self, natural_corpus):
        x = natural_corpus[:2].double()
        for sim in (jpeg.jpeg_mask, jpeg.jpeg_soft, jpeg.jpeg_round):
            out = sim(x, 30)
            assert out.min().item() >= -1.0 and out.max().item() <= 1.0
