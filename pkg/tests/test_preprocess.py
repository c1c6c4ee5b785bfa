import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zsdfa import preprocess as P
from zsdfa.bench import render_face
from zsdfa.errors import ConfigError, ContractError

# SRM first-order*12 + second-order*6 + square, written out by hand
HAND_COMBINED = np.array([
    [-1, 2, -2, 2, -1],
    [2, -6, 8, -6, 2],
    [-2, 14, -36, 26, -2],
    [2, -6, 8, -6, 2],
    [-1, 2, -2, 2, -1],
])


def rgb(gray: np.ndarray) -> np.ndarray:
    return np.repeat(gray[..., None], 3, axis=2).astype(np.uint8)


class TestSobel:
    def test_constant(self):
        assert not P.sobel_edges(np.full((9, 9, 3), 77, np.uint8)).any()

    def test_vertical_step(self):
        g = np.zeros((8, 10), np.uint8)
        g[:, 5:] = 255
        e = P.sobel_edges(rgb(g))[0]
        # gx = (1+2+1) * 3*255 on the two columns next to the step, gy = 0
        expected = np.zeros((8, 10), np.float32)
        expected[:, 4:6] = np.float32(np.sqrt(3060.0 ** 2) / (3 * 4 * 255 * np.sqrt(2.0)))
        assert np.array_equal(e, expected)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31))
    def test_bounded(self, seed):
        img = np.random.default_rng(seed).integers(0, 256, (6, 7, 3), dtype=np.uint8)
        e = P.sobel_edges(img)
        assert e.shape == (1, 6, 7) and e.min() >= 0 and e.max() <= 1

    def test_checkerboard_max(self):
        g = (np.indices((6, 6)).sum(0) % 2 * 255).astype(np.uint8)
        assert P.sobel_edges(rgb(g)).max() <= 1.0

    def test_degenerate(self):
        with pytest.raises(ContractError):
            P.sobel_edges(np.zeros((2, 5, 3), np.uint8))


class TestRichestPatch:
    def test_noisy_tile_selected(self):
        img = np.full((64, 64, 3), 100, np.uint8)
        img[32:64, 0:32] = np.random.default_rng(0).integers(0, 256, (32, 32, 3))
        patch, origin = P.richest_patch(img, 32)
        assert origin == (32, 0) and np.array_equal(patch, img[32:, :32])

    def test_tie_break(self):
        assert P.richest_patch(np.zeros((64, 64, 3), np.uint8), 32)[1] == (0, 0)

    def test_too_large(self):
        with pytest.raises(ConfigError):
            P.richest_patch(np.zeros((16, 16, 3), np.uint8), 32)

    def test_tile_aligned(self):
        for seed in range(20):
            img, _ = render_face(seed, 64)
            for p in (16, 24, 32):
                r, c = P.richest_patch(img, p)[1]
                assert r % p == 0 and c % p == 0


class TestSRM:
    def test_constant(self):
        assert not P.srm_noise(np.full((8, 8, 3), 200, np.uint8)).any()

    def test_combined_stencil(self):
        assert np.array_equal(P.SRM_COMBINED, HAND_COMBINED)

    def test_impulse_per_kernel(self):
        x = np.zeros((9, 9, 3), np.uint8)
        x[4, 4] = 255
        res = P.srm_residuals(x)
        for (k, norm), r in zip(P.SRM_KERNELS, res):
            s = k.shape[0]
            o = 4 - s // 2
            window = r[0, o:o + s, o:o + s]
            assert np.array_equal(window, k[::-1, ::-1] / float(norm))
            assert np.count_nonzero(r[0]) == np.count_nonzero(k)

    def test_impulse_summed(self):
        x = np.zeros((9, 9, 3), np.uint8)
        x[4, 4] = 10
        out = P.srm_noise(x)
        expected = np.zeros((9, 9), np.float32)
        expected[2:7, 2:7] = (HAND_COMBINED[::-1, ::-1] * 10 / (12 * 255.0)).astype(np.float32)
        for ch in range(3):
            assert np.array_equal(out[ch], expected)

    def test_clamped(self):
        x = np.zeros((9, 9, 3), np.uint8)
        x[4, 4] = 255
        out = P.srm_noise(x)
        assert out.min() == -1.0 and out.max() <= 1.0

    def test_ramp_annihilated_by_second_order(self):
        ramp = (np.arange(12) * 7 + 3)[None, :].repeat(10, 0)
        second = P.srm_residuals(rgb(ramp))[1]
        assert not second[:, :, 1:-1].any()


@pytest.mark.parametrize("fn", [P.sobel_edges, P.srm_noise])
def test_translation_equivariance(fn):
    img, _ = render_face(8, 40)
    a = fn(img[:, :-1])
    b = fn(img[:, 1:])
    # away from the replicated borders the outputs are shifted copies
    assert np.array_equal(a[:, 3:-3, 4:-3], b[:, 3:-3, 3:-4])


class TestCorrupt:
    def test_severity_zero_identity(self):
        img, _ = render_face(2, 64)
        for kind in P.CORRUPTION_KINDS:
            out = P.corrupt(img, P.CorruptionSpec(kind, 0), 123)
            assert out.dtype == img.dtype and np.array_equal(out, img)

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            P.CorruptionSpec("jpeg", 1)
        with pytest.raises(ConfigError):
            P.CorruptionSpec("blur", 6)

    def test_noise_reproducible(self):
        img, _ = render_face(2, 64)
        spec = P.CorruptionSpec("gaussian_noise", 5)
        assert np.array_equal(P.corrupt(img, spec, 9), P.corrupt(img, spec, 9))

    def test_noise_energy_monotone(self):
        for seed in range(20):
            img, _ = render_face(seed, 64)
            energy = [np.sum((P.corrupt(img, P.CorruptionSpec("gaussian_noise", s), seed).astype(float)
                              - img) ** 2) for s in range(6)]
            assert all(a <= b for a, b in zip(energy, energy[1:]))

    def test_shapes_preserved(self):
        img, _ = render_face(2, 64)
        for kind in P.CORRUPTION_KINDS:
            for sev in range(1, 6):
                out = P.corrupt(img, P.CorruptionSpec(kind, sev), 1)
                assert out.shape == img.shape and out.dtype == np.uint8

    def test_custom_table(self):
        img, _ = render_face(2, 64)
        tables = dict(P.DEFAULT_SEVERITY_TABLES, saturation=[1, 1, 1, 1, 1, 1])
        assert np.array_equal(P.corrupt(img, P.CorruptionSpec("saturation", 3), 0, tables), img)


def test_views_shapes():
    img, parsing = render_face(1, 64)
    a, e, n = P.views(img, 32)
    assert a.shape == (3, 64, 64) and e.shape == (1, 64, 64) and n.shape == (3, 32, 32)
    oh = P.parsing_onehot(parsing)
    assert oh.shape == (7, 64, 64) and np.all(oh.sum(0) == 1)
