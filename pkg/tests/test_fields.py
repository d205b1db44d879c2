import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from longalign.fields import (
    AffineParams,
    affine_to_dense,
    batch_ncc,
    compose,
    identity_grid,
    jacobian_det,
    jd_penalty,
    load_field,
    ncc,
    njd_percent,
    resize_flow,
    save_field,
    smoothness_penalty,
    warp,
)

from conftest import gradient_check, smooth_field


def translation(h, w, dr, dc, dtype=torch.float32):
    d = torch.zeros(2, h, w, dtype=dtype)
    d[0] = dr
    d[1] = dc
    return d


def ramp_probe(h, w, rng, slope_scale=0.2):
    """Near-linear probe image: exact under bilinear resampling up to a small
    smooth perturbation, so composition tests isolate field errors."""
    a, b = rng.uniform(-slope_scale, slope_scale, size=2)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float32)
    bump = 0.05 * np.sin(2 * np.pi * rr / (2 * h)) * np.sin(2 * np.pi * cc / (2 * w))
    return torch.tensor(a * rr + b * cc + bump, dtype=torch.float32).unsqueeze(0)


class TestAffineToDense:
    def test_identity_gives_zero_field(self):
        d = affine_to_dense(AffineParams.identity(), 12, 10)
        assert torch.all(d == 0)

    def test_pure_translation_is_constant(self):
        p = AffineParams(torch.eye(2), torch.tensor([3.0, -2.0]))
        d = affine_to_dense(p, 7, 9)
        assert torch.allclose(d[0], torch.full((7, 9), 3.0))
        assert torch.allclose(d[1], torch.full((7, 9), -2.0))

    def test_anisotropic_scaling_at_known_pixel(self):
        # A = diag(1.1, 1.0) about c=(4,4): disp(8,4) = (0.1*(8-4), 0) = (0.4, 0)
        p = AffineParams(torch.diag(torch.tensor([1.1, 1.0])), torch.zeros(2))
        d = affine_to_dense(p, 9, 9)
        assert torch.allclose(d[:, 8, 4], torch.tensor([0.4, 0.0]), atol=1e-6)


class TestWarp:
    def test_zero_field_is_identity(self):
        rng = np.random.default_rng(0)
        img = torch.tensor(rng.uniform(size=(3, 14, 11)), dtype=torch.float32)
        out = warp(img, torch.zeros(2, 14, 11))
        assert float((out - img).abs().max()) < 1e-6

    def test_integer_shift_of_ramp(self):
        img = torch.arange(10.0).repeat(8, 1).unsqueeze(0)  # I(r,c) = c
        out = warp(img, translation(8, 10, 0.0, 1.0))
        assert torch.allclose(out[0, :, :-1], img[0, :, :-1] + 1.0, atol=1e-5)

    def test_half_pixel_shift_of_ramp(self):
        img = torch.arange(10.0).repeat(8, 1).unsqueeze(0)
        out = warp(img, translation(8, 10, 0.0, 0.5))
        assert torch.allclose(out[0, :, :-1], img[0, :, :-1] + 0.5, atol=1e-5)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            warp(torch.zeros(1, 8, 8), torch.zeros(2, 8, 9))


class TestCompose:
    def test_zero_is_identity_element(self):
        rng = np.random.default_rng(1)
        phi = smooth_field(12, 12, 2.0, rng, dtype=torch.float32)
        zero = torch.zeros_like(phi)
        assert torch.allclose(compose(zero, phi), phi, atol=1e-6)
        assert torch.allclose(compose(phi, zero), phi, atol=1e-6)

    def test_translations_add(self):
        a = translation(9, 9, 1.0, 2.0)
        b = translation(9, 9, 0.5, -1.0)
        c = compose(a, b)
        assert torch.allclose(c[0], torch.full((9, 9), 1.5), atol=1e-6)
        assert torch.allclose(c[1], torch.full((9, 9), 1.0), atol=1e-6)

    def test_matches_two_step_warping(self):
        # Warping once by the composite must match warping twice in sequence.
        # The probe must be bilinear-exact (a ramp), otherwise the comparison
        # measures interpolation smoothing rather than composition.
        rng = np.random.default_rng(2)
        h = w = 64
        outer = smooth_field(h, w, 1.5, rng, wavelength=2 * h, dtype=torch.float32)
        inner = smooth_field(h, w, 1.5, rng, wavelength=2 * h, dtype=torch.float32)
        probe = ramp_probe(h, w, rng)
        once = warp(probe, compose(outer, inner))
        twice = warp(warp(probe, outer), inner)
        margin = 5
        diff = (once - twice)[0, margin:-margin, margin:-margin].abs().max()
        assert float(diff) < 1e-4


class TestJacobianDet:
    def test_zero_field_gives_ones(self):
        det = jacobian_det(torch.zeros(2, 10, 10))
        assert torch.allclose(det, torch.ones(10, 10), atol=1e-6)

    def test_isotropic_scaling(self):
        s = 1.3
        p = AffineParams(torch.diag(torch.tensor([s, s])), torch.zeros(2))
        det = jacobian_det(affine_to_dense(p, 16, 16))
        assert torch.allclose(det[1:-1, 1:-1], torch.full((14, 14), s * s), atol=1e-5)

    def test_analytic_sinusoid_oracle(self):
        # separable field: det = (1 + a w1 cos(w1 r)) (1 + b w2 cos(w2 c))
        h = w = 40
        a, b, w1, w2 = 1.5, 1.2, 0.1, 0.12
        rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
        disp = np.stack([a * np.sin(w1 * rr), b * np.sin(w2 * cc)])
        expected = (1 + a * w1 * np.cos(w1 * rr)) * (1 + b * w2 * np.cos(w2 * cc))
        det = jacobian_det(torch.tensor(disp)).numpy()
        assert np.abs(det - expected)[1:-1, 1:-1].max() < 1e-3

    def test_analytic_shear_oracle(self):
        # disp0 = a sin(w1 r + w3 c), disp1 = 0: det = 1 + a w1 cos(w1 r + w3 c)
        h = w = 40
        a, w1, w3 = 1.5, 0.1, 0.08
        rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
        disp = np.stack([a * np.sin(w1 * rr + w3 * cc), np.zeros((h, w))])
        expected = 1 + a * w1 * np.cos(w1 * rr + w3 * cc)
        det = jacobian_det(torch.tensor(disp)).numpy()
        assert np.abs(det - expected)[1:-1, 1:-1].max() < 1e-3


class TestNjdAndPenalties:
    def test_zero_field(self):
        zero = torch.zeros(2, 12, 12)
        assert njd_percent(zero) == 0.0
        assert float(jd_penalty(zero)) == 0.0
        assert float(smoothness_penalty(zero)) == 0.0

    def test_row_reflection_folds_everywhere(self):
        # disp0(r, c) = -2r maps r -> -r: det = -1 at every pixel
        h, w = 12, 10
        disp = torch.zeros(2, h, w)
        disp[0] = -2.0 * torch.arange(h, dtype=torch.float32).view(-1, 1)
        det = jacobian_det(disp)
        assert torch.allclose(det, torch.full((h, w), -1.0), atol=1e-5)
        assert njd_percent(disp) == 100.0
        # hinge penalty equals mean of squared negative part
        assert float(jd_penalty(disp)) == pytest.approx(1.0, abs=1e-5)

    def test_constant_field_has_zero_smoothness(self):
        assert float(smoothness_penalty(translation(9, 9, 4.0, -3.0))) == 0.0

    def test_ramp_smoothness_matches_hand_oracle(self):
        h, w, g = 6, 8, 3.0
        disp = torch.zeros(2, h, w)
        disp[0] = g * torch.arange(h, dtype=torch.float32).view(-1, 1)
        # forward differences: (h-1)*w row-gradients of size g, borders zero
        expected = g * g * (h - 1) * w / (h * w)
        assert float(smoothness_penalty(disp)) == pytest.approx(expected, rel=1e-6)

    def test_jd_penalty_matches_direct_evaluation(self):
        rng = np.random.default_rng(3)
        disp = smooth_field(20, 20, 6.0, rng, wavelength=10.0)
        det = jacobian_det(disp)
        expected = float((np.minimum(det.numpy(), 0.0) ** 2).mean())
        assert float(jd_penalty(disp)) == pytest.approx(expected, rel=1e-6)

    def test_njd_zero_iff_jd_penalty_zero(self):
        rng = np.random.default_rng(4)
        for i in range(20):
            disp = smooth_field(16, 16, rng.uniform(0.5, 8.0), rng, wavelength=rng.uniform(6, 30))
            njd = njd_percent(disp)
            pen = float(jd_penalty(disp))
            assert 0.0 <= njd <= 100.0
            assert (njd == 0.0) == (pen == 0.0)


class TestNcc:
    def test_self_correlation(self):
        x = torch.tensor(np.random.default_rng(5).uniform(size=(2, 9, 9)), dtype=torch.float32)
        assert float(ncc(x, x)) == pytest.approx(1.0, abs=1e-6)
        assert float(ncc(x, -x)) == pytest.approx(-1.0, abs=1e-6)

    def test_zero_variance_convention(self):
        x = torch.tensor(np.random.default_rng(6).uniform(size=(9, 9)), dtype=torch.float32)
        assert float(ncc(x, torch.ones(9, 9))) == 0.0
        assert float(ncc(torch.ones(9, 9), x)) == 0.0

    @given(
        alpha=st.floats(min_value=0.05, max_value=20.0),
        beta=st.floats(min_value=-5.0, max_value=5.0),
        seed=st.integers(min_value=0, max_value=10_000),
    )
    def test_invariance_under_positive_rescaling(self, alpha, beta, seed):
        rng = np.random.default_rng(seed)
        a = torch.tensor(rng.uniform(size=(8, 8)), dtype=torch.float64)
        b = torch.tensor(rng.uniform(size=(8, 8)), dtype=torch.float64)
        assert float(ncc(alpha * a + beta, b)) == pytest.approx(float(ncc(a, b)), abs=1e-6)

    def test_windowed_variant(self):
        x = torch.tensor(np.random.default_rng(7).uniform(size=(1, 16, 16)), dtype=torch.float32)
        assert float(ncc(x, x, window=4)) == pytest.approx(1.0, abs=1e-5)

    def test_batch_ncc_matches_per_sample(self):
        rng = np.random.default_rng(8)
        a = torch.tensor(rng.uniform(size=(3, 1, 6, 6)), dtype=torch.float64)
        b = torch.tensor(rng.uniform(size=(3, 1, 6, 6)), dtype=torch.float64)
        per = batch_ncc(a, b)
        for i in range(3):
            assert float(per[i]) == pytest.approx(float(ncc(a[i], b[i])), abs=1e-9)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            ncc(torch.zeros(3, 3), torch.zeros(4, 3))


class TestProperties:
    @given(seed=st.integers(min_value=0, max_value=10_000))
    def test_warp_identity_property(self, seed):
        rng = np.random.default_rng(seed)
        h, w = int(rng.integers(4, 24)), int(rng.integers(4, 24))
        img = torch.tensor(rng.uniform(size=(1, h, w)), dtype=torch.float32)
        out = warp(img, torch.zeros(2, h, w))
        assert float((out - img).abs().max()) < 1e-6

    @given(seed=st.integers(min_value=0, max_value=10_000))
    def test_jacobian_of_affine_equals_det(self, seed):
        rng = np.random.default_rng(seed)
        A = torch.tensor(np.eye(2) + 0.2 * rng.uniform(-1, 1, size=(2, 2)), dtype=torch.float64)
        t = torch.tensor(rng.uniform(-3, 3, size=2), dtype=torch.float64)
        det = jacobian_det(affine_to_dense(AffineParams(A, t), 12, 12))
        expected = float(torch.linalg.det(A))
        assert float((det[1:-1, 1:-1] - expected).abs().max()) < 1e-6

    @given(seed=st.integers(min_value=0, max_value=10_000))
    def test_compose_associativity_on_probe(self, seed):
        rng = np.random.default_rng(seed)
        h = w = 40
        a = smooth_field(h, w, 1.0, rng, wavelength=2 * h, dtype=torch.float32)
        b = smooth_field(h, w, 1.0, rng, wavelength=2 * h, dtype=torch.float32)
        c = smooth_field(h, w, 1.0, rng, wavelength=2 * h, dtype=torch.float32)
        probe = ramp_probe(h, w, rng)
        left = warp(probe, compose(compose(a, b), c))
        right = warp(probe, compose(a, compose(b, c)))
        m = 5
        assert float((left - right)[0, m:-m, m:-m].abs().max()) < 1e-3


class TestResizeFlow:
    def test_constant_field_rescales(self):
        d = translation(8, 8, 2.0, -1.0)
        up = resize_flow(d, (16, 16))
        assert torch.allclose(up[0], torch.full((16, 16), 4.0), atol=1e-5)
        assert torch.allclose(up[1], torch.full((16, 16), -2.0), atol=1e-5)


class TestFieldIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        disp = smooth_field(10, 14, 3.0, rng, dtype=torch.float32)
        save_field(disp, tmp_path / "field.bin")
        loaded = load_field(tmp_path / "field.bin")
        assert torch.equal(loaded, disp)
        sidecar = (tmp_path / "field.json").read_text()
        assert '"h": 10' in sidecar and '"w": 14' in sidecar and '"units": "px"' in sidecar

    def test_size_mismatch_detected(self, tmp_path):
        save_field(torch.zeros(2, 4, 4), tmp_path / "f.bin")
        (tmp_path / "f.bin").write_bytes(b"\x00" * 12)
        with pytest.raises(ValueError):
            load_field(tmp_path / "f.bin")


class TestGradients:
    def test_warp_gradients(self):
        rng = np.random.default_rng(10)
        img = torch.tensor(rng.uniform(size=(1, 16, 16)))
        disp = smooth_field(16, 16, 1.7, rng) + 0.23  # keep samples off integer positions
        probe = torch.tensor(rng.uniform(size=(1, 16, 16)))
        gradient_check(lambda d: (warp(img, d) * probe).sum(), disp)
        gradient_check(lambda im: (warp(im, disp) * probe).sum(), img)

    def test_penalty_gradients(self):
        rng = np.random.default_rng(11)
        disp = smooth_field(16, 16, 2.0, rng)
        gradient_check(smoothness_penalty, disp)
        folding = smooth_field(16, 16, 8.0, rng, wavelength=6.0)
        assert njd_percent(folding) > 0  # hinge must be active for a meaningful check
        gradient_check(jd_penalty, folding)

    def test_one_minus_ncc_gradient(self):
        rng = np.random.default_rng(12)
        a = torch.tensor(rng.uniform(size=(16, 16)))
        b = torch.tensor(rng.uniform(size=(16, 16)))
        gradient_check(lambda x: 1.0 - ncc(x, b), a)
