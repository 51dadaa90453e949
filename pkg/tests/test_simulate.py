"""Simulator tests: superposition, noise statistics, scaling, file I/O."""

import numpy as np
import pytest

from stationcal.errors import CalibrationError
from stationcal.jones import StructuredJonesParams, max_abs_diff, random_hpd, vec2
from stationcal.simulate import (
    NoiseConfig,
    OutlierSource,
    SkyModel,
    TextureSpec,
    baseline_pairs,
    build_jones,
    inject_outliers,
    load_dataset,
    sample_noise,
    save_dataset,
    scale_truth_to_frequency,
    snr_to_sigma,
    synthesize_clean,
    visibilities_from_jones,
)

I2 = np.eye(2, dtype=complex)


def identity_params(d, m, rng=None):
    return StructuredJonesParams(
        faraday=np.zeros(d), shift=np.zeros((d, 2)), gains=np.ones((m, 2), complex)
    )


def random_params(d, m, rng):
    return StructuredJonesParams(
        faraday=rng.uniform(-0.5, 0.5, d),
        shift=rng.uniform(-0.3, 0.3, (d, 2)),
        gains=(1 + 0.2 * rng.standard_normal((m, 2)))
        * np.exp(1j * rng.uniform(-1, 1, (m, 2))),
    )


def diag_sky(fluxes):
    coh = np.stack([np.diag([f * 0.6, f * 0.4]).astype(complex) for f in fluxes])
    return SkyModel(coherencies=coh)


class TestSynthesizeClean:
    def test_single_source_identity_jones(self):
        sky = diag_sky([1.0])
        vis = synthesize_clean(sky, identity_params(1, 4), np.zeros((4, 2)))
        for row in vis.values:
            assert max_abs_diff(row, vec2(sky.coherencies[0])) < 1e-15

    def test_two_source_superposition(self):
        sky = diag_sky([1.0, 0.5])
        vis = synthesize_clean(sky, identity_params(2, 4), np.zeros((4, 2)))
        expect = vec2(sky.coherencies[0]) + vec2(sky.coherencies[1])
        for row in vis.values:
            assert max_abs_diff(row, expect) < 1e-15

    def test_structured_two_antennas_vec_identity(self):
        rng = np.random.default_rng(0)
        sky = diag_sky([1.3])
        params = random_params(1, 2, rng)
        pos = rng.standard_normal((2, 2))
        vis = synthesize_clean(sky, params, pos)
        jones = build_jones(params, sky.beam(2), pos)
        expect = vec2(jones[0, 0] @ sky.coherencies[0] @ jones[0, 1].conj().T)
        assert max_abs_diff(vis.values[0], expect) < 1e-13

    def test_conjugate_symmetry_under_swap(self):
        # reshaping v_pq to V_pq must satisfy V_qp = V_pq^H
        rng = np.random.default_rng(1)
        sky = diag_sky([1.0, 0.4])
        m = 4
        params = random_params(2, m, rng)
        pos = rng.standard_normal((m, 2))
        jones = build_jones(params, sky.beam(m), pos)
        vis = visibilities_from_jones(jones, sky.coherencies, m)
        for b, (p, q) in enumerate(baseline_pairs(m)):
            v_pq = vis.values[b].reshape(2, 2, order="F")
            v_qp = np.sum(
                [
                    jones[i, q] @ sky.coherencies[i] @ jones[i, p].conj().T
                    for i in range(2)
                ],
                axis=0,
            )
            assert max_abs_diff(v_qp, v_pq.conj().T) < 1e-12

    def test_dimension_mismatch_raises(self):
        sky = diag_sky([1.0])
        with pytest.raises(ValueError):
            synthesize_clean(sky, identity_params(1, 4), np.zeros((5, 2)))


class TestSampleNoise:
    def test_zero_sigma_is_exactly_zero(self):
        cfg = NoiseConfig(sigma2=0.0)
        noise, _ = sample_noise(cfg, 123, 10)
        assert np.all(noise == 0)

    def test_deterministic_given_seed(self):
        cfg = NoiseConfig(sigma2=0.5, texture=TextureSpec("invgamma", 3.0))
        n1, t1 = sample_noise(cfg, 42, 50)
        n2, t2 = sample_noise(cfg, 42, 50)
        assert np.array_equal(n1, n2) and np.array_equal(t1, t2)

    def test_covariance_matches_monte_carlo(self):
        # constant texture: sample covariance ~ sigma2 * omega within 3%
        rng = np.random.default_rng(5)
        omega = random_hpd(rng, 4)
        sigma2 = 2.3
        cfg = NoiseConfig(sigma2=sigma2, omega=omega)
        noise, _ = sample_noise(cfg, 99, 100_000)
        sample_cov = (noise[:, :, None] * np.conj(noise[:, None, :])).mean(0)
        target = sigma2 * omega
        rel = np.linalg.norm(sample_cov - target) / np.linalg.norm(target)
        assert rel < 0.03

    def test_gaussian_kurtosis_with_constant_texture(self):
        cfg = NoiseConfig(sigma2=1.0)
        noise, _ = sample_noise(cfg, 7, 100_000)
        comp = noise[:, 0].real
        z = (comp - comp.mean()) / comp.std()
        excess = np.mean(z**4) - 3.0
        assert abs(excess) < 3.0 * np.sqrt(24.0 / comp.size)

    def test_invgamma_texture_unit_mean(self):
        spec = TextureSpec("invgamma", 4.0)
        tau = spec.sample(np.random.default_rng(3), 200_000)
        assert np.all(tau > 0)
        assert abs(tau.mean() - 1.0) < 0.02

    def test_invgamma_needs_nu_above_one(self):
        with pytest.raises(ValueError):
            TextureSpec("invgamma", 1.0).sample(np.random.default_rng(0), 4)


class TestInjectOutliers:
    def test_no_outliers_unchanged(self):
        sky = diag_sky([1.0])
        vis = synthesize_clean(sky, identity_params(1, 4), np.zeros((4, 2)))
        out = inject_outliers(vis, [], np.zeros((4, 2)))
        assert np.array_equal(out.values, vis.values)

    def test_zero_coherency_unchanged(self):
        sky = diag_sky([1.0])
        vis = synthesize_clean(sky, identity_params(1, 4), np.zeros((4, 2)))
        out = inject_outliers(
            vis, [OutlierSource(np.zeros((2, 2)))], np.zeros((4, 2))
        )
        assert max_abs_diff(out.values, vis.values) == 0.0

    def test_identity_factor_shift(self):
        sky = diag_sky([1.0])
        vis = synthesize_clean(sky, identity_params(1, 3), np.zeros((3, 2)))
        c_out = np.diag([0.01, 0.005]).astype(complex)
        out = inject_outliers(vis, [OutlierSource(c_out)], np.zeros((3, 2)))
        for row_in, row_out in zip(vis.values, out.values):
            assert max_abs_diff(row_out - row_in, vec2(c_out)) < 1e-15

    def test_commutes_with_noise_addition(self):
        rng = np.random.default_rng(11)
        sky = diag_sky([1.0])
        pos = rng.standard_normal((4, 2))
        vis = synthesize_clean(sky, identity_params(1, 4), pos)
        noise, _ = sample_noise(NoiseConfig(sigma2=0.1), 5, vis.n_baselines)
        outs = [OutlierSource(np.diag([0.02, 0.01]).astype(complex))]

        a = inject_outliers(vis, outs, pos)
        a.values += noise
        b = vis.copy()
        b.values = b.values + noise
        b = inject_outliers(b, outs, pos)
        assert max_abs_diff(a.values, b.values) < 1e-15

    def test_flux_ordering_enforced(self):
        with pytest.raises(ValueError):
            SkyModel(
                coherencies=np.diag([0.5, 0.5])[None].astype(complex),
                outliers=[OutlierSource(np.diag([2.0, 1.0]).astype(complex))],
            )


class TestFrequencyScaling:
    def test_identity_at_reference(self):
        rng = np.random.default_rng(2)
        base = random_params(2, 4, rng)
        pos = rng.standard_normal((4, 2))
        scaled, pos2 = scale_truth_to_frequency(base, pos, 1.4e9, 1.4e9)
        assert max_abs_diff(scaled.faraday, base.faraday) == 0.0
        assert max_abs_diff(scaled.shift, base.shift) == 0.0
        assert max_abs_diff(pos2, pos) == 0.0

    def test_double_frequency(self):
        rng = np.random.default_rng(3)
        base = random_params(1, 3, rng)
        pos = rng.standard_normal((3, 2))
        scaled, pos2 = scale_truth_to_frequency(base, pos, 2.0, 1.0)
        assert np.allclose(scaled.faraday, base.faraday / 4)
        assert np.allclose(scaled.shift, base.shift / 4)
        assert np.allclose(pos2, 2 * pos)
        assert np.array_equal(scaled.gains, base.gains)

    def test_sqrt2_frequency_halves_faraday(self):
        base = identity_params(1, 3)
        base.faraday[:] = 0.8
        scaled, _ = scale_truth_to_frequency(
            base, np.zeros((3, 2)), np.sqrt(2.0), 1.0
        )
        assert np.allclose(scaled.faraday, 0.4)

    def test_nonpositive_frequency_raises(self):
        base = identity_params(1, 3)
        with pytest.raises(ValueError):
            scale_truth_to_frequency(base, np.zeros((3, 2)), -1.0, 1.0)


class TestSnrToSigma:
    def test_zero_db_definition(self):
        vis = synthesize_clean(
            diag_sky([1.0]), identity_params(1, 3), np.zeros((3, 2))
        )
        x = vis.stacked()
        expect = np.sum(np.abs(x) ** 2) / x.size
        assert np.isclose(snr_to_sigma(vis, 0.0), expect)

    def test_high_snr_limit(self):
        vis = synthesize_clean(
            diag_sky([1.0]), identity_params(1, 3), np.zeros((3, 2))
        )
        assert snr_to_sigma(vis, 200.0) < 1e-18

    def test_unit_energy_arithmetic(self):
        # ||x||^2 = 4B and 10 dB gives sigma2 = 0.1
        vis = VisSetWithEnergy(3)
        assert np.isclose(snr_to_sigma(vis, 10.0), 0.1)

    def test_zero_signal_raises(self):
        from stationcal.simulate import VisibilitySet

        vis = VisibilitySet(3, np.zeros((3, 4), complex))
        with pytest.raises(CalibrationError):
            snr_to_sigma(vis, 10.0)


def VisSetWithEnergy(m):
    from stationcal.simulate import VisibilitySet

    b = m * (m - 1) // 2
    values = np.ones((b, 4), dtype=complex)  # ||x||^2 = 4B
    return VisibilitySet(m, values)


class TestDatasetRoundTrip:
    def test_bit_exact(self, tmp_path):
        rng = np.random.default_rng(21)
        sky = diag_sky([1.0, 0.3])
        per_freq = []
        for f in (1.4e9, 1.5e9):
            params = random_params(2, 5, rng)
            pos = rng.standard_normal((5, 2))
            vis = synthesize_clean(sky, params, pos)
            vis.values += 0.01 * (
                rng.standard_normal(vis.values.shape)
                + 1j * rng.standard_normal(vis.values.shape)
            )
            per_freq.append((f, vis))
        path = tmp_path / "obs.txt"
        save_dataset(path, per_freq, n_sources=2, seed=77)
        loaded, meta = load_dataset(path)
        assert meta == {"M": 5, "D": 2, "F": 2, "B": 10, "seed": 77}
        for (f0, v0), (f1, v1) in zip(per_freq, loaded):
            assert f0 == f1
            assert np.array_equal(v0.values, v1.values)
