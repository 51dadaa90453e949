"""Robust unstructured calibration tests.

Raw Jones entries carry a per-source gauge freedom, so solver output is
always checked through invariant quantities: model visibilities and the
weighted cost.
"""

import numpy as np
import pytest

from stationcal.jones import StructuredJonesParams, hpd_inverse, max_abs_diff, random_hpd
from stationcal.nsca import (
    NoiseEstimate,
    TAU_FLOOR,
    compute_residuals,
    quad_forms,
    robust_nll,
    run_nsca,
    update_omega,
    update_tau,
    update_theta,
    weighted_cost,
)
from stationcal.simulate import (
    NoiseConfig,
    SkyModel,
    TextureSpec,
    VisibilitySet,
    build_jones,
    sample_noise,
    synthesize_clean,
    visibilities_from_jones,
)

# overdetermined scene: 4B = 84 complex data vs 4DM = 56 complex unknowns
M, D = 7, 2


def make_scene(seed=0, m=M, d=D):
    rng = np.random.default_rng(seed)
    coh = np.stack(
        [np.diag([f * 0.7, f * 0.3]).astype(complex) for f in (2.0, 0.9)[:d]]
    )
    sky = SkyModel(coherencies=coh)
    params = StructuredJonesParams(
        faraday=rng.uniform(-0.4, 0.4, d),
        shift=rng.uniform(-0.25, 0.25, (d, 2)),
        gains=(1 + 0.15 * rng.standard_normal((m, 2)))
        * np.exp(1j * rng.uniform(-1, 1, (m, 2))),
    )
    pos = rng.uniform(-2, 2, (m, 2))
    pos -= pos.mean(axis=0)
    jones = build_jones(params, sky.beam(m), pos)
    clean = synthesize_clean(sky, params, pos)
    return sky, params, pos, jones, clean


def noisy_vis(clean, sigma2, seed, nu=None, omega=None):
    texture = TextureSpec("constant") if nu is None else TextureSpec("invgamma", nu)
    cfg = NoiseConfig(
        sigma2=sigma2,
        omega=np.eye(4, dtype=complex) / 4 if omega is None else omega,
        texture=texture,
    )
    noise, _ = sample_noise(cfg, seed, clean.n_baselines)
    return VisibilitySet(clean.n_antennas, clean.values + noise)


class TestComputeResiduals:
    def test_truth_on_clean_data_is_zero(self):
        sky, _, _, jones, clean = make_scene()
        res = compute_residuals(clean, jones, sky.coherencies)
        assert np.max(np.abs(res)) < 1e-12

    def test_zero_jones_gives_data(self):
        sky, _, _, jones, clean = make_scene()
        res = compute_residuals(clean, np.zeros_like(jones), sky.coherencies)
        assert max_abs_diff(res, clean.values) == 0.0

    def test_matches_resynthesis_oracle(self):
        rng = np.random.default_rng(4)
        sky, _, _, jones, clean = make_scene()
        trial = jones + 0.3 * (
            rng.standard_normal(jones.shape) + 1j * rng.standard_normal(jones.shape)
        )
        res = compute_residuals(clean, trial, sky.coherencies)
        oracle = clean.values - visibilities_from_jones(
            trial, sky.coherencies, clean.n_antennas
        ).values
        assert max_abs_diff(res, oracle) == 0.0


class TestUpdateTheta:
    def test_truth_is_fixed_point_on_clean_data(self):
        sky, _, _, jones, clean = make_scene()
        noise = NoiseEstimate(np.eye(4, dtype=complex) / 4, np.ones(clean.n_baselines))
        out, costs = update_theta(clean, sky.coherencies, noise, jones, n_sweeps=1)
        model = visibilities_from_jones(out, sky.coherencies, clean.n_antennas)
        assert max_abs_diff(model.values, clean.values) < 1e-10

    def test_cost_drops_from_perturbed_start(self):
        rng = np.random.default_rng(5)
        sky, _, _, jones, clean = make_scene()
        start = jones * (1 + 0.05 * rng.standard_normal(jones.shape))
        noise = NoiseEstimate(np.eye(4, dtype=complex) / 4, np.ones(clean.n_baselines))
        omega_inv = hpd_inverse(noise.omega)
        cost0 = weighted_cost(
            compute_residuals(clean, start, sky.coherencies), omega_inv, noise.tau
        )
        out, costs = update_theta(clean, sky.coherencies, noise, start, n_sweeps=20)
        assert costs[-1] < cost0 / 10.0

    def test_sweep_costs_non_increasing(self):
        rng = np.random.default_rng(6)
        sky, _, _, jones, clean = make_scene()
        vis = noisy_vis(clean, 0.05, 8)
        start = jones * (1 + 0.1 * rng.standard_normal(jones.shape))
        noise = NoiseEstimate(random_hpd(rng, 4), np.ones(clean.n_baselines))
        omega_inv = hpd_inverse(noise.omega)
        cost0 = weighted_cost(
            compute_residuals(vis, start, sky.coherencies), omega_inv, noise.tau
        )
        _, costs = update_theta(vis, sky.coherencies, noise, start, n_sweeps=6)
        seq = [cost0] + costs
        for prev, nxt in zip(seq, seq[1:]):
            assert nxt <= prev * (1 + 1e-12) + 1e-12

    def test_uniform_weights_match_plain_least_squares(self):
        # omega = I/4, tau = 1: minimizer coincides with unweighted LS
        rng = np.random.default_rng(7)
        sky, _, _, jones, clean = make_scene()
        vis = noisy_vis(clean, 0.02, 9)
        start = jones * (1 + 0.05 * rng.standard_normal(jones.shape))
        noise = NoiseEstimate(np.eye(4, dtype=complex) / 4, np.ones(clean.n_baselines))
        out, _ = update_theta(vis, sky.coherencies, noise, start.copy(), n_sweeps=10)

        # oracle: same sweeps with identity metric, then compare costs
        noise_id = NoiseEstimate(np.eye(4, dtype=complex) / 4, np.ones(clean.n_baselines))
        out2, _ = update_theta(vis, sky.coherencies, noise_id, start.copy(), n_sweeps=10)
        res1 = compute_residuals(vis, out, sky.coherencies)
        res2 = compute_residuals(vis, out2, sky.coherencies)
        c1 = float(np.sum(np.abs(res1) ** 2))
        c2 = float(np.sum(np.abs(res2) ** 2))
        assert abs(c1 - c2) <= 1e-10 * max(c1, 1.0)


class TestUpdateOmega:
    def test_rank_one_residuals_regularized(self):
        e = np.zeros((10, 4), dtype=complex)
        e[:, 0] = 1.0
        omega, regularized = update_omega(e, np.eye(4, dtype=complex) / 4)
        assert regularized
        assert abs(np.trace(omega).real - 1.0) < 1e-12
        expect = np.diag([1.0, 0.0, 0.0, 0.0])
        assert max_abs_diff(omega, expect) < 1e-6

    def test_trace_always_one(self):
        rng = np.random.default_rng(8)
        res = rng.standard_normal((40, 4)) + 1j * rng.standard_normal((40, 4))
        omega, _ = update_omega(res, random_hpd(rng, 4))
        assert abs(np.trace(omega).real - 1.0) < 1e-12

    def test_monte_carlo_consistency(self):
        # iterating the fixed point on CN(0, omega0) residuals recovers
        # omega0 up to trace normalization within 5% Frobenius
        rng = np.random.default_rng(9)
        omega0 = random_hpd(rng, 4)
        low = np.linalg.cholesky(omega0)
        n = 10_000
        w = (rng.standard_normal((n, 4)) + 1j * rng.standard_normal((n, 4))) / np.sqrt(2)
        res = w @ low.T
        omega = np.eye(4, dtype=complex) / 4
        for _ in range(100):
            new, _ = update_omega(res, omega)
            if max_abs_diff(new, omega) < 1e-12:
                omega = new
                break
            omega = new
        target = omega0 / np.trace(omega0).real
        rel = np.linalg.norm(omega - target) / np.linalg.norm(target)
        assert rel < 0.05


class TestUpdateTau:
    def test_zero_residual_floors(self):
        tau = update_tau(np.zeros((3, 4), complex), np.eye(4, dtype=complex) / 4)
        assert np.all(tau == TAU_FLOOR)

    def test_hand_value(self):
        a = np.zeros((1, 4), dtype=complex)
        a[0, 0] = 2.0
        tau = update_tau(a, np.eye(4, dtype=complex) / 4)
        assert np.isclose(tau[0], 4.0)

    def test_quadratic_form_oracle(self):
        rng = np.random.default_rng(10)
        omega = random_hpd(rng, 4)
        res = rng.standard_normal((20, 4)) + 1j * rng.standard_normal((20, 4))
        tau = update_tau(res, omega)
        omega_inv = np.linalg.inv(omega)
        for k in range(20):
            expect = (res[k].conj() @ omega_inv @ res[k]).real / 4
            assert abs(tau[k] - expect) < 1e-13 * max(1.0, expect)

    def test_normalized_quadform_is_one_after_update(self):
        rng = np.random.default_rng(11)
        omega = random_hpd(rng, 4)
        res = rng.standard_normal((20, 4)) + 1j * rng.standard_normal((20, 4))
        tau = update_tau(res, omega)
        q = quad_forms(res, hpd_inverse(omega))
        ratio = q / (4 * tau)
        assert np.allclose(ratio[tau > TAU_FLOOR], 1.0, atol=1e-12)


class TestRunNsca:
    def test_clean_data_near_truth_reaches_zero_residual(self):
        rng = np.random.default_rng(12)
        sky, _, _, jones, clean = make_scene()
        start = jones * (1 + 0.02 * rng.standard_normal(jones.shape))
        est, noise, diag = run_nsca(clean, sky.coherencies, jones_init=start)
        model = visibilities_from_jones(est, sky.coherencies, clean.n_antennas)
        rel = np.linalg.norm(model.values - clean.values) / np.linalg.norm(
            clean.values
        )
        assert rel < 1e-8

    def test_robust_nll_monotone_per_substep(self):
        # the chain is guaranteed monotone once tau is consistent with the
        # residuals, i.e. from the first covariance update onward (the very
        # first Jones step still runs under the flat init weights)
        sky, _, _, jones, clean = make_scene(seed=2)
        vis = noisy_vis(clean, 0.05, 13, nu=2.5)
        est, noise, diag = run_nsca(vis, sky.coherencies, jones_init=jones)
        stages = [(s, v) for (_, s, v) in diag.robust_nll]
        start = next(i for i, (s, _) in enumerate(stages) if s == "omega")
        vals = [v for (_, v) in stages[start:]]
        assert len(vals) > 5
        for prev, nxt in zip(vals, vals[1:]):
            assert nxt <= prev + 1e-10 * max(abs(prev), 1.0)

    def test_robust_beats_gaussian_under_heavy_tails(self):
        # data-space error comparison over 100 trials at 10 dB, nu = 2
        sky, params, pos, jones, clean = make_scene(seed=3)
        x_true = clean.stacked()
        sigma2 = float(np.sum(np.abs(x_true) ** 2)) / (x_true.size * 10.0)
        wins = 0
        trials = 100
        for t in range(trials):
            vis = noisy_vis(clean, sigma2, 1000 + t, nu=2.0)
            errs = {}
            for mode in ("robust", "gaussian"):
                est, _, _ = run_nsca(
                    vis, sky.coherencies, mode=mode, jones_init=jones, max_outer=25
                )
                model = visibilities_from_jones(
                    est, sky.coherencies, clean.n_antennas
                )
                errs[mode] = np.linalg.norm(model.values - clean.values)
            if errs["robust"] < errs["gaussian"]:
                wins += 1
        assert wins >= 0.8 * trials

    def test_modes_agree_on_gaussian_data(self):
        # constant texture: both estimate the same model; error ratio near 1
        sky, params, pos, jones, clean = make_scene(seed=4)
        x_true = clean.stacked()
        sigma2 = float(np.sum(np.abs(x_true) ** 2)) / (x_true.size * 100.0)
        ratios = []
        for t in range(20):
            vis = noisy_vis(clean, sigma2, 2000 + t)
            errs = {}
            for mode in ("robust", "gaussian"):
                est, _, _ = run_nsca(
                    vis, sky.coherencies, mode=mode, jones_init=jones, max_outer=25
                )
                model = visibilities_from_jones(
                    est, sky.coherencies, clean.n_antennas
                )
                errs[mode] = np.linalg.norm(model.values - clean.values)
            ratios.append(errs["robust"] / errs["gaussian"])
        mean_ratio = float(np.mean(ratios))
        assert 0.8 <= mean_ratio <= 1.25

    def test_gaussian_mode_keeps_noise_model_fixed(self):
        sky, _, _, jones, clean = make_scene(seed=5)
        vis = noisy_vis(clean, 0.01, 3)
        _, noise, _ = run_nsca(vis, sky.coherencies, mode="gaussian", jones_init=jones)
        assert max_abs_diff(noise.omega, np.eye(4) / 4) == 0.0
        assert np.all(noise.tau == 1.0)

    def test_unknown_mode_raises(self):
        sky, _, _, jones, clean = make_scene(seed=6)
        with pytest.raises(ValueError):
            run_nsca(clean, sky.coherencies, mode="student")
