"""Relaxed maximum-likelihood calibration of unstructured Jones matrices.

Alternates three updates until the cost settles:

1. a weighted fit of all D*M Jones matrices to the data, solved by block
   coordinate descent over antennas (each antenna update is an exact
   complex linear least squares problem),
2. one fixed-point sweep of the trace-normalized speckle covariance,
3. the closed-form per-baseline texture.

The "gaussian" mode freezes tau = 1 and omega = I/4 and runs only the
Jones fit, which is the classical nonlinear least squares calibration.

A note on identifiability: for each source, right-multiplying every
J_ip by a matrix that commutes with the coherency in the sandwich sense
(T C T^H = C) leaves the data invariant, so raw Jones entries are only
meaningful relative to the starting point. Assertions about NSCA output
should go through invariant quantities such as the model visibilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError
from .jones import cholesky_hpd, hpd_inverse, hpd_logdet
from .simulate import VisibilitySet, baseline_pairs, visibilities_from_jones

TAU_FLOOR = 1e-10
OMEGA_RIDGE = 1e-8
# relative squared residual below which the fit is numerically exact and
# noise statistics stop being estimable from the residuals
NOISE_FREEZE_REL2 = 1e-8


@dataclass
class NoiseEstimate:
    """Speckle covariance (Hermitian PD, unit trace) and per-baseline
    textures."""

    omega: np.ndarray
    tau: np.ndarray

    def validate(self, tol: float = 1e-12) -> None:
        if abs(np.trace(self.omega).real - 1.0) > tol:
            raise CalibrationError("omega trace is not 1")
        if np.max(np.abs(self.omega - self.omega.conj().T)) > tol:
            raise CalibrationError("omega is not Hermitian")
        cholesky_hpd(self.omega)
        if np.any(self.tau < 0):
            raise CalibrationError("negative texture estimate")


@dataclass
class NscaDiagnostics:
    costs: list = field(default_factory=list)  # (iteration, stage, weighted_cost)
    robust_nll: list = field(default_factory=list)  # (iteration, stage, value)
    n_iterations: int = 0
    converged: bool = False
    theta_flagged: bool = False
    omega_regularized: int = 0
    tau_floored: int = 0
    noise_degenerate: bool = False


def compute_residuals(
    vis: VisibilitySet, jones: np.ndarray, coherencies: np.ndarray
) -> np.ndarray:
    """a_pq = v_pq - model(jones), shape (B, 4)."""
    model = visibilities_from_jones(jones, coherencies, vis.n_antennas)
    return vis.values - model.values


def weighted_cost(
    residuals: np.ndarray, omega_inv: np.ndarray, tau: np.ndarray
) -> float:
    """sum_pq (1/tau_pq) a^H omega^{-1} a."""
    q = np.einsum("bi,ij,bj->b", np.conj(residuals), omega_inv, residuals).real
    return float(np.sum(q / tau))


def quad_forms(residuals: np.ndarray, omega_inv: np.ndarray) -> np.ndarray:
    """Per-baseline a^H omega^{-1} a (real, >= 0)."""
    return np.einsum(
        "bi,ij,bj->b", np.conj(residuals), omega_inv, residuals
    ).real


def robust_nll(
    residuals: np.ndarray, omega: np.ndarray, omega_inv: np.ndarray
) -> float:
    """Texture-concentrated negative log-likelihood

        4 sum_pq log(a^H omega^{-1} a) + B log det(omega),

    the quantity every NSCA sub-step provably does not increase. Quadratic
    forms are floored at 4*TAU_FLOOR so noise-free residuals stay finite.
    """
    q = np.maximum(quad_forms(residuals, omega_inv), 4.0 * TAU_FLOOR)
    return float(4.0 * np.sum(np.log(q)) + len(residuals) * hpd_logdet(omega))


def _kron_bt_i2(bt: np.ndarray) -> np.ndarray:
    """Batched kron(B^T, I2) for bt of shape (..., 2, 2)."""
    out = np.zeros(bt.shape[:-2] + (4, 4), dtype=complex)
    out[..., 0::2, 0::2] = bt
    out[..., 1::2, 1::2] = bt
    return out


def _kron_i2_m(m: np.ndarray) -> np.ndarray:
    """Batched kron(I2, M) for m of shape (..., 2, 2)."""
    out = np.zeros(m.shape[:-2] + (4, 4), dtype=complex)
    out[..., :2, :2] = m
    out[..., 2:, 2:] = m
    return out


def _antenna_design(p, jones, coherencies, vis_values, pair_index, n_antennas):
    """Stacked linear system in t = [vec(J_1p); ...; vec(J_Dp)].

    Baselines where p is the left antenna contribute rows
    ((C_i J_iq^H)^T kron I2); where p is the right antenna the residual
    equation is conjugated, turning it linear in t with blocks
    conj((I2 kron J_iq C_i) P) where P permutes vec(A) into vec(A^T).

    Returns (rows, data, baseline_ids, conj_flags).
    """
    d = jones.shape[0]
    others = [q for q in range(n_antennas) if q != p]
    design = np.empty((len(others), 4, 4 * d), dtype=complex)
    data = np.empty((len(others), 4), dtype=complex)
    bl = np.empty(len(others), dtype=int)
    conj_flag = np.empty(len(others), dtype=bool)
    for k, q in enumerate(others):
        if p < q:
            b = pair_index[p, q]
            cjh = np.einsum(
                "dab,dcb->dac", coherencies, np.conj(jones[:, q])
            )  # C_i @ J_iq^H
            blocks = _kron_bt_i2(np.swapaxes(cjh, -1, -2))
            data[k] = vis_values[b]
            conj_flag[k] = False
        else:
            b = pair_index[q, p]
            jc = np.einsum("dab,dbc->dac", jones[:, q], coherencies)  # J_iq @ C_i
            blocks = np.conj(_kron_i2_m(jc)[..., [0, 2, 1, 3]])
            data[k] = np.conj(vis_values[b])
            conj_flag[k] = True
        design[k] = blocks.transpose(1, 0, 2).reshape(4, 4 * d)
        bl[k] = b
    return design, data, bl, conj_flag


def update_theta(
    vis: VisibilitySet,
    coherencies: np.ndarray,
    noise: NoiseEstimate,
    jones_init: np.ndarray,
    n_sweeps: int = 3,
    pivot_floor: float = 1e-14,
    accelerate: bool = True,
) -> tuple[np.ndarray, list]:
    """Block coordinate descent on the weighted Jones fit.

    Runs ``n_sweeps`` full antenna sweeps; every antenna sub-problem is
    an exact weighted linear least squares solve (weights 1/tau, metric
    omega^{-1}). Plain sweeps zigzag badly on this bilinear problem, so
    each sweep is followed by a geometric extrapolation of the sweep
    step, accepted only when it lowers the weighted cost; the cost is
    therefore still non-increasing per sweep.

    Returns the updated (D, M, 2, 2) Jones set and the cost after each
    sweep.
    """
    m = vis.n_antennas
    d = jones_init.shape[0]
    jones = jones_init.copy()
    tau = np.maximum(noise.tau, TAU_FLOOR)
    low = cholesky_hpd(noise.omega, pivot_floor)
    low_inv = np.linalg.inv(low)
    low_inv_conj = np.conj(low_inv)
    omega_inv = low_inv.conj().T @ low_inv

    pair_index = np.full((m, m), -1, dtype=int)
    for b, (p, q) in enumerate(baseline_pairs(m)):
        pair_index[p, q] = b

    def cost_of(j):
        return weighted_cost(
            compute_residuals(vis, j, coherencies), omega_inv, tau
        )

    sweep_costs = []
    prev_delta = None
    for _ in range(n_sweeps):
        base = jones.copy()
        for p in range(m):
            design, data, bl, conj_flag = _antenna_design(
                p, jones, coherencies, vis.values, pair_index, m
            )
            white = np.where(conj_flag[:, None, None], low_inv_conj, low_inv)
            scale = 1.0 / np.sqrt(tau[bl])
            rows = scale[:, None, None] * np.einsum("kij,kjc->kic", white, design)
            rhs = scale[:, None] * np.einsum("kij,kj->ki", white, data)
            sol, *_ = np.linalg.lstsq(
                rows.reshape(-1, 4 * d), rhs.reshape(-1), rcond=None
            )
            # each length-4 slice is a column-major vec of one 2x2 matrix
            jones[:, p] = sol.reshape(d, 2, 2).transpose(0, 2, 1)
        cost = cost_of(jones)
        delta = jones - base
        if accelerate and prev_delta is not None:
            den = np.vdot(prev_delta, prev_delta).real
            rho = np.vdot(prev_delta, delta).real / den if den > 0 else 0.0
            if 0.0 < rho < 0.999:
                cand = base + delta / (1.0 - rho)
                cand_cost = cost_of(cand)
                if cand_cost < cost:
                    jones, cost = cand, cand_cost
        prev_delta = delta
        sweep_costs.append(cost)
    return jones, sweep_costs


def update_omega(
    residuals: np.ndarray, omega_prev: np.ndarray
) -> tuple[np.ndarray, bool]:
    """One fixed-point sweep of the speckle covariance, trace-normalized.

    Baselines whose previous quadratic form is numerically zero carry no
    information and are skipped. A rank-deficient update (residuals
    spanning fewer than 4 directions) is ridged with OMEGA_RIDGE * trace
    and flagged.

    Returns (omega, regularized_flag).
    """
    if residuals.size == 0:
        raise CalibrationError("no residuals to estimate omega from")
    b = residuals.shape[0]
    prev_inv = hpd_inverse(omega_prev)
    q = quad_forms(residuals, prev_inv)
    keep = q > 4.0 * TAU_FLOOR
    if not np.any(keep):
        # no informative residuals at all; fall back to the flat shape
        return np.eye(4, dtype=complex) / 4.0, True
    a = residuals[keep]
    omega = (4.0 / b) * np.einsum("bi,bj->ij", a / q[keep, None], np.conj(a))
    omega = 0.5 * (omega + omega.conj().T)
    omega = omega / np.trace(omega).real
    regularized = False
    try:
        # definiteness is meaningful only at unit trace: pivots scale
        # with the overall magnitude
        cholesky_hpd(omega)
    except CalibrationError:
        omega = omega + OMEGA_RIDGE * np.eye(4)
        omega = omega / np.trace(omega).real
        regularized = True
    return omega, regularized


def update_tau(residuals: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Closed-form textures (1/4) a^H omega^{-1} a, floored at TAU_FLOOR."""
    return np.maximum(quad_forms(residuals, hpd_inverse(omega)) / 4.0, TAU_FLOOR)


def default_jones_init(
    vis: VisibilitySet, coherencies: np.ndarray
) -> np.ndarray:
    """Identity Jones set with a closed-form global amplitude match.

    With J = s*I the model is s^2 * sum_i vec(C_i) on every baseline;
    the best s^2 follows from a 1-parameter real least squares fit.
    """
    d = coherencies.shape[0]
    m = vis.n_antennas
    base = np.sum([c.reshape(4, order="F") for c in coherencies], axis=0)
    model = np.tile(base, vis.n_baselines)
    x = vis.stacked()
    denom = float(np.sum(np.abs(model) ** 2))
    s2 = np.vdot(model, x).real / denom if denom > 0 else 1.0
    s = np.sqrt(max(s2, 1e-12))
    jones = np.zeros((d, m, 2, 2), dtype=complex)
    jones[:, :] = s * np.eye(2)
    return jones


def run_nsca(
    vis: VisibilitySet,
    coherencies: np.ndarray,
    mode: str = "robust",
    jones_init: np.ndarray | None = None,
    max_outer: int = 50,
    tol: float = 1e-6,
    sweeps_per_outer: int = 3,
) -> tuple[np.ndarray, NoiseEstimate, NscaDiagnostics]:
    """Full calibration loop.

    Parameters
    ----------
    vis : VisibilitySet
    coherencies : ndarray, (D, 2, 2)
    mode : "robust" or "gaussian"
        Robust mode cycles Jones / covariance / texture updates;
        gaussian mode fixes tau = 1, omega = I/4 and only fits Jones.
    jones_init : optional (D, M, 2, 2) start, default amplitude-matched
        identities.

    Returns
    -------
    jones, NoiseEstimate, NscaDiagnostics
    """
    if mode not in ("robust", "gaussian"):
        raise ValueError(f"unknown mode {mode!r}")
    b = vis.n_baselines
    jones = (
        default_jones_init(vis, coherencies) if jones_init is None else jones_init.copy()
    )
    omega = np.eye(4, dtype=complex) / 4.0
    tau = np.ones(b)
    diag = NscaDiagnostics()

    data_energy = float(np.sum(np.abs(vis.values) ** 2))
    prev_track = None
    for it in range(max_outer):
        noise = NoiseEstimate(omega, tau)
        jones, sweep_costs = update_theta(
            vis, coherencies, noise, jones, n_sweeps=sweeps_per_outer
        )
        res = compute_residuals(vis, jones, coherencies)
        omega_inv = hpd_inverse(omega)
        diag.costs.append((it, "theta", weighted_cost(res, omega_inv, tau)))
        diag.robust_nll.append((it, "theta", robust_nll(res, omega, omega_inv)))

        if mode == "robust" and not diag.noise_degenerate:
            rel2 = float(np.sum(np.abs(res) ** 2)) / max(data_energy, 1e-300)
            if rel2 < NOISE_FREEZE_REL2:
                # residuals are numerically exact: the relaxed likelihood
                # is unbounded there and texture weights lose meaning, so
                # fall back to the flat noise model
                diag.noise_degenerate = True
                omega = np.eye(4, dtype=complex) / 4.0
                tau = np.ones(b)
                omega_inv = hpd_inverse(omega)

        if mode == "robust" and not diag.noise_degenerate:
            omega, regularized = update_omega(res, omega)
            if regularized:
                diag.omega_regularized += 1
            omega_inv = hpd_inverse(omega)
            diag.costs.append((it, "omega", weighted_cost(res, omega_inv, tau)))
            diag.robust_nll.append((it, "omega", robust_nll(res, omega, omega_inv)))

            tau = update_tau(res, omega)
            diag.tau_floored += int(np.sum(tau <= TAU_FLOOR))
            diag.costs.append((it, "tau", weighted_cost(res, omega_inv, tau)))
            diag.robust_nll.append((it, "tau", robust_nll(res, omega, omega_inv)))
            track = diag.robust_nll[-1][2]
        else:
            track = diag.costs[-1][2]

        diag.n_iterations = it + 1
        if prev_track is not None:
            if abs(track - prev_track) <= tol * max(abs(prev_track), 1.0):
                diag.converged = True
                break
        prev_track = track
    if not diag.converged:
        diag.theta_flagged = True
    return jones, NoiseEstimate(omega, tau), diag
