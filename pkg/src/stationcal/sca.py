"""Mono-frequency structured calibration by alternating least squares.

Fits the structured factorization diag(g) H Z F to an unstructured
Jones set (typically the NSCA output), cycling four coordinate updates:
the Faraday angle per source, the complex feed gains per antenna, the
per-antenna ionospheric phases, and the closed-form 2-parameter shift
that explains those phases through the array geometry. After the shift
update the phases are overwritten with their structured values so the
iterate stays consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError
from .jones import (
    StructuredJonesParams,
    faraday_matrix,
    wrap_phase,
)


@dataclass
class ScaDiagnostics:
    # (cycle, stage, cost) after every sub-step; stage in theta/gain/phase/alpha
    costs: list = field(default_factory=list)
    n_cycles: int = 0
    converged: bool = False


def _as_gain_matrices(gains: np.ndarray) -> np.ndarray:
    """(M, 2) feed gains to (M, 2, 2) diagonal matrices."""
    m = gains.shape[0]
    out = np.zeros((m, 2, 2), dtype=complex)
    out[:, 0, 0] = gains[:, 0]
    out[:, 1, 1] = gains[:, 1]
    return out


def structured_model(
    gains: np.ndarray, h_i: np.ndarray, phases: np.ndarray, theta: float
) -> np.ndarray:
    """diag(g_p) H_ip e^{j phi_ip} F(theta) for all antennas, (M, 2, 2)."""
    gh = _as_gain_matrices(gains) @ h_i
    return np.exp(1j * phases)[:, None, None] * gh @ faraday_matrix(theta)


def source_cost(
    j_hat_i: np.ndarray,
    gains: np.ndarray,
    h_i: np.ndarray,
    phases: np.ndarray,
    theta: float,
) -> float:
    """Frobenius misfit sum_p ||Jhat_ip - G H Z F||_F^2 for one source."""
    diff = j_hat_i - structured_model(gains, h_i, phases, theta)
    return float(np.sum(np.abs(diff) ** 2))


def estimate_faraday(
    j_hat_i: np.ndarray,
    gains: np.ndarray,
    h_i: np.ndarray,
    phases: np.ndarray,
) -> float:
    """Global minimizer of the one-dimensional Faraday misfit.

    Because F is orthogonal the misfit is an exact sinusoid in theta,
    cost = K - 2(a cos theta + b sin theta), so the arctangent of the
    two projection coefficients is the global solution on (-pi, pi].
    """
    gh = _as_gain_matrices(gains) @ h_i
    a_p = np.exp(1j * phases)[:, None, None] * gh  # G H Z per antenna
    proj = np.einsum("pba,pbc->pac", np.conj(a_p), j_hat_i)  # (GHZ)^H Jhat
    a = float(np.sum(np.trace(proj, axis1=1, axis2=2).real))
    b = float(np.sum((proj[:, 1, 0] - proj[:, 0, 1]).real))
    if a == 0.0 and b == 0.0:
        raise CalibrationError("degenerate Faraday fit: all fixed factors vanish")
    return float(np.arctan2(b, a))


def estimate_gain_mono(j_hat_p: np.ndarray, r_p: np.ndarray) -> np.ndarray:
    """Closed-form feed gains for one antenna given R_ip = H Z F.

    Both inputs have shape (D, 2, 2); component k solves the scalar
    least squares sum_i ||row_k(Jhat) - g_k row_k(R)||^2, i.e.

        g_k = sum_i conj(X_i)_kk / sum_i conj(W_i)_kk

    with X = R Jhat^H and W = R R^H.
    """
    num = np.sum(np.conj(r_p) * j_hat_p, axis=(0, 2))  # diag of conj(X) summed
    den = np.sum(np.abs(r_p) ** 2, axis=(0, 2))
    g = np.empty(2, dtype=complex)
    for k in range(2):
        if den[k] <= 0.0:
            raise CalibrationError(
                f"gain component {k} unidentifiable: zero model power"
            )
        g[k] = num[k] / den[k]
    return g


def estimate_phase(
    j_hat_ip: np.ndarray,
    g_p: np.ndarray,
    h_ip: np.ndarray,
    theta: float,
) -> float:
    """Analytic minimizer of ||Jhat - e^{j phi} G H F||_F^2.

    phi = arg tr(Jhat F^T H^H G^H), wrapped to (-pi, pi]. A vanishing
    trace leaves the phase unidentifiable and raises.
    """
    m = (
        j_hat_ip
        @ faraday_matrix(theta).T
        @ h_ip.conj().T
        @ np.diag(np.conj(g_p))
    )
    c = np.trace(m)
    if abs(c) < 1e-30:
        raise CalibrationError("phase unidentifiable: tr(J F^T H^H G^H) = 0")
    return float(wrap_phase(np.angle(c)))


def estimate_alpha(phases: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Closed-form shift from per-antenna phases and geometry lam (2, M).

    Implements the 2x2 adjugate solution of the least squares system
    phi ~ lam^T alpha; a collinear array makes the denominator vanish.
    """
    u, v = lam[0], lam[1]
    suu = float(np.sum(u * u))
    svv = float(np.sum(v * v))
    suv = float(np.sum(u * v))
    det = suu * svv - suv * suv
    if det <= 1e-12 * suu * svv or not np.isfinite(det) or det == 0.0:
        raise CalibrationError("collinear array geometry: shift unidentifiable")
    adj = np.array([[svv, -suv], [-suv, suu]])
    return (phases @ lam.T @ adj) / det


def total_cost(
    j_hat: np.ndarray,
    params: StructuredJonesParams,
    h: np.ndarray,
    positions: np.ndarray,
) -> float:
    """Misfit summed over sources at the structurally consistent phases."""
    lam_t = positions  # (M, 2)
    cost = 0.0
    for i in range(params.n_sources):
        phases = lam_t @ params.shift[i]
        cost += source_cost(
            j_hat[i], params.gains, h[i], phases, params.faraday[i]
        )
    return cost


def run_sca(
    j_hat: np.ndarray,
    positions: np.ndarray,
    h: np.ndarray,
    init: StructuredJonesParams,
    tol: float = 1e-8,
    max_cycles: int = 100,
) -> tuple[StructuredJonesParams, ScaDiagnostics]:
    """Alternate the four structured updates until the cost settles.

    Parameters
    ----------
    j_hat : ndarray, (D, M, 2, 2)
        Unstructured Jones estimates (NSCA output) at one frequency.
    positions : ndarray, (M, 2)
        Antenna positions in wavelength units at this frequency.
    h : ndarray, (D, M, 2, 2)
        Known beam factors.
    init : StructuredJonesParams
        Starting point; phases start at their structured values.

    Returns
    -------
    params, ScaDiagnostics
    """
    d, m = j_hat.shape[0], j_hat.shape[1]
    params = init.copy()
    lam = positions.T  # (2, M)
    phases = positions @ params.shift.T  # (M, D) structured phases
    diag = ScaDiagnostics()

    def cost_now():
        return sum(
            source_cost(j_hat[i], params.gains, h[i], phases[:, i], params.faraday[i])
            for i in range(d)
        )

    prev = cost_now()
    for cycle in range(max_cycles):
        for i in range(d):
            params.faraday[i] = estimate_faraday(
                j_hat[i], params.gains, h[i], phases[:, i]
            )
        diag.costs.append((cycle, "theta", cost_now()))

        z_f = np.exp(1j * phases.T)[:, :, None, None]  # (D, M, 1, 1)
        r_all = z_f * np.einsum(
            "dpab,dbc->dpac",
            h,
            np.stack([faraday_matrix(t) for t in params.faraday]),
        )
        for p in range(m):
            params.gains[p] = estimate_gain_mono(j_hat[:, p], r_all[:, p])
        diag.costs.append((cycle, "gain", cost_now()))

        for i in range(d):
            for p in range(m):
                phases[p, i] = estimate_phase(
                    j_hat[i, p], params.gains[p], h[i, p], params.faraday[i]
                )
        diag.costs.append((cycle, "phase", cost_now()))

        for i in range(d):
            params.shift[i] = estimate_alpha(phases[:, i], lam)
        phases = positions @ params.shift.T
        cost = cost_now()
        diag.costs.append((cycle, "alpha", cost))

        diag.n_cycles = cycle + 1
        if abs(cost - prev) <= tol * max(abs(prev), 1e-30):
            diag.converged = True
            break
        prev = cost
    return params, diag
