"""Fixed-size complex matrix algebra and structured Jones factors.

All station effects along a source-to-antenna path are 2x2 complex
matrices ("Jones" matrices); baseline covariances and the speckle
covariance live in 4x4. Matrices are plain complex ndarrays of shape
(2, 2) or (4, 4); vec() stacks columns (Fortran order) throughout.

The structured decomposition used by the calibrators is

    J = diag(g) @ H @ Z(alpha) @ F(theta)

with a diagonal electronic gain, a known beam term H, a scalar unitary
ionospheric phase Z and a real Faraday rotation F.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError

I2 = np.eye(2, dtype=complex)
I4 = np.eye(4, dtype=complex)

# column-major vec permutation realizing vec(A.T) = PERM_T @ vec(A) for 2x2 A
PERM_T = np.eye(4)[[0, 2, 1, 3]]


@dataclass
class StructuredJonesParams:
    """Physical parameters of the structured Jones decomposition at one
    frequency.

    Attributes
    ----------
    faraday : ndarray, (D,)
        Faraday rotation angle per source [rad].
    shift : ndarray, (D, 2)
        Apparent ionospheric position shift (eta, zeta) per source
        [rad per wavelength unit].
    gains : ndarray, (M, 2) complex
        Per-antenna electronic gain of the two feeds; direction and
        frequency independent.
    """

    faraday: np.ndarray
    shift: np.ndarray
    gains: np.ndarray

    def __post_init__(self):
        self.faraday = np.atleast_1d(np.asarray(self.faraday, dtype=float))
        self.shift = np.asarray(self.shift, dtype=float).reshape(self.faraday.size, 2)
        self.gains = np.asarray(self.gains, dtype=complex)

    @property
    def n_sources(self) -> int:
        return self.faraday.size

    @property
    def n_antennas(self) -> int:
        return self.gains.shape[0]

    def copy(self) -> "StructuredJonesParams":
        return StructuredJonesParams(
            self.faraday.copy(), self.shift.copy(), self.gains.copy()
        )


def faraday_matrix(theta: float) -> np.ndarray:
    """Polarization-plane rotation by ``theta`` radians.

    Returns the real orthogonal matrix
    [[cos t, -sin t], [sin t, cos t]] with determinant 1.
    """
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=complex)


def faraday_derivative(theta: float) -> np.ndarray:
    """Elementwise derivative of :func:`faraday_matrix` w.r.t. the angle."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[-s, -c], [c, -s]], dtype=complex)


def ionospheric_phase(alpha: np.ndarray, r: np.ndarray) -> float:
    """Refractive phase eta*u + zeta*v for shift ``alpha`` and antenna
    position ``r`` (both length-2, wavelength units)."""
    return float(alpha[0] * r[0] + alpha[1] * r[1])


def ionospheric_matrix(alpha: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Scalar unitary phase screen exp(j(eta*u + zeta*v)) * I2."""
    return np.exp(1j * ionospheric_phase(alpha, r)) * I2


def gain_matrix(g: np.ndarray) -> np.ndarray:
    """diag(g) for a complex 2-vector of feed gains."""
    return np.diag(np.asarray(g, dtype=complex))


def compose_jones(
    g: np.ndarray,
    h: np.ndarray,
    alpha: np.ndarray,
    theta: float,
    r: np.ndarray,
) -> np.ndarray:
    """Full structured Jones matrix diag(g) @ H @ Z(alpha) @ F(theta).

    Factor order matters and is fixed; ``r`` is the antenna position in
    wavelength units at the frequency the parameters refer to.
    """
    return gain_matrix(g) @ np.asarray(h, dtype=complex) @ ionospheric_matrix(
        alpha, r
    ) @ faraday_matrix(theta)


def vec2(a: np.ndarray) -> np.ndarray:
    """Column-stacking vec of a 2x2 matrix (length-4 vector)."""
    return np.asarray(a, dtype=complex).reshape(4, order="F")


def unvec2(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`vec2`."""
    return np.asarray(v, dtype=complex).reshape(2, 2, order="F")


def kron_conj_vec(j_q: np.ndarray, j_p: np.ndarray, c: np.ndarray) -> np.ndarray:
    """(conj(j_q) kron j_p) @ c, i.e. vec(j_p @ C @ j_q^H) for c = vec(C)."""
    return np.kron(np.conj(j_q), j_p) @ np.asarray(c, dtype=complex)


def max_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    """Largest elementwise absolute difference. Preferred equality metric:
    a Frobenius tolerance can hide a single bad entry."""
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def cholesky_hpd(a: np.ndarray, pivot_floor: float = 1e-14) -> np.ndarray:
    """Lower Cholesky factor of a Hermitian positive definite matrix.

    Raises
    ------
    CalibrationError
        If any pivot is <= ``pivot_floor``; near-singular inputs must
        surface as an error rather than propagate NaNs.
    """
    a = np.asarray(a, dtype=complex)
    n = a.shape[0]
    low = np.zeros_like(a)
    for j in range(n):
        d = a[j, j].real - np.sum(np.abs(low[j, :j]) ** 2)
        if d <= pivot_floor:
            raise CalibrationError(
                f"Cholesky pivot {d:.3e} at index {j} is below {pivot_floor:g}"
            )
        low[j, j] = np.sqrt(d)
        if j + 1 < n:
            low[j + 1 :, j] = (
                a[j + 1 :, j] - low[j + 1 :, :j] @ np.conj(low[j, :j])
            ) / low[j, j]
    return low


def hpd_inverse(a: np.ndarray, pivot_floor: float = 1e-14) -> np.ndarray:
    """Inverse of a Hermitian positive definite matrix via Cholesky."""
    low = cholesky_hpd(a, pivot_floor)
    low_inv = np.linalg.inv(low)
    return low_inv.conj().T @ low_inv


def hpd_logdet(a: np.ndarray, pivot_floor: float = 1e-14) -> float:
    """log det of a Hermitian positive definite matrix via Cholesky."""
    low = cholesky_hpd(a, pivot_floor)
    return float(2.0 * np.sum(np.log(np.diag(low).real)))


def random_hpd(rng: np.random.Generator, n: int = 4, unit_trace: bool = True) -> np.ndarray:
    """Random Hermitian positive definite matrix A A^H, optionally
    normalized to unit trace."""
    a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    m = a @ a.conj().T + 1e-3 * np.eye(n)
    if unit_trace:
        m = m / np.trace(m).real
    return m


def wrap_phase(phi):
    """Wrap angle(s) to the half-open interval (-pi, pi]."""
    return -(np.mod(-np.asarray(phi) + np.pi, 2.0 * np.pi) - np.pi)


def canonical_faraday(theta):
    """Wrap Faraday angle(s) to (-pi/2, pi/2]; F(theta + pi) = -F(theta)
    differs only by a per-source phase the data cannot distinguish."""
    return -(np.mod(-np.asarray(theta) + np.pi / 2, np.pi) - np.pi / 2)
