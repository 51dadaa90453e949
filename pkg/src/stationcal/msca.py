"""Multi-frequency consensus calibration.

One agent per frequency channel minimizes its local augmented
Lagrangian over the propagation parameters eps = (theta, eta, zeta) per
source; a fusion step combines all agents into the frequency-flat
global variable z through the known 1/f^2 model; duals ascend on the
consensus gap. Feed gains are shared across frequency and refreshed in
closed form outside the consensus loop.

Frequencies are normalized by the first channel before any consensus
algebra so the model weights stay O(1) regardless of the physical unit.
Agents only ever exchange AgentMessage payloads with the fusion step,
and the fusion reduce runs in fixed frequency order, so results are
identical to the sequential schedule no matter how agents are executed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError
from .jones import (
    StructuredJonesParams,
    faraday_derivative,
    faraday_matrix,
)
from .sca import _as_gain_matrices, run_sca, source_cost


@dataclass(frozen=True)
class AgentMessage:
    """Payload exchanged between a frequency agent and the fusion step.

    to_fusion carries, per source, the 3-vector B^T (y + rho eps) and
    the weight matrix B^T B; from_fusion broadcasts every z_i. Nothing
    else ever crosses the agent boundary.
    """

    direction: str  # "to_fusion" | "from_fusion"
    freq_index: int | None = None
    contribs: np.ndarray | None = None  # (D, 3)
    weights: np.ndarray | None = None  # (3, 3)
    z: np.ndarray | None = None  # (D, 3)


@dataclass
class MscaDiagnostics:
    trace: list = field(default_factory=list)  # (iter, primal, dual, cost, rho)
    outer_cycles: int = 0
    middle_iterations: int = 0
    consensus_converged: bool = False
    gains_converged: bool = False
    final_primal: float = np.inf
    final_dual: float = np.inf
    inner_flagged: int = 0


@dataclass
class MscaResult:
    eps: np.ndarray  # (F, D, 3) per-frequency (theta, eta, zeta)
    z: np.ndarray  # (D, 3) consensus variable (reference-frequency scale)
    gains: np.ndarray  # (M, 2) shared feed gains
    diagnostics: MscaDiagnostics = field(default_factory=MscaDiagnostics)

    def params_at(self, f_index: int) -> StructuredJonesParams:
        e = self.eps[f_index]
        return StructuredJonesParams(e[:, 0].copy(), e[:, 1:].copy(), self.gains.copy())


def freq_weight(f_norm: float) -> float:
    """Diagonal entry of the frequency model B = f^-2 I3."""
    return 1.0 / (f_norm * f_norm)


def local_cost(
    eps: np.ndarray,
    j_hat_i: np.ndarray,
    gains: np.ndarray,
    h_i: np.ndarray,
    positions: np.ndarray,
) -> float:
    """Data misfit sum_p ||Jhat - G H Z F||_F^2 at eps = (theta, eta, zeta)."""
    phases = positions @ eps[1:]
    return source_cost(j_hat_i, gains, h_i, phases, eps[0])


def augmented_terms(
    eps: np.ndarray, z_i: np.ndarray, y_i: np.ndarray, rho: float, f_norm: float
) -> float:
    """Consensus part y^T (eps - B z) + (rho/2) ||eps - B z||^2."""
    r = eps - freq_weight(f_norm) * z_i
    return float(y_i @ r + 0.5 * rho * (r @ r))


def grad_local(
    eps: np.ndarray,
    z_i: np.ndarray,
    y_i: np.ndarray,
    rho: float,
    f_norm: float,
    j_hat_i: np.ndarray,
    gains: np.ndarray,
    h_i: np.ndarray,
    positions: np.ndarray,
) -> np.ndarray:
    """Analytic gradient of the local augmented Lagrangian.

    The data-term partials come from the trace identities

        d/dtheta: sum_p tr(S + S^H),  S = -G H Z dF Jhat^H
        d/deta:   sum_p tr(D + D^H),  D = j u_p conj(Z) M
        d/dzeta:  sum_p tr(V + V^H),  V = j v_p conj(Z) M

    with M = Jhat F^T H^H G^H, plus the linear consensus terms.
    """
    theta = eps[0]
    phases = positions @ eps[1:]
    zscal = np.exp(1j * phases)
    gh = _as_gain_matrices(gains) @ h_i
    f_mat = faraday_matrix(theta)
    f_der = faraday_derivative(theta)

    s_mats = -(zscal[:, None, None] * gh) @ f_der @ np.conj(
        np.swapaxes(j_hat_i, -1, -2)
    )
    d_theta = float(np.sum(np.trace(s_mats, axis1=1, axis2=2).real) * 2.0)

    m_mats = j_hat_i @ f_mat.T @ np.conj(np.swapaxes(gh, -1, -2))
    tr_m = np.trace(m_mats, axis1=1, axis2=2)
    u, v = positions[:, 0], positions[:, 1]
    d_eta = float(2.0 * np.sum((1j * u * np.conj(zscal) * tr_m).real))
    d_zeta = float(2.0 * np.sum((1j * v * np.conj(zscal) * tr_m).real))

    data_grad = np.array([d_theta, d_eta, d_zeta])
    return y_i + rho * (eps - freq_weight(f_norm) * z_i) + data_grad


class _SourceFit:
    """Per (source, frequency) sufficient statistics for the misfit.

    Because Z is a unit scalar and F orthogonal, the misfit collapses to

        cost(eps) = const - 2 Re sum_p conj(z_p) (cos t s0_p + sin t s1_p)

    with z_p = exp(j(eta u_p + zeta v_p)) and scalars s0, s1 built from
    (G H)^H Jhat. Cost and gradient are then O(M) with no matrix work;
    equivalence with local_cost / grad_local is covered by tests.
    """

    def __init__(self, j_hat_i, gains, h_i, positions):
        gh = _as_gain_matrices(gains) @ h_i
        proj = np.einsum("pba,pbc->pac", np.conj(gh), j_hat_i)  # (GH)^H Jhat
        self.s0 = np.trace(proj, axis1=1, axis2=2)
        self.s1 = proj[:, 1, 0] - proj[:, 0, 1]
        self.u = positions[:, 0]
        self.v = positions[:, 1]
        self.const = float(
            np.sum(np.abs(j_hat_i) ** 2) + np.sum(np.abs(gh) ** 2)
        )

    def cost(self, eps):
        w = np.exp(-1j * (self.u * eps[1] + self.v * eps[2])) * (
            np.cos(eps[0]) * self.s0 + np.sin(eps[0]) * self.s1
        )
        return self.const - 2.0 * float(np.sum(w.real))

    def grad(self, eps):
        zc = np.exp(-1j * (self.u * eps[1] + self.v * eps[2]))
        c, s = np.cos(eps[0]), np.sin(eps[0])
        w = zc * (c * self.s0 + s * self.s1)
        d_theta = -2.0 * float(np.sum((zc * (-s * self.s0 + c * self.s1)).real))
        d_eta = -2.0 * float(np.sum((-1j * self.u * w).real))
        d_zeta = -2.0 * float(np.sum((-1j * self.v * w).real))
        return np.array([d_theta, d_eta, d_zeta])


def _descend(
    fit: _SourceFit,
    eps0: np.ndarray,
    z_i: np.ndarray,
    y_i: np.ndarray,
    rho: float,
    f_norm: float,
    grad_tol: float = 1e-8,
    max_steps: int = 200,
    armijo_c: float = 1e-4,
    shrink: float = 0.5,
) -> tuple[np.ndarray, bool]:
    """Backtracking gradient descent on fit.cost + augmented terms.

    Returns (eps, converged). The local objective never increases; a
    failed line search returns the last iterate unconverged.
    """
    b = freq_weight(f_norm)

    def total(e):
        r = e - b * z_i
        return fit.cost(e) + float(y_i @ r + 0.5 * rho * (r @ r))

    eps = eps0.copy()
    val = total(eps)
    t_prev = 1.0
    for _ in range(max_steps):
        g = fit.grad(eps) + y_i + rho * (eps - b * z_i)
        gnorm2 = float(g @ g)
        if np.sqrt(gnorm2) < grad_tol:
            return eps, True
        t = min(1.0, 4.0 * t_prev)
        while True:
            cand = eps - t * g
            cval = total(cand)
            if cval <= val - armijo_c * t * gnorm2:
                break
            t *= shrink
            if t < 1e-20:
                return eps, False
        eps, val, t_prev = cand, cval, t
    return eps, False


def local_epsilon_update(
    eps0: np.ndarray,
    z_i: np.ndarray,
    y_i: np.ndarray,
    rho: float,
    f_norm: float,
    j_hat_i: np.ndarray,
    gains: np.ndarray,
    h_i: np.ndarray,
    positions: np.ndarray,
    grad_tol: float = 1e-8,
    max_steps: int = 200,
) -> tuple[np.ndarray, bool]:
    """One agent's local minimization for one source (consensus step 1)."""
    fit = _SourceFit(j_hat_i, gains, h_i, positions)
    return _descend(
        fit, np.asarray(eps0, dtype=float), z_i, y_i, rho, f_norm,
        grad_tol=grad_tol, max_steps=max_steps,
    )


def global_z_update(messages: list[AgentMessage], rho: float) -> np.ndarray:
    """Fusion: closed-form minimizer of the summed consensus terms.

    z_i = (rho sum_f B^T B)^{-1} sum_f B^T (y_i + rho eps_i), assembled
    from the agents' to_fusion payloads.
    """
    to_fusion = [m for m in messages if m.direction == "to_fusion"]
    if not to_fusion:
        raise CalibrationError("no agent messages: empty frequency set")
    den = rho * np.sum([m.weights for m in to_fusion], axis=0)
    num = np.sum([m.contribs for m in to_fusion], axis=0)  # (D, 3)
    return np.linalg.solve(den, num.T).T


def dual_update(
    y_i: np.ndarray,
    eps: np.ndarray,
    z_i: np.ndarray,
    rho: float,
    f_norm: float,
) -> np.ndarray:
    """Dual ascent y <- y + rho (eps - B z)."""
    return y_i + rho * (eps - freq_weight(f_norm) * z_i)


def gain_update(
    j_hat: np.ndarray,
    h: np.ndarray,
    eps: np.ndarray,
    positions_per_freq: np.ndarray,
) -> np.ndarray:
    """Closed-form shared feed gains across all sources and frequencies.

    For R = H Z F, component k of antenna p is
    (sum_{f,i} conj(W)_kk)^{-1} sum_{f,i} conj(X)_kk with X = R Jhat^H
    and W = R R^H. Arrays are (F, D, M, 2, 2), eps is (F, D, 3) and
    positions_per_freq (F, M, 2).
    """
    n_f, d, m = j_hat.shape[0], j_hat.shape[1], j_hat.shape[2]
    num = np.zeros((m, 2), dtype=complex)
    den = np.zeros((m, 2))
    for fi in range(n_f):
        for i in range(d):
            phases = positions_per_freq[fi] @ eps[fi, i, 1:]
            r = (
                np.exp(1j * phases)[:, None, None]
                * h[fi, i]
                @ faraday_matrix(eps[fi, i, 0])
            )
            num += np.sum(np.conj(r) * j_hat[fi, i], axis=2)
            den += np.sum(np.abs(r) ** 2, axis=2)
    if np.any(den <= 0.0):
        p, k = np.argwhere(den <= 0.0)[0]
        raise CalibrationError(
            f"gain component {k} of antenna {p} unidentifiable: zero model power"
        )
    return num / den


class _Agent:
    """Per-frequency worker holding only its own channel's data."""

    def __init__(self, index, f_norm, j_hat, h, positions, eps, gains):
        self.index = index
        self.f_norm = f_norm
        self.j_hat = j_hat  # (D, M, 2, 2)
        self.h = h
        self.positions = positions
        self.eps = eps.copy()  # (D, 3)
        self.y = np.zeros_like(self.eps)
        self.set_gains(gains)

    def set_gains(self, gains):
        self.fits = [
            _SourceFit(self.j_hat[i], gains, self.h[i], self.positions)
            for i in range(self.j_hat.shape[0])
        ]

    def local_update(self, z, rho, grad_tol, max_steps):
        flagged = 0
        for i, fit in enumerate(self.fits):
            self.eps[i], ok = _descend(
                fit, self.eps[i], z[i], self.y[i], rho, self.f_norm,
                grad_tol=grad_tol, max_steps=max_steps,
            )
            flagged += 0 if ok else 1
        return flagged

    def to_fusion(self, rho) -> AgentMessage:
        b = freq_weight(self.f_norm)
        return AgentMessage(
            direction="to_fusion",
            freq_index=self.index,
            contribs=b * (self.y + rho * self.eps),
            weights=(b * b) * np.eye(3),
        )

    def receive(self, msg: AgentMessage, rho):
        b = freq_weight(self.f_norm)
        self.y = self.y + rho * (self.eps - b * msg.z)
        return float(np.max(np.linalg.norm(self.eps - b * msg.z, axis=1)))

    def cost(self, z, rho):
        total = 0.0
        b = freq_weight(self.f_norm)
        for i, fit in enumerate(self.fits):
            r = self.eps[i] - b * z[i]
            total += fit.cost(self.eps[i]) + float(
                self.y[i] @ r + 0.5 * rho * (r @ r)
            )
        return total


def run_msca(
    j_hat: np.ndarray,
    freqs: np.ndarray,
    positions: np.ndarray,
    h: np.ndarray,
    init: StructuredJonesParams,
    rho: float = 1.0,
    adapt_rho: bool = False,
    primal_tol: float = 1e-6,
    dual_tol: float = 1e-6,
    max_middle: int = 500,
    max_outer: int = 20,
    gain_tol: float = 1e-8,
    inner_grad_tol: float = 1e-8,
    inner_max_steps: int = 200,
    warm_start_sca: bool = True,
) -> MscaResult:
    """Full multi-frequency calibration.

    Parameters
    ----------
    j_hat : ndarray, (F, D, M, 2, 2)
        Per-frequency unstructured Jones estimates (NSCA outputs).
    freqs : ndarray, (F,)
        Channel frequencies; only ratios matter.
    positions : ndarray, (M, 2)
        Antenna positions in wavelength units at freqs[0]; positions at
        the other channels follow the linear frequency scaling.
    h : ndarray, (F, D, M, 2, 2)
        Known beam factors per channel.
    init : StructuredJonesParams
        Starting parameters expressed at freqs[0]; each agent is warm
        started with a mono-frequency alternating fit unless
        ``warm_start_sca`` is off.

    Returns
    -------
    MscaResult
        eps holds the converged (theta, eta, zeta) per channel, z the
        frequency-flat consensus variable at the freqs[0] scale.
    """
    j_hat = np.asarray(j_hat, dtype=complex)
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    n_f, d, m = j_hat.shape[0], j_hat.shape[1], j_hat.shape[2]
    if freqs.size != n_f:
        raise ValueError("one frequency per Jones block required")
    f_norm = freqs / freqs[0]
    diag = MscaDiagnostics()

    agents = []
    gains = init.gains.copy()
    eps_init = np.zeros((n_f, d, 3))
    sca_eps = []
    for fi in range(n_f):
        pos_f = positions * f_norm[fi]
        scale = 1.0 / (f_norm[fi] ** 2)
        start = StructuredJonesParams(
            init.faraday * scale, init.shift * scale, init.gains.copy()
        )
        if warm_start_sca:
            start, _ = run_sca(j_hat[fi], pos_f, h[fi], start)
        sca_eps.append(start)
        eps_init[fi, :, 0] = start.faraday
        eps_init[fi, :, 1:] = start.shift
    if warm_start_sca:
        gains = gain_update(
            j_hat, h, eps_init, np.stack([positions * s for s in f_norm])
        )
    for fi in range(n_f):
        agents.append(
            _Agent(
                fi, f_norm[fi], j_hat[fi], h[fi],
                positions * f_norm[fi], eps_init[fi], gains,
            )
        )

    z = np.mean(
        [a.eps * (a.f_norm ** 2) for a in agents], axis=0
    )  # (D, 3), consensus start

    it_total = 0
    for outer in range(max_outer):
        diag.consensus_converged = False
        for _ in range(max_middle):
            for agent in agents:
                diag.inner_flagged += agent.local_update(
                    z, rho, inner_grad_tol, inner_max_steps
                )
            messages = [agent.to_fusion(rho) for agent in agents]
            z_new = global_z_update(messages, rho)
            broadcast = AgentMessage(direction="from_fusion", z=z_new)
            primal = max(agent.receive(broadcast, rho) for agent in agents)
            dual = max(
                rho
                * freq_weight(a.f_norm)
                * float(np.max(np.linalg.norm(z_new - z, axis=1)))
                for a in agents
            )
            z = z_new
            it_total += 1
            cost = sum(agent.cost(z, rho) for agent in agents)
            diag.trace.append((it_total, primal, dual, cost, rho))
            diag.final_primal, diag.final_dual = primal, dual
            if adapt_rho:
                if primal > 10.0 * dual:
                    rho *= 2.0
                elif dual > 10.0 * primal:
                    rho /= 2.0
            if primal < primal_tol and dual < dual_tol:
                diag.consensus_converged = True
                break
        diag.middle_iterations = it_total
        diag.outer_cycles = outer + 1

        eps_all = np.stack([a.eps for a in agents])
        gains_new = gain_update(
            j_hat, h, eps_all, np.stack([a.positions for a in agents])
        )
        delta = float(np.max(np.abs(gains_new - gains)))
        gains = gains_new
        for agent in agents:
            agent.set_gains(gains)
        if delta < gain_tol:
            diag.gains_converged = True
            break

    result = MscaResult(
        eps=np.stack([a.eps for a in agents]),
        z=z,
        gains=gains,
        diagnostics=diag,
    )
    return result
