"""Synthetic station observations.

Generates ground-truth structured parameters, the noise-free baseline
cross-correlations they imply, compound-Gaussian noise (a positive
texture scaling a shared Gaussian speckle) and weak unmodeled outlier
sources. Everything is deterministic given a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError
from .jones import (
    I2,
    StructuredJonesParams,
    cholesky_hpd,
    compose_jones,
    vec2,
)

I4_QUARTER = np.eye(4, dtype=complex) / 4.0


@dataclass
class OutlierSource:
    """Weak source present in the data but absent from the calibration
    model. Direction-dependent factors default to identity; a custom
    (faraday, shift) pair gives the source its own propagation effects,
    unknown to any solver."""

    coherency: np.ndarray
    faraday: float = 0.0
    shift: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.coherency = np.asarray(self.coherency, dtype=complex).reshape(2, 2)
        self.shift = np.asarray(self.shift, dtype=float).reshape(2)

    @property
    def flux(self) -> float:
        return float(np.trace(self.coherency).real)


@dataclass
class SkyModel:
    """Known calibrators plus unmodeled outliers.

    Attributes
    ----------
    coherencies : ndarray, (D, 2, 2) complex
        Polarization state of each calibrator source.
    beams : ndarray, (D, M, 2, 2) complex or None
        Known per source/antenna electromagnetic factors H; identity
        when None.
    outliers : list of OutlierSource
        Their fluxes must stay strictly below the weakest calibrator.
    """

    coherencies: np.ndarray
    beams: np.ndarray | None = None
    outliers: list = field(default_factory=list)

    def __post_init__(self):
        self.coherencies = np.asarray(self.coherencies, dtype=complex)
        if self.coherencies.ndim == 2:
            self.coherencies = self.coherencies[None]
        if self.beams is not None:
            self.beams = np.asarray(self.beams, dtype=complex)
        min_flux = min(np.trace(c).real for c in self.coherencies)
        for out in self.outliers:
            if out.flux >= min_flux:
                raise ValueError(
                    f"outlier flux {out.flux:g} is not below the weakest "
                    f"calibrator flux {min_flux:g}"
                )

    @property
    def n_sources(self) -> int:
        return self.coherencies.shape[0]

    def beam(self, n_antennas: int) -> np.ndarray:
        """H factors as a dense (D, M, 2, 2) array (identity if unset)."""
        if self.beams is not None:
            return self.beams
        d = self.n_sources
        h = np.zeros((d, n_antennas, 2, 2), dtype=complex)
        h[:, :] = I2
        return h


@dataclass
class VisibilitySet:
    """Per-baseline 4-vectors v_pq for p < q in lexicographic order."""

    n_antennas: int
    values: np.ndarray  # (B, 4) complex

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        b = self.n_antennas * (self.n_antennas - 1) // 2
        if self.values.shape != (b, 4):
            raise ValueError(
                f"expected {(b, 4)} visibility block for M={self.n_antennas}, "
                f"got {self.values.shape}"
            )

    @property
    def n_baselines(self) -> int:
        return self.values.shape[0]

    def stacked(self) -> np.ndarray:
        """The full observation vector x of length 4B."""
        return self.values.reshape(-1)

    def copy(self) -> "VisibilitySet":
        return VisibilitySet(self.n_antennas, self.values.copy())


@dataclass
class TextureSpec:
    """Distribution of the positive per-baseline texture.

    family "constant" gives tau = 1 (plain Gaussian noise); "invgamma"
    draws tau from an inverse-gamma with unit mean and shape nu > 1,
    heavy-tailed for small nu.
    """

    family: str = "constant"
    nu: float = 3.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.family == "constant":
            return np.ones(n)
        if self.family == "invgamma":
            if self.nu <= 1.0:
                raise ValueError("invgamma texture needs nu > 1 for a finite mean")
            return (self.nu - 1.0) / rng.gamma(shape=self.nu, scale=1.0, size=n)
        raise ValueError(f"unknown texture family {self.family!r}")


@dataclass
class NoiseConfig:
    """Compound-Gaussian noise specification n = sqrt(tau) * L w with
    L the Cholesky factor of sigma2 * omega."""

    sigma2: float
    omega: np.ndarray = field(default_factory=lambda: I4_QUARTER.copy())
    texture: TextureSpec = field(default_factory=TextureSpec)

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=complex)


def baseline_pairs(n_antennas: int) -> np.ndarray:
    """All antenna pairs (p, q), p < q, in lexicographic order, 0-based."""
    return np.array(
        [(p, q) for p in range(n_antennas) for q in range(p + 1, n_antennas)],
        dtype=int,
    )


def build_jones(
    params: StructuredJonesParams,
    beams: np.ndarray,
    positions: np.ndarray,
) -> np.ndarray:
    """Compose the full (D, M, 2, 2) structured Jones set at one frequency."""
    d, m = params.n_sources, params.n_antennas
    out = np.empty((d, m, 2, 2), dtype=complex)
    for i in range(d):
        for p in range(m):
            out[i, p] = compose_jones(
                params.gains[p],
                beams[i, p],
                params.shift[i],
                params.faraday[i],
                positions[p],
            )
    return out


def visibilities_from_jones(
    jones: np.ndarray, coherencies: np.ndarray, n_antennas: int
) -> VisibilitySet:
    """Noise-free visibilities sum_i vec(J_ip C_i J_iq^H) for every p < q.

    ``jones`` has shape (D, M, 2, 2); the result follows the canonical
    baseline ordering of :func:`baseline_pairs`.
    """
    pairs = baseline_pairs(n_antennas)
    jc = np.einsum("dpab,dbc->dpac", jones, coherencies)  # J_ip @ C_i
    prod = np.einsum(
        "dkab,dkcb->kca", jc[:, pairs[:, 0]], np.conj(jones[:, pairs[:, 1]])
    )
    # prod[k, c, a] = sum_d (J C J^H)[a, c] -> column-major vec is reshape(B, 4)
    return VisibilitySet(n_antennas, prod.reshape(len(pairs), 4))


def synthesize_clean(
    sky: SkyModel,
    truth: StructuredJonesParams,
    positions: np.ndarray,
) -> VisibilitySet:
    """Noise-free observation of the calibrator sources.

    ``positions`` are antenna positions (M, 2) in wavelength units at the
    same frequency the ``truth`` parameters refer to.
    """
    positions = np.asarray(positions, dtype=float)
    if positions.shape[0] != truth.n_antennas:
        raise ValueError(
            f"geometry has {positions.shape[0]} antennas, "
            f"parameters have {truth.n_antennas}"
        )
    if sky.n_sources != truth.n_sources:
        raise ValueError(
            f"sky has {sky.n_sources} calibrators, parameters have {truth.n_sources}"
        )
    jones = build_jones(truth, sky.beam(truth.n_antennas), positions)
    return visibilities_from_jones(jones, sky.coherencies, truth.n_antennas)


def sample_noise(
    cfg: NoiseConfig, rng_seed, n_baselines: int
) -> tuple[np.ndarray, np.ndarray]:
    """Draw per-baseline compound-Gaussian noise 4-vectors.

    Returns
    -------
    noise : ndarray, (B, 4) complex
    tau : ndarray, (B,)
        The texture draws actually used (all ones for constant texture).
    """
    rng = np.random.default_rng(rng_seed)
    tau = cfg.texture.sample(rng, n_baselines)
    if cfg.sigma2 == 0.0:
        return np.zeros((n_baselines, 4), dtype=complex), tau
    low = np.sqrt(cfg.sigma2) * cholesky_hpd(cfg.omega)
    w = (
        rng.standard_normal((n_baselines, 4))
        + 1j * rng.standard_normal((n_baselines, 4))
    ) / np.sqrt(2.0)
    return np.sqrt(tau)[:, None] * (w @ low.T), tau


def inject_outliers(
    vis: VisibilitySet,
    outliers: list,
    positions: np.ndarray,
    freq: float = 1.0,
    ref_freq: float = 1.0,
) -> VisibilitySet:
    """Add the unmodeled-source terms to an observation.

    Outlier propagation parameters are interpreted at ``ref_freq`` and
    follow the same f^-2 law as the calibrators when ``freq`` differs.
    """
    if not outliers:
        return vis.copy()
    positions = np.asarray(positions, dtype=float)
    scale = (ref_freq / freq) ** 2
    pairs = baseline_pairs(vis.n_antennas)
    values = vis.values.copy()
    for out in outliers:
        jones = np.empty((vis.n_antennas, 2, 2), dtype=complex)
        for p in range(vis.n_antennas):
            jones[p] = compose_jones(
                np.ones(2),
                I2,
                out.shift * scale,
                out.faraday * scale,
                positions[p],
            )
        jc = np.einsum("pab,bc->pac", jones, out.coherency)
        prod = np.einsum(
            "kab,kcb->kca", jc[pairs[:, 0]], np.conj(jones[pairs[:, 1]])
        )
        values += prod.reshape(len(pairs), 4)
    return VisibilitySet(vis.n_antennas, values)


def scale_truth_to_frequency(
    base: StructuredJonesParams,
    positions: np.ndarray,
    freq: float,
    ref_freq: float,
) -> tuple[StructuredJonesParams, np.ndarray]:
    """Map reference-frequency truth to another frequency.

    Faraday angles and ionospheric shifts scale as f^-2, antenna
    positions in wavelength units scale as f, gains are untouched.
    """
    if freq <= 0 or ref_freq <= 0:
        raise ValueError("frequencies must be positive")
    s = (ref_freq / freq) ** 2
    scaled = StructuredJonesParams(
        base.faraday * s, base.shift * s, base.gains.copy()
    )
    return scaled, np.asarray(positions, dtype=float) * (freq / ref_freq)


def snr_to_sigma(clean: VisibilitySet, snr_db: float) -> float:
    """Noise power sigma2 so that ||x||^2 / (4B sigma2) = 10^(snr/10).

    This is the package's SNR convention: mean squared signal entry over
    the total 4-vector noise power.
    """
    x = clean.stacked()
    energy = float(np.sum(np.abs(x) ** 2))
    if energy == 0.0:
        raise CalibrationError("clean signal is identically zero; SNR undefined")
    return energy / (x.size * 10.0 ** (snr_db / 10.0))


def save_dataset(
    path,
    per_freq: list[tuple[float, VisibilitySet]],
    n_sources: int,
    seed: int,
) -> None:
    """Write observations to the columnar text format.

    Header lines carry M, D, F, B and the seed; each frequency block
    starts with ``freq <value>`` followed by one row per baseline:
    ``p q`` then 8 reals (interleaved re/im of the 4-vector). 17
    significant digits make the round trip bit exact.
    """
    m = per_freq[0][1].n_antennas
    b = per_freq[0][1].n_baselines
    pairs = baseline_pairs(m)
    lines = [
        "# stationcal dataset v1",
        f"M {m}",
        f"D {n_sources}",
        f"F {len(per_freq)}",
        f"B {b}",
        f"seed {seed}",
    ]
    for freq, vis in per_freq:
        lines.append(f"freq {freq:.17g}")
        for k, (p, q) in enumerate(pairs):
            comps = " ".join(
                f"{z.real:.17g} {z.imag:.17g}" for z in vis.values[k]
            )
            lines.append(f"{p} {q} {comps}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path):
    """Inverse of :func:`save_dataset`.

    Returns
    -------
    per_freq : list of (freq, VisibilitySet)
    meta : dict with keys M, D, F, B, seed
    """
    meta = {}
    per_freq = []
    rows = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, rest = line.split(maxsplit=1)
            if key in ("M", "D", "F", "B", "seed"):
                meta[key] = int(rest)
            elif key == "freq":
                rows = []
                per_freq.append((float(rest), rows))
            else:
                vals = line.split()
                reals = np.array([float(v) for v in vals[2:]])
                rows.append(reals[0::2] + 1j * reals[1::2])
    out = [
        (freq, VisibilitySet(meta["M"], np.array(rows)))
        for freq, rows in per_freq
    ]
    return out, meta
