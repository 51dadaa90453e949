"""Robust multi-frequency calibration of compact interferometer stations.

Layout:

* :mod:`stationcal.jones`    small complex matrix algebra, structured factors
* :mod:`stationcal.simulate` ground truth, visibilities, compound-Gaussian noise
* :mod:`stationcal.nsca`     robust unstructured (relaxed-ML) calibration
* :mod:`stationcal.sca`      mono-frequency structured alternating fit
* :mod:`stationcal.msca`     multi-frequency ADMM consensus calibration
* :mod:`stationcal.harness`  Monte-Carlo experiment driver
* :mod:`stationcal.cli`      `calibrate` command line tool
"""

from .errors import CalibrationError, ConfigError
from .jones import (
    StructuredJonesParams,
    canonical_faraday,
    compose_jones,
    faraday_derivative,
    faraday_matrix,
    ionospheric_matrix,
    kron_conj_vec,
    wrap_phase,
)
from .msca import MscaResult, run_msca
from .nsca import NoiseEstimate, run_nsca
from .sca import run_sca
from .simulate import (
    NoiseConfig,
    OutlierSource,
    SkyModel,
    TextureSpec,
    VisibilitySet,
    inject_outliers,
    sample_noise,
    scale_truth_to_frequency,
    snr_to_sigma,
    synthesize_clean,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationError",
    "ConfigError",
    "StructuredJonesParams",
    "canonical_faraday",
    "compose_jones",
    "faraday_derivative",
    "faraday_matrix",
    "ionospheric_matrix",
    "kron_conj_vec",
    "wrap_phase",
    "MscaResult",
    "run_msca",
    "NoiseEstimate",
    "run_nsca",
    "run_sca",
    "NoiseConfig",
    "OutlierSource",
    "SkyModel",
    "TextureSpec",
    "VisibilitySet",
    "inject_outliers",
    "sample_noise",
    "scale_truth_to_frequency",
    "snr_to_sigma",
    "synthesize_clean",
]
