"""Monte-Carlo experiment driver.

Runs the full simulate -> calibrate pipeline over a grid of
(SNR, noise mode, frequency count) cells, accumulates squared parameter
errors against the ground truth, and emits CSV plus a plot script.

Conventions (documented, since estimator studies need them pinned):

* SNR follows :func:`stationcal.simulate.snr_to_sigma`.
* The unstructured solver starts at the true Jones matrices, so the
  recorded errors measure the estimator's statistical error rather than
  cold-start convergence; the structured stage starts at the truth
  perturbed by ``init_perturbation`` and must genuinely re-converge.
* Faraday angles are compared on (-pi/2, pi/2] (a pi offset is a
  per-source phase the data cannot see); gains are compared after
  rotating the global phase so the first feed of antenna 0 is real
  positive.
* Every trial is a pure function of (config, snr, mode, trial index),
  so results are reproducible for any parallel schedule.
"""

from __future__ import annotations

import concurrent.futures
import csv
import os
from dataclasses import dataclass, fields

import numpy as np

from .errors import CalibrationError, ConfigError
from .jones import StructuredJonesParams, canonical_faraday
from .msca import run_msca
from .nsca import run_nsca
from .sca import run_sca
from .simulate import (
    NoiseConfig,
    OutlierSource,
    SkyModel,
    TextureSpec,
    VisibilitySet,
    build_jones,
    inject_outliers,
    sample_noise,
    scale_truth_to_frequency,
    snr_to_sigma,
    synthesize_clean,
)

# stream labels for derived seeds; values are arbitrary but frozen
_STREAM_SCENE = 101
_STREAM_NOISE = 202
_STREAM_INIT = 303


@dataclass
class ExperimentConfig:
    """Flat experiment description; see README for the config-file keys."""

    antennas: int = 8
    sources: int = 2
    outliers: int = 4
    freqs: tuple = (150e6, 156e6, 162e6, 168e6)
    f_counts: tuple = (1, 2, 4)
    snr_db: tuple = (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0)
    trials: int = 200
    seed: int = 1
    modes: tuple = ("robust",)
    texture: str = "invgamma"
    texture_nu: float = 3.0
    outlier_flux: float = 0.02
    omega_kind: str = "identity"  # or "random"
    init_perturbation: float = 1e-2
    nsca_max_outer: int = 50
    nsca_tol: float = 1e-6
    nsca_sweeps: int = 3
    sca_tol: float = 1e-8
    sca_max_cycles: int = 100
    rho: float = 1.0
    adapt_rho: bool = False
    admm_primal_tol: float = 1e-6
    admm_dual_tol: float = 1e-6
    admm_max_middle: int = 500
    admm_max_outer: int = 20
    trace: bool = False

    def validate(self) -> list:
        warnings = []
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if len(self.freqs) < 1:
            raise ConfigError("at least one frequency required")
        if any(f <= 0 for f in self.freqs):
            raise ConfigError("frequencies must be positive")
        if not self.f_counts or any(
            c < 1 or c > len(self.freqs) for c in self.f_counts
        ):
            raise ConfigError(
                f"f_counts {self.f_counts} must lie in 1..{len(self.freqs)}"
            )
        for m in self.modes:
            if m not in ("robust", "gaussian"):
                raise ConfigError(f"unknown mode {m!r}")
        if self.texture not in ("constant", "invgamma"):
            raise ConfigError(f"unknown texture family {self.texture!r}")
        if self.antennas < 3:
            warnings.append(
                "fewer than 3 antennas: too few baselines to estimate the "
                "speckle covariance reliably"
            )
        return warnings


@dataclass
class MseRecord:
    parameter: str
    snr_db: float
    n_freq: int
    mode: str
    mse: float
    trials: int
    ci_halfwidth: float

    def key(self):
        return (self.parameter, self.snr_db, self.n_freq, self.mode)


_BOOL_KEYS = {"adapt_rho", "trace"}
_INT_KEYS = {
    "antennas", "sources", "outliers", "trials", "seed",
    "nsca_max_outer", "nsca_sweeps", "sca_max_cycles",
    "admm_max_middle", "admm_max_outer",
}
_TUPLE_FLOAT_KEYS = {"freqs", "snr_db"}
_TUPLE_INT_KEYS = {"f_counts"}
_TUPLE_STR_KEYS = {"modes"}
_STR_KEYS = {"texture", "omega_kind"}


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse the flat ``key = value`` config format ('#' starts a comment)."""
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if key in _BOOL_KEYS:
                values[key] = val.lower() in ("1", "true", "yes", "on")
            elif key in _INT_KEYS:
                values[key] = int(val)
            elif key in _TUPLE_FLOAT_KEYS:
                values[key] = tuple(float(v) for v in val.split(",") if v.strip())
            elif key in _TUPLE_INT_KEYS:
                values[key] = tuple(int(v) for v in val.split(",") if v.strip())
            elif key in _TUPLE_STR_KEYS:
                values[key] = tuple(v.strip() for v in val.split(",") if v.strip())
            elif key in _STR_KEYS:
                values[key] = val
            else:
                values[key] = float(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: cannot parse {key} = {val!r}") from exc
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def parse_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


def write_config(cfg: ExperimentConfig, path) -> None:
    lines = []
    for f in fields(ExperimentConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def build_scene(cfg: ExperimentConfig):
    """Deterministic ground truth shared by every cell of the experiment.

    Returns (sky, truth, positions, omega_true). The geometry is a
    centered random layout a few wavelengths across; centering keeps the
    shift estimate insensitive to per-source phase offsets the data
    cannot constrain. Calibrators get distinct diagonal coherencies so
    their polarization states pin the Faraday angle.
    """
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _STREAM_SCENE)))
    m, d = cfg.antennas, cfg.sources
    while True:
        positions = rng.uniform(-2.0, 2.0, (m, 2))
        positions -= positions.mean(axis=0)
        if np.linalg.matrix_rank(positions) == 2:
            break
    fluxes = 2.0 * 0.45 ** np.arange(d)  # 2.0, 0.9, ...
    pol = 0.4 * 0.8 ** np.arange(d)
    coherencies = np.zeros((d, 2, 2), dtype=complex)
    for i in range(d):
        coherencies[i] = np.diag(
            [fluxes[i] * (1 + pol[i]) / 2, fluxes[i] * (1 - pol[i]) / 2]
        )
    outliers = [
        OutlierSource(
            coherency=np.diag(
                [cfg.outlier_flux * 0.55, cfg.outlier_flux * 0.45]
            ).astype(complex)
        )
        for _ in range(cfg.outliers)
    ]
    sky = SkyModel(coherencies=coherencies, outliers=outliers)
    truth = StructuredJonesParams(
        faraday=rng.uniform(-0.4, 0.4, d),
        shift=rng.uniform(-0.25, 0.25, (d, 2)),
        gains=(1.0 + 0.15 * rng.standard_normal((m, 2)))
        * np.exp(1j * rng.uniform(-np.pi / 3, np.pi / 3, (m, 2))),
    )
    if cfg.omega_kind == "random":
        from .jones import random_hpd

        omega_true = random_hpd(rng, 4)
    else:
        omega_true = np.eye(4, dtype=complex) / 4.0
    return sky, truth, positions, omega_true


def _fix_gain_phase(gains: np.ndarray) -> np.ndarray:
    """Rotate the global phase so gains[0, 0] is real positive."""
    ref = gains[0, 0]
    if ref == 0:
        return gains.copy()
    return gains * (np.conj(ref) / abs(ref))


def _snr_key(snr_db: float) -> int:
    return int(round(snr_db * 1000.0))


def _perturbed_init(
    truth: StructuredJonesParams, scale: float, rng: np.random.Generator
) -> StructuredJonesParams:
    d, m = truth.n_sources, truth.n_antennas
    return StructuredJonesParams(
        faraday=truth.faraday + scale * rng.standard_normal(d),
        shift=truth.shift + scale * rng.standard_normal((d, 2)),
        gains=truth.gains
        * (1.0 + scale * rng.standard_normal((m, 2)))
        * np.exp(1j * scale * rng.standard_normal((m, 2))),
    )


def _run_trial(task):
    """Worker for one (snr, mode, trial): returns squared errors per cell.

    The unstructured stage runs once per frequency channel and is shared
    by every frequency-count cell; NSCA output does not depend on which
    cells are configured, so cell outputs stay independent.
    """
    cfg, snr_db, mode, trial = task
    sky, truth, positions, omega_true = build_scene(cfg)
    d, m = truth.n_sources, truth.n_antennas
    beams = sky.beam(m)
    max_f = max(cfg.f_counts)
    texture = TextureSpec(cfg.texture, cfg.texture_nu)
    ref = cfg.freqs[0]

    j_hat = np.zeros((max_f, d, m, 2, 2), dtype=complex)
    h_all = np.zeros((max_f, d, m, 2, 2), dtype=complex)
    truths_f = []
    for fi in range(max_f):
        params_f, pos_f = scale_truth_to_frequency(
            truth, positions, cfg.freqs[fi], ref
        )
        truths_f.append(params_f)
        clean = synthesize_clean(sky, params_f, pos_f)
        sigma2 = snr_to_sigma(clean, snr_db)
        vis = inject_outliers(clean, sky.outliers, pos_f, cfg.freqs[fi], ref)
        noise, _ = sample_noise(
            NoiseConfig(sigma2, omega_true, texture),
            np.random.SeedSequence(
                (cfg.seed, _STREAM_NOISE, _snr_key(snr_db), trial, fi)
            ),
            vis.n_baselines,
        )
        vis = VisibilitySet(m, vis.values + noise)
        jones_true = build_jones(params_f, beams, pos_f)
        jones, _, _ = run_nsca(
            vis,
            sky.coherencies,
            mode=mode,
            jones_init=jones_true,
            max_outer=cfg.nsca_max_outer,
            tol=cfg.nsca_tol,
            sweeps_per_outer=cfg.nsca_sweeps,
        )
        j_hat[fi] = jones
        h_all[fi] = beams

    init_rng = np.random.default_rng(
        np.random.SeedSequence((cfg.seed, _STREAM_INIT, trial))
    )
    init = _perturbed_init(truth, cfg.init_perturbation, init_rng)
    truth_f1 = truths_f[0]
    gains_true = _fix_gain_phase(truth.gains)

    out = {}
    for f_count in cfg.f_counts:
        try:
            if f_count == 1:
                init_f1, _ = scale_truth_to_frequency(init, positions, ref, ref)
                params, _ = run_sca(
                    j_hat[0],
                    positions,
                    h_all[0],
                    init_f1,
                    tol=cfg.sca_tol,
                    max_cycles=cfg.sca_max_cycles,
                )
                eps_f1 = np.column_stack([params.faraday, params.shift])
                gains_hat = params.gains
                trace = None
            else:
                res = run_msca(
                    j_hat[:f_count],
                    np.asarray(cfg.freqs[:f_count]),
                    positions,
                    h_all[:f_count],
                    init,
                    rho=cfg.rho,
                    adapt_rho=cfg.adapt_rho,
                    primal_tol=cfg.admm_primal_tol,
                    dual_tol=cfg.admm_dual_tol,
                    max_middle=cfg.admm_max_middle,
                    max_outer=cfg.admm_max_outer,
                )
                eps_f1 = res.eps[0]
                gains_hat = res.gains
                trace = res.diagnostics.trace if cfg.trace else None
            errors = {}
            for i in range(d):
                dtheta = canonical_faraday(
                    eps_f1[i, 0] - truth_f1.faraday[i]
                )
                errors[f"theta{i + 1}_f1"] = float(dtheta) ** 2
                errors[f"eta{i + 1}_f1"] = float(
                    eps_f1[i, 1] - truth_f1.shift[i, 0]
                ) ** 2
                errors[f"zeta{i + 1}_f1"] = float(
                    eps_f1[i, 2] - truth_f1.shift[i, 1]
                ) ** 2
            gdiff = _fix_gain_phase(gains_hat) - gains_true
            errors["gain"] = float(np.mean(np.abs(gdiff) ** 2))
            out[f_count] = (errors, trace)
        except (CalibrationError, np.linalg.LinAlgError) as exc:
            out[f_count] = (None, str(exc))
    return (snr_db, mode, trial), out


@dataclass
class CellStats:
    attempted: int = 0
    failed: int = 0

    @property
    def failure_rate(self) -> float:
        return self.failed / self.attempted if self.attempted else 0.0


def _max_workers() -> int:
    env = os.environ.get("CAL_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"CAL_THREADS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def run_experiment(cfg: ExperimentConfig, max_workers: int | None = None):
    """Run the full Monte-Carlo grid.

    Returns
    -------
    records : list of MseRecord, canonically sorted
    stats : dict mapping (snr_db, mode, n_freq) to CellStats
    traces : dict mapping (snr_db, mode, n_freq, trial) to ADMM trace rows
        (empty unless cfg.trace is on)
    """
    cfg.validate()
    if max_workers is None:
        max_workers = _max_workers()
    tasks = [
        (cfg, snr, mode, trial)
        for snr in cfg.snr_db
        for mode in cfg.modes
        for trial in range(cfg.trials)
    ]
    results = {}
    if max_workers <= 1 or len(tasks) == 1:
        for task in tasks:
            key, out = _run_trial(task)
            results[key] = out
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=max_workers) as pool:
            for key, out in pool.map(_run_trial, tasks, chunksize=1):
                results[key] = out

    records = []
    stats = {}
    traces = {}
    for snr in cfg.snr_db:
        for mode in cfg.modes:
            for f_count in cfg.f_counts:
                cell = (snr, mode, f_count)
                stats[cell] = CellStats()
                per_param: dict[str, list] = {}
                for trial in range(cfg.trials):
                    errors, trace = results[(snr, mode, trial)][f_count]
                    stats[cell].attempted += 1
                    if errors is None:
                        stats[cell].failed += 1
                        continue
                    for name, sq in errors.items():
                        per_param.setdefault(name, []).append(sq)
                    if trace:
                        traces[(snr, mode, f_count, trial)] = trace
                for name in sorted(per_param):
                    sq = np.asarray(per_param[name])
                    n = sq.size
                    ci = (
                        1.96 * float(np.std(sq, ddof=1)) / np.sqrt(n)
                        if n > 1
                        else 0.0
                    )
                    records.append(
                        MseRecord(
                            parameter=name,
                            snr_db=float(snr),
                            n_freq=int(f_count),
                            mode=mode,
                            mse=float(np.mean(sq)),
                            trials=int(n),
                            ci_halfwidth=ci,
                        )
                    )
    records.sort(key=lambda r: r.key())
    return records, stats, traces


CSV_HEADER = ["parameter", "snr_db", "n_freq", "mode", "mse", "trials", "ci_halfwidth"]


def emit_outputs(records, out_dir, traces=None) -> dict:
    """Write mse.csv, optional ADMM traces, and a plot script.

    Returns the paths written. mse.csv columns are CSV_HEADER in order;
    floats carry 17 significant digits so re-parsing is lossless.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    mse_path = os.path.join(out_dir, "mse.csv")
    try:
        with open(mse_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for r in sorted(records, key=lambda r: r.key()):
                writer.writerow(
                    [
                        r.parameter,
                        f"{r.snr_db:.17g}",
                        r.n_freq,
                        r.mode,
                        f"{r.mse:.17g}",
                        r.trials,
                        f"{r.ci_halfwidth:.17g}",
                    ]
                )
    except OSError as exc:
        raise CalibrationError(f"cannot write {mse_path}: {exc}") from exc
    paths["mse"] = mse_path

    if traces:
        trace_dir = os.path.join(out_dir, "trace")
        os.makedirs(trace_dir, exist_ok=True)
        for (snr, mode, f_count, trial), rows in sorted(traces.items()):
            name = f"admm_snr{snr:g}_{mode}_F{f_count}_trial{trial}.csv"
            tpath = os.path.join(trace_dir, name)
            with open(tpath, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(
                    ["iter", "primal_residual", "dual_residual", "total_cost", "rho"]
                )
                for row in rows:
                    writer.writerow([row[0]] + [f"{v:.17g}" for v in row[1:]])
        paths["trace"] = trace_dir

    plot_path = os.path.join(out_dir, "plot_mse.py")
    with open(plot_path, "w") as fh:
        fh.write(_PLOT_SCRIPT)
    paths["plot"] = plot_path
    return paths


def load_mse_csv(path) -> list:
    """Parse an mse.csv back into records (inverse of emit_outputs)."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise CalibrationError(
                f"{path}: unexpected header {reader.fieldnames}"
            )
        for row in reader:
            records.append(
                MseRecord(
                    parameter=row["parameter"],
                    snr_db=float(row["snr_db"]),
                    n_freq=int(row["n_freq"]),
                    mode=row["mode"],
                    mse=float(row["mse"]),
                    trials=int(row["trials"]),
                    ci_halfwidth=float(row["ci_halfwidth"]),
                )
            )
    return records


def match_records(records_a, records_b, ignore_mode: bool = True):
    """Pair two record sets cell by cell.

    Cells are keyed on (parameter, snr_db, n_freq), plus mode when
    ``ignore_mode`` is off. Raises on any unmatched cell.
    """
    def key(r):
        return (r.parameter, r.snr_db, r.n_freq) + (
            () if ignore_mode else (r.mode,)
        )

    map_a = {key(r): r for r in records_a}
    map_b = {key(r): r for r in records_b}
    if set(map_a) != set(map_b):
        missing = set(map_a) ^ set(map_b)
        raise CalibrationError(f"mismatched cells: {sorted(missing)[:5]} ...")
    return [(map_a[k], map_b[k]) for k in sorted(map_a)]


def ratio_with_ci(rec_a: MseRecord, rec_b: MseRecord):
    """MSE ratio a/b with a 95% interval via the log-delta method."""
    ratio = rec_a.mse / rec_b.mse
    se = np.sqrt(
        (rec_a.ci_halfwidth / 1.96 / rec_a.mse) ** 2
        + (rec_b.ci_halfwidth / 1.96 / rec_b.mse) ** 2
    )
    return ratio, ratio * np.exp(-1.96 * se), ratio * np.exp(1.96 * se)


def compare_modes(records, mode_a: str = None, mode_b: str = None):
    """Per-cell MSE ratios and win counts between two modes in one run.

    With mode names omitted the records must contain exactly two modes.
    Returns (rows, wins_a, wins_b) where each row is a dict with the
    cell key, both MSEs, the ratio and its 95% interval.
    """
    present = sorted({r.mode for r in records})
    if mode_a is None or mode_b is None:
        if len(present) != 2:
            raise CalibrationError(
                f"need exactly two modes to compare, found {present}"
            )
        mode_a, mode_b = present
    a = [r for r in records if r.mode == mode_a]
    b = [r for r in records if r.mode == mode_b]
    rows = []
    wins_a = wins_b = 0
    for ra, rb in match_records(a, b):
        ratio, lo, hi = ratio_with_ci(ra, rb)
        rows.append(
            {
                "parameter": ra.parameter,
                "snr_db": ra.snr_db,
                "n_freq": ra.n_freq,
                f"mse_{mode_a}": ra.mse,
                f"mse_{mode_b}": rb.mse,
                "ratio": ratio,
                "ratio_lo": lo,
                "ratio_hi": hi,
            }
        )
        if ratio < 1.0:
            wins_a += 1
        elif ratio > 1.0:
            wins_b += 1
    return rows, wins_a, wins_b


_PLOT_SCRIPT = '''\
"""Render MSE-vs-SNR curves from mse.csv (written next to this script)."""

import csv
import os
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
path = sys.argv[1] if len(sys.argv) > 1 else os.path.join(here, "mse.csv")

curves = defaultdict(list)
with open(path, newline="") as fh:
    for row in csv.DictReader(fh):
        label = f'{row["parameter"]} {row["mode"]} F={row["n_freq"]}'
        curves[label].append((float(row["snr_db"]), float(row["mse"])))

params = sorted({label.split()[0] for label in curves})
for param in params:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label in sorted(curves):
        if not label.startswith(param + " "):
            continue
        pts = sorted(curves[label])
        ax.semilogy([p[0] for p in pts], [p[1] for p in pts], "o-",
                    label=label[len(param) + 1:])
    ax.set_xlabel("SNR [dB]")
    ax.set_ylabel("MSE")
    ax.set_title(param)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    out = os.path.join(here, f"mse_vs_snr_{param}.png")
    fig.savefig(out, dpi=120, bbox_inches="tight")
    print(out)
'''
