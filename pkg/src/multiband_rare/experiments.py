"""Experiment runners behind the command-line verbs.

Each runner takes a scenario, an :class:`ExperimentConfig` and returns one or
more :class:`Table` objects; the CLI writes them as CSV with a comment header
(scenario hash, config hash, seed, version) and renders a figure next to them.
Bodies depend only on the scenario, the config and the seed.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, optimize, pipeline, transfer
from .scenario import TWO_PI, AtomScenario, BandPlan, Service, derive_constants, scenario_hash

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

EXPERIMENTS = ("waveforms", "attention_sweep", "sumsquare_sweep", "power_sweep", "optimize")
MODES = ("analytic", "montecarlo", "both")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


DEFAULT_PARAMS: dict[str, dict[str, Any]] = {
    "waveforms": {
        "n_values": [1, 2, 4, 8, 16, 32],
        "omega_r_mhz_over_2pi": 1.0,
        "omega_s_max_khz_over_2pi": 1.0,
        "if_spacing_khz": 100.0,
        "window_us": 10.0,
        "sample_rate_mhz": 16.0,
        "settle_us": 200.0,
        "rk4": True,
    },
    "attention_sweep": {"points": 101, "mc_every": 10},
    "sumsquare_sweep": {
        "points": 61,
        "span_decades": 2.0,
        "random_draws": 100,
        "random_alpha_max": 0.5,
        "mc_every": 10,
    },
    "power_sweep": {
        "pt_dbm_min": 0.0,
        "pt_dbm_max": 20.0,
        "points": 11,
        "random_draws": 100,
        "random_alpha_max": 0.5,
        "mc_every": 5,
    },
    "optimize": {},
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    params: dict = field(default_factory=dict)
    mc_count: int = 10000
    seed: int = 0
    mode: str = "analytic"

    def digest(self) -> str:
        doc = {"experiment": self.experiment, "params": self.params, "mc_count": self.mc_count, "mode": self.mode}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def make_config(experiment: str, doc: dict | None = None, seed=None, mode=None, mc_count=None) -> ExperimentConfig:
    """Merge defaults, a parsed config document and explicit overrides, then validate.

    The document may hold top-level ``seed``, ``mode`` and ``mc_count`` plus one
    table per experiment (``[power_sweep]`` and so on).
    """
    experiment = experiment.replace("-", "_")
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    doc = dict(doc or {})
    unknown = set(doc) - {"seed", "mode", "mc_count", *EXPERIMENTS}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    params = dict(DEFAULT_PARAMS[experiment])
    section = doc.get(experiment, {})
    bad = set(section) - set(params)
    if bad:
        raise ConfigError(f"unknown {experiment} parameters: {', '.join(sorted(bad))}")
    params.update(section)
    cfg = ExperimentConfig(
        experiment=experiment,
        params=params,
        mc_count=int(mc_count if mc_count is not None else doc.get("mc_count", 10000)),
        seed=int(seed if seed is not None else doc.get("seed", 0)),
        mode=str(mode if mode is not None else doc.get("mode", "analytic")),
    )
    validate_config(cfg)
    return cfg


def load_config(path, experiment: str, **overrides) -> ExperimentConfig:
    try:
        doc = tomllib.loads(Path(path).read_text()) if path else {}
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return make_config(experiment, doc, **overrides)


def _finite(name, value):
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
        raise ConfigError(f"{name} must be a finite number")


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if cfg.mc_count < 1:
        raise ConfigError("Monte Carlo count must be at least 1")
    p = cfg.params
    for key, value in p.items():
        if key in ("n_values", "rk4"):
            continue
        _finite(key, value)
    if "points" in p and int(p["points"]) < 1:
        raise ConfigError("grid needs at least one point")
    for key in ("random_draws", "mc_every"):
        if key in p and int(p[key]) < 1:
            raise ConfigError(f"{key} must be at least 1")
    if "pt_dbm_min" in p and p["pt_dbm_min"] > p["pt_dbm_max"]:
        raise ConfigError("power grid bounds must be ordered")
    if "span_decades" in p and p["span_decades"] < 0:
        raise ConfigError("span_decades must be nonnegative")
    if "random_alpha_max" in p and not 0 < p["random_alpha_max"] <= 1:
        raise ConfigError("random_alpha_max must lie in (0, 1]")
    if cfg.experiment == "waveforms":
        ns = p["n_values"]
        if not ns or any(not isinstance(n, int) or n < 1 for n in ns):
            raise ConfigError("n_values must be positive integers")
        for key in ("omega_r_mhz_over_2pi", "if_spacing_khz", "window_us", "sample_rate_mhz"):
            if p[key] <= 0:
                raise ConfigError(f"{key} must be positive")
        if p["omega_s_max_khz_over_2pi"] < 0 or p["settle_us"] < 0:
            raise ConfigError("omega_s_max and settle time must be nonnegative")


@dataclass
class Table:
    name: str
    columns: tuple[str, ...]
    rows: list[tuple]
    notes: list[str] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def body(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def to_csv(self, meta: dict) -> str:
        head = [f"# {k}={v}" for k, v in meta.items()] + [f"# note: {n}" for n in self.notes]
        return "\n".join(head) + "\n" + self.body()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def read_csv_body(path) -> str:
    """CSV text without the comment header."""
    return "".join(line for line in Path(path).read_text().splitlines(keepends=True) if not line.startswith("#"))


def output_meta(s: AtomScenario, bands: BandPlan, cfg: ExperimentConfig) -> dict:
    return {
        "tool": "multiband-rare",
        "version": __version__,
        "experiment": cfg.experiment,
        "scenario_hash": scenario_hash(s, bands),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "mode": cfg.mode,
    }


# ---------------------------------------------------------------- waveforms


def waveform_setup(s: AtomScenario, bands: BandPlan, n: int, params: dict, rng):
    """Atom scenario, band plan and static fields for the N-band waveform test."""
    spacing = TWO_PI * 1e3 * params["if_spacing_khz"]
    rydberg = s.rydberg_decay
    if s.relaxation == "full":
        rydberg = tuple(rydberg[: n + 1]) + (rydberg[-1],) * max(0, n + 1 - len(rydberg))
    sn = replace(s, n_bands=n, rydberg_decay=rydberg)
    omega_r = np.full(n, TWO_PI * 1e6 * params["omega_r_mhz_over_2pi"])
    plan = BandPlan(
        omega=np.full(n, bands.omega[0]),
        delta=spacing * np.arange(1, n + 1),
        bandwidth=np.full(n, 0.8 * params["if_spacing_khz"] * 1e3),
        mu=np.full(n, bands.mu[0]),
        h=np.ones(n, complex),
        pt=np.ones(n),
        omega_r=omega_r,
        services=(Service.comm(4),) * n,
    )
    omega_s = rng.uniform(0.0, TWO_PI * 1e3 * params["omega_s_max_khz_over_2pi"], n)
    phi = rng.uniform(0.0, TWO_PI, n)
    sig = transfer.signal_from_rabi(omega_r, omega_s, phi, plan.mu)
    return sn, plan, sig


def waveform_case(s, bands, n: int, params: dict, seed: int, with_rk4: bool = True) -> dict:
    """Traces and errors for one band count; the draw depends only on (seed, n)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, n]))
    sn, plan, sig = waveform_setup(s, bands, n, params, rng)
    fs = 1e6 * params["sample_rate_mhz"]
    duration = 1e-6 * params["window_us"]
    lin = transfer.synthesize_waveform(sn, plan, sig, duration, fs, "linearized")
    qs = transfer.synthesize_waveform(sn, plan, sig, duration, fs, "quasi_static")
    out = {"n": n, "t": lin.t, "linearized": lin.samples, "quasi_static": qs.samples, "max_if_khz": n * params["if_spacing_khz"]}
    if with_rk4:
        rk = transfer.synthesize_waveform(sn, plan, sig, duration, fs, "rk4", settle=1e-6 * params["settle_us"])
        out["rk4"] = rk.samples
        out["err_qs"] = transfer.relative_rms_error(qs, rk)
        out["err_lin"] = transfer.relative_rms_error(lin, rk)
        out["ac_err_qs"] = transfer.ac_relative_rms_error(qs, rk)
    return out


def run_waveforms(s, bands, cfg: ExperimentConfig):
    p = cfg.params
    cases = [waveform_case(s, bands, int(n), p, cfg.seed, bool(p["rk4"])) for n in p["n_values"]]
    cols = ("n_bands", "max_if_khz", "rel_rms_quasi_static_vs_rk4", "rel_rms_linearized_vs_rk4", "ac_rel_rms_quasi_static_vs_rk4")
    rows = [
        (c["n"], float(c["max_if_khz"]), c.get("err_qs", math.nan), c.get("err_lin", math.nan), c.get("ac_err_qs", math.nan))
        for c in cases
    ]
    summary = Table(
        "waveforms_summary",
        cols,
        rows,
        notes=[
            "rel_rms = ||theory - rk4|| / ||rk4|| over the window (DC included)",
            "ac_rel_rms divides by the RMS of the rk4 trace about its mean",
            f"rk4 starts {p['settle_us']} us before the window from the stationary state of the drive",
        ],
    )
    traces = []
    for c in cases:
        names = ["t_s", "linearized_w", "quasi_static_w"] + (["rk4_w"] if "rk4" in c else [])
        arrays = [c["t"], c["linearized"], c["quasi_static"]] + ([c["rk4"]] if "rk4" in c else [])
        traces.append(Table(f"waveforms_N{c['n']}", tuple(names), list(zip(*[a.tolist() for a in arrays]))))
    return summary, traces


# ---------------------------------------------------------------- shared sweep helpers


def _db(x) -> float:
    return float(optimize.to_db(x))


def _mean_ncrlb(values) -> float:
    return float(np.mean(values))


def random_attentions(n_bands: int, draws: int, alpha_max: float, rng) -> np.ndarray:
    """Random attention vectors: band 1 ~ U(0, alpha_max) for two bands, flat Dirichlet otherwise."""
    if n_bands == 1:
        return np.ones((draws, 1))
    if n_bands == 2:
        a = rng.uniform(0.0, alpha_max, draws)
        return np.column_stack([a, 1.0 - a])
    return rng.dirichlet(np.ones(n_bands), draws)


def _policy_metrics(b: optimize.BandBudget, alpha: np.ndarray):
    p = optimize.se_problem(b)
    se = optimize.se_objective(alpha, p)
    nc = _mean_ncrlb(optimize.ncrlb(alpha, b))
    return se, nc


def classic_metrics(bands: BandPlan, baseline=pipeline.ClassicBaseline()):
    snr = pipeline.classic_receiver_snr(bands.bandwidth, bands.pt, bands.h, baseline)
    gamma = bands.bandwidth / bands.bandwidth.sum()
    se_band = np.log2(1.0 + snr)
    nc_band = optimize.ncrlb_from_snr(snr, bands.omega)
    return se_band, nc_band, float(np.sum(gamma * se_band)), _mean_ncrlb(nc_band)


CLASSIC_NOTE = (
    "classic columns are an approximate baseline: antenna gain 2.1 dB, LNA gain 30 dB, "
    "LNA noise temperature 100 K, ambient temperature from the scenario"
)


def _mc_pair(s, bands, alpha, A, count, seed):
    """Empirical SER (communication services) and NMSE (all bands switched to sensing)."""
    comm_services = tuple(sv if sv.kind == "comm" else Service.comm(4) for sv in bands.services)
    rc = pipeline.run_trial(s, bands.with_services(comm_services), alpha, A, count, seed)
    rs = pipeline.run_trial(s, bands.with_services((Service.sense(),) * bands.n_bands), alpha, A, count, seed)
    return rc, rs


# ---------------------------------------------------------------- attention sweep


def run_attention_sweep(s, bands, cfg: ExperimentConfig) -> Table:
    """Dual-band sweep alpha_1 = a, alpha_2 = 1 - a at the optimal sum-square."""
    if bands.n_bands != 2:
        raise ConfigError("the attention sweep needs a dual-band scenario")
    p = cfg.params
    d = derive_constants(s)
    A = optimize.optimal_sum_square(d.chi0, d.Gamma2)
    b = optimize.band_budget(s, bands, A)
    prob = optimize.se_problem(b)
    baseline = pipeline.ClassicBaseline(ambient_temp=s.ambient_temp)
    cse, cnc, _, _ = classic_metrics(bands, baseline)
    grid = np.linspace(0.0, 1.0, int(p["points"])) if int(p["points"]) > 1 else np.array([0.5])
    cols = [
        "alpha",
        "se_band1_bps_hz",
        "se_band2_bps_hz",
        "se_mean_bps_hz",
        "ncrlb_band1_db",
        "ncrlb_band2_db",
        "classic_se_band1_bps_hz",
        "classic_se_band2_bps_hz",
        "classic_ncrlb_band1_db",
        "classic_ncrlb_band2_db",
    ]
    mc = cfg.mode in ("montecarlo", "both")
    if mc:
        cols += ["mc_ser_band1", "mc_ser_band2", "ser_theory_band1", "ser_theory_band2", "mc_nmse_band1_db", "mc_nmse_band2_db"]
    if cfg.mode == "montecarlo":
        keep = [i for i in range(len(grid)) if i % int(p["mc_every"]) == 0 or i == len(grid) - 1]
    else:
        keep = list(range(len(grid)))
    rows = []
    for i in keep:
        a = float(grid[i])
        alpha = np.array([a, 1.0 - a])
        se = np.log2(1.0 + optimize.band_snr(alpha, prob))
        nc = optimize.ncrlb(alpha, b)
        row = [a, *se.tolist(), float(np.sum(prob.gamma * se)), _db(nc[0]), _db(nc[1]),
               *cse.tolist(), _db(cnc[0]), _db(cnc[1])]
        if mc:
            if i % int(p["mc_every"]) == 0 or i == len(grid) - 1:
                rc, rs = _mc_pair(s, bands, alpha, A, cfg.mc_count, cfg.seed * 100003 + i)
                row += [*rc.ser.tolist(), *rc.ser_theory.tolist(), _db(rs.nmse[0]), _db(rs.nmse[1])]
            else:
                row += [math.nan] * 6
        rows.append(tuple(row))
    return Table("attention_sweep", tuple(cols), rows, notes=[CLASSIC_NOTE, "per-band SE is log2(1 + SNR); mean SE weights bands by bandwidth"])


# ---------------------------------------------------------------- sum-square sweep


def sumsquare_grid(A_star: float, points: int, span_decades: float) -> np.ndarray:
    """Log grid over [A*/10^span, A* 10^span]; with an odd point count A* is the middle node."""
    if points == 1:
        return np.array([A_star])
    return A_star * np.logspace(-span_decades, span_decades, points)


def run_sumsquare_sweep(s, bands, cfg: ExperimentConfig) -> Table:
    p = cfg.params
    d = derive_constants(s)
    A_star = optimize.optimal_sum_square(d.chi0, d.Gamma2)
    grid = sumsquare_grid(A_star, int(p["points"]), float(p["span_decades"]))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5]))
    draws = random_attentions(bands.n_bands, int(p["random_draws"]), float(p["random_alpha_max"]), rng)
    _, _, cse, cnc = classic_metrics(bands, pipeline.ClassicBaseline(ambient_temp=s.ambient_temp))
    cols = [
        "sum_square_rad2_s2",
        "sqrt_sum_square_mhz_over_2pi",
        "se_optimal_alpha_bps_hz",
        "ncrlb_optimal_alpha_db",
        "se_random_alpha_bps_hz",
        "ncrlb_random_alpha_db",
        "classic_se_bps_hz",
        "classic_ncrlb_db",
    ]
    mc = cfg.mode in ("montecarlo", "both")
    if mc:
        cols += ["mc_ser_mean", "mc_nmse_mean_db"]
    rows = []
    for i, A in enumerate(grid):
        b = optimize.band_budget(s, bands, float(A))
        a_se = optimize.optimal_attention_se(optimize.se_problem(b)).alpha
        a_nc = optimize.optimal_attention_sensing(optimize.sense_problem(b))
        se_opt = optimize.se_objective(a_se, optimize.se_problem(b))
        nc_opt = _mean_ncrlb(optimize.ncrlb(a_nc, b))
        rand = np.array([_policy_metrics(b, a) for a in draws])
        row = [float(A), math.sqrt(A) / (2e6 * math.pi), se_opt, _db(nc_opt),
               float(rand[:, 0].mean()), _db(rand[:, 1].mean()), cse, _db(cnc)]
        if mc:
            if i % int(p["mc_every"]) == 0 or i == len(grid) - 1 or A == A_star:
                rc, _ = _mc_pair(s, bands, a_se, float(A), cfg.mc_count, cfg.seed * 100003 + i)
                _, rs = _mc_pair(s, bands, a_nc, float(A), cfg.mc_count, cfg.seed * 100003 + i)
                row += [float(np.nanmean(rc.ser)), _db(np.nanmean(rs.nmse))]
            else:
                row += [math.nan, math.nan]
        rows.append(tuple(row))
    notes = [
        CLASSIC_NOTE,
        "SE averaged over bands by bandwidth; NCRLB is the band mean in linear units, then dB",
        f"random policy: {int(p['random_draws'])} draws, alpha_1 ~ U(0, {p['random_alpha_max']})",
    ]
    return Table("sumsquare_sweep", tuple(cols), rows, notes=notes)


# ---------------------------------------------------------------- power sweep


def run_power_sweep(s, bands, cfg: ExperimentConfig) -> Table:
    p = cfg.params
    n_pts = int(p["points"])
    grid = np.linspace(p["pt_dbm_min"], p["pt_dbm_max"], n_pts) if n_pts > 1 else np.array([p["pt_dbm_min"]])
    d = derive_constants(s)
    A = optimize.optimal_sum_square(d.chi0, d.Gamma2)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 6]))
    draws = random_attentions(bands.n_bands, int(p["random_draws"]), float(p["random_alpha_max"]), rng)
    baseline = pipeline.ClassicBaseline(ambient_temp=s.ambient_temp)
    cols = [
        "pt_dbm",
        "se_optimal_alpha_bps_hz",
        "ncrlb_optimal_alpha_db",
        "se_random_alpha_bps_hz",
        "ncrlb_random_alpha_db",
        "classic_se_bps_hz",
        "classic_ncrlb_db",
    ]
    mc = cfg.mode in ("montecarlo", "both")
    if mc:
        cols += ["mc_ser_mean", "mc_nmse_mean_db"]
    rows = []
    for i, pt_dbm in enumerate(grid):
        bp = bands.with_power(1e-3 * 10.0 ** (pt_dbm / 10.0))
        b = optimize.band_budget(s, bp, A)
        a_se = optimize.optimal_attention_se(optimize.se_problem(b)).alpha
        a_nc = optimize.optimal_attention_sensing(optimize.sense_problem(b))
        rand = np.array([_policy_metrics(b, a) for a in draws])
        _, _, cse, cnc = classic_metrics(bp, baseline)
        row = [float(pt_dbm), optimize.se_objective(a_se, optimize.se_problem(b)), _db(_mean_ncrlb(optimize.ncrlb(a_nc, b))),
               float(rand[:, 0].mean()), _db(rand[:, 1].mean()), cse, _db(cnc)]
        if mc:
            if i % int(p["mc_every"]) == 0 or i == len(grid) - 1:
                rc, _ = _mc_pair(s, bp, a_se, A, cfg.mc_count, cfg.seed * 100003 + i)
                _, rs = _mc_pair(s, bp, a_nc, A, cfg.mc_count, cfg.seed * 100003 + i)
                row += [float(np.nanmean(rc.ser)), _db(np.nanmean(rs.nmse))]
            else:
                row += [math.nan, math.nan]
        rows.append(tuple(row))
    notes = [CLASSIC_NOTE, "transmit power applied to every band", f"random policy: {int(p['random_draws'])} draws"]
    return Table("power_sweep", tuple(cols), rows, notes=notes)


# ---------------------------------------------------------------- optimize


def run_optimize(s, bands, cfg: ExperimentConfig) -> tuple[Table, optimize.OptimizationReport]:
    rep = optimize.optimize_scenario(s, bands)
    rows = []
    for k in range(bands.n_bands):
        rows.append(
            (k + 1, str(bands.services[k]), rep.alpha_se[k], rep.alpha_sensing[k], rep.alpha_selected[k],
             rep.omega_r_mhz_over_2pi[k], rep.se_per_band[k], rep.ncrlb_db[k])
        )
    cols = ("band", "service", "alpha_se", "alpha_sensing", "alpha_selected", "omega_r_mhz_over_2pi",
            "se_weighted_bps_hz", "ncrlb_db")
    notes = [
        f"A_star={rep.A_star!r}",
        f"sqrt_A_star_mhz_over_2pi={rep.sqrt_A_star_mhz_over_2pi!r}",
        f"nu_se={rep.nu_se!r}",
        f"se_total_bps_hz={rep.se_total!r}",
        f"ncrlb_sum_db={rep.ncrlb_sum_db!r}",
        f"selected_by={rep.selected_by}",
    ]
    return Table("optimize", cols, rows, notes=notes), rep


def format_report(rep: optimize.OptimizationReport) -> str:
    lines = [
        f"optimal sum-square   A* = {rep.A_star:.6e} rad^2/s^2  (sqrt(A*) = 2pi x {rep.sqrt_A_star_mhz_over_2pi:.4f} MHz)",
        f"services             {', '.join(rep.services)}",
        f"SE-optimal alpha     {np.array2string(np.array(rep.alpha_se), precision=6)}  (nu* = {rep.nu_se:.6g})",
        f"  predicted SE       {rep.se_total:.4f} bps/Hz",
        f"NCRLB-optimal alpha  {np.array2string(np.array(rep.alpha_sensing), precision=6)}",
        f"  predicted NCRLB    {np.array2string(np.array(rep.ncrlb_db), precision=2)} dB",
        f"selected ({rep.selected_by})        {np.array2string(np.array(rep.alpha_selected), precision=6)}",
        f"reference Rabi       {np.array2string(np.array(rep.omega_r_mhz_over_2pi), precision=4)} x 2pi MHz",
    ]
    return "\n".join(lines)


def write_table(table: Table, out_dir, meta: dict) -> Path:
    path = Path(out_dir) / f"{table.name}.csv"
    os.makedirs(path.parent, exist_ok=True)
    path.write_text(table.to_csv(meta))
    return path
