"""Scenario files, physical constants and derived receiver constants.

A scenario is a flat TOML document. Every key carries its unit in the name
(``omega_p_rabi_mhz_over_2pi = 5.7`` means 2*pi*5.7 MHz), per-band values are
arrays of equal length. Missing keys fall back to the dual-band sub-6G/mmWave
defaults in :data:`DEFAULTS`.
"""
from __future__ import annotations

import hashlib
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

TWO_PI = 2.0 * math.pi
SCENARIO_DIR_ENV = "RARE_SCENARIO_DIR"


@dataclass(frozen=True)
class PhysicalConstants:
    hbar: float = 1.054571817e-34  # J s
    eps0: float = 8.8541878128e-12  # F/m
    kB: float = 1.380649e-23  # J/K
    c: float = 299792458.0  # m/s
    q: float = 1.602176634e-19  # C
    a0: float = 5.29177210903e-11  # m


CONST = PhysicalConstants()


class ScenarioError(ValueError):
    """Malformed scenario file or violated parameter invariant."""


@dataclass(frozen=True)
class AtomScenario:
    """Atomic, laser and vapor-cell parameters in SI units (rad/s, C m, m, W, K)."""

    n_bands: int
    omega_p_rabi: float
    omega_c_rabi: float
    gamma2: float
    mu_probe: float
    cell_length: float
    atomic_density: float
    probe_wavelength: float
    probe_power_in: float
    ambient_temp: float
    # field amplitude (V/m) per sqrt(W) of |h|^2 P_t at the receiver
    field_conversion: float = 1.0
    # multiplies the black-body coefficient C2; 1.0 is the literal formula
    blackbody_scale: float = 1.0
    strong_reference_ratio: float = 100.0
    relaxation: str = "simplified"
    # decay rates of levels 3..N+3 (rad/s), used only with relaxation="full"
    rydberg_decay: tuple[float, ...] = ()

    def decay_rates(self) -> np.ndarray:
        """Total decay rate out of every level, index 0 = ground."""
        d = self.n_bands + 3
        rates = np.zeros(d)
        rates[1] = self.gamma2
        if self.relaxation == "full":
            rates[2:] = self.rydberg_decay
        return rates


@dataclass(frozen=True)
class DerivedConstants:
    rho0: float
    Gamma2: float
    C0: float
    chi0: float
    kp: float


class Service:
    """Per-band service: ``Service.comm(order)`` or ``Service.sense()``."""

    __slots__ = ("kind", "order")

    def __init__(self, kind: str, order: int = 0):
        if kind not in ("comm", "sense"):
            raise ScenarioError(f"unknown service {kind!r}")
        self.kind = kind
        self.order = order

    @classmethod
    def comm(cls, order: int = 4) -> "Service":
        return cls("comm", order)

    @classmethod
    def sense(cls) -> "Service":
        return cls("sense")

    @classmethod
    def parse(cls, text: str) -> "Service":
        text = text.strip().lower()
        if text == "sense":
            return cls.sense()
        if text.startswith("qam"):
            try:
                return cls.comm(int(text[3:]))
            except ValueError:
                pass
        raise ScenarioError(f"cannot parse service {text!r} (use 'qamM' or 'sense')")

    def __str__(self) -> str:
        return "sense" if self.kind == "sense" else f"qam{self.order}"

    __repr__ = __str__

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Service) and (self.kind, self.order) == (other.kind, other.order)

    def __hash__(self) -> int:
        return hash((self.kind, self.order))


@dataclass(frozen=True)
class BandPlan:
    """Per-band carrier, IF, bandwidth, dipole, channel, power and reference drive."""

    omega: np.ndarray  # carrier, rad/s
    delta: np.ndarray  # IF, rad/s
    bandwidth: np.ndarray  # Hz
    mu: np.ndarray  # C m
    h: np.ndarray  # complex channel coefficient
    pt: np.ndarray  # W
    omega_r: np.ndarray  # reference Rabi frequency, rad/s
    services: tuple[Service, ...] = field(default=())

    @property
    def n_bands(self) -> int:
        return len(self.omega)

    def with_reference(self, omega_r) -> "BandPlan":
        return replace(self, omega_r=np.asarray(omega_r, dtype=float))

    def with_power(self, pt) -> "BandPlan":
        return replace(self, pt=np.broadcast_to(np.asarray(pt, float), self.omega.shape).copy())

    def with_services(self, services) -> "BandPlan":
        return replace(self, services=tuple(services))


DEFAULTS: dict[str, Any] = {
    "omega_p_rabi_mhz_over_2pi": 5.7,
    "omega_c_rabi_mhz_over_2pi": 0.97,
    "gamma2_mhz_over_2pi": 5.2,
    "mu_probe_qa0": 2.586,
    "cell_length_cm": 2.0,
    "atomic_density_per_cm3": 4.89e10,
    "probe_wavelength_nm": 852.94,
    "probe_power_in_uw": 120.0,
    "ambient_temp_k": 290.0,
    "field_conversion_v_per_m_per_sqrt_w": 1.0,
    "blackbody_scale": 1.0,
    "strong_reference_ratio": 100.0,
    "relaxation": "simplified",
    "band_carrier_ghz": [3.212, 30.628],
    "band_if_khz": [100.0, 200.0],
    "band_bandwidth_khz": [80.0, 80.0],
    "band_dipole_qa0": [2410.0, 736.452],
    "band_channel_gain_db": [-90.0, -90.0],
    "band_channel_phase_rad": [0.0, 0.0],
    "band_tx_power_dbm": [20.0, 20.0],
    "band_service": ["qam4", "qam4"],
}

_BAND_KEYS = (
    "band_carrier_ghz",
    "band_if_khz",
    "band_bandwidth_khz",
    "band_dipole_qa0",
    "band_channel_gain_db",
    "band_channel_phase_rad",
    "band_tx_power_dbm",
    "band_service",
)
_OPTIONAL_KEYS = ("band_reference_rabi_mhz_over_2pi", "rydberg_decay_khz_over_2pi")


def derive_constants(s: AtomScenario) -> DerivedConstants:
    """Closed-form rho0, Gamma^2, C0, chi0 and the probe wavenumber."""
    op, oc, g2 = s.omega_p_rabi, s.omega_c_rabi, s.gamma2
    denom = g2 * g2 + 2.0 * op * op
    rho0 = g2 * op / denom
    gamma_sq = 2.0 * op * op * (oc * oc + op * op) / denom
    kp = TWO_PI / s.probe_wavelength
    # the probe dipole stands in for the mu_{g0 e1} that appears in C0
    C0 = (
        2.0 * s.atomic_density * s.mu_probe**2 * kp * s.cell_length
        / (CONST.eps0 * CONST.hbar * op)
    )
    return DerivedConstants(rho0=rho0, Gamma2=gamma_sq, C0=C0, chi0=rho0 * C0, kp=kp)


def validate(s: AtomScenario, bands: BandPlan) -> None:
    positive = {
        "omega_p_rabi": s.omega_p_rabi,
        "omega_c_rabi": s.omega_c_rabi,
        "gamma2": s.gamma2,
        "mu_probe": s.mu_probe,
        "cell_length": s.cell_length,
        "atomic_density": s.atomic_density,
        "probe_wavelength": s.probe_wavelength,
        "probe_power_in": s.probe_power_in,
        "ambient_temp": s.ambient_temp,
        "field_conversion": s.field_conversion,
        "blackbody_scale": s.blackbody_scale,
        "strong_reference_ratio": s.strong_reference_ratio,
    }
    for name, value in positive.items():
        if not (math.isfinite(value) and value > 0):
            raise ScenarioError(f"{name} must be positive and finite, got {value!r}")
    if s.n_bands < 1:
        raise ScenarioError("at least one band is required")
    if s.relaxation not in ("simplified", "full"):
        raise ScenarioError(f"relaxation must be 'simplified' or 'full', got {s.relaxation!r}")
    if s.relaxation == "full" and len(s.rydberg_decay) != s.n_bands + 1:
        raise ScenarioError("full relaxation needs N+1 Rydberg decay rates (levels 3..N+3)")
    if bands.n_bands != s.n_bands:
        raise ScenarioError("band plan length does not match n_bands")

    for name in ("omega", "bandwidth", "mu", "pt"):
        arr = getattr(bands, name)
        if arr.shape != (s.n_bands,) or not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise ScenarioError(f"band {name} must be positive, one value per band")
    if np.any(bands.delta <= 0):
        raise ScenarioError("IFs must be positive")
    if np.any(bands.omega_r < 0):
        raise ScenarioError("reference Rabi frequencies must be nonnegative")
    if np.any(np.diff(bands.delta) <= 0):
        raise ScenarioError("IF ordering violated: IFs must be strictly ascending")
    spacing = np.diff(bands.delta) / TWO_PI
    needed = 0.5 * (bands.bandwidth[:-1] + bands.bandwidth[1:])
    bad = np.nonzero(spacing <= needed)[0]
    if bad.size:
        n = int(bad[0])
        raise ScenarioError(
            f"orthogonality margin violated between bands {n + 1} and {n + 2}: "
            f"IF spacing {spacing[n]:.6g} Hz <= mean bandwidth {needed[n]:.6g} Hz"
        )
    if np.any(bands.omega <= 100.0 * bands.delta):
        raise ScenarioError("carrier must dominate the IF (omega_n >> delta_n) on every band")
    if len(bands.services) != s.n_bands:
        raise ScenarioError("one service per band is required")
    rho0 = derive_constants(s).rho0
    if not 0.0 < rho0 < 1.0:
        raise ScenarioError(f"derived rho0 = {rho0} outside (0, 1)")


def _as_list(doc: dict, key: str, n: int | None) -> list:
    value = doc[key]
    if not isinstance(value, list):
        raise ScenarioError(f"{key} must be an array")
    if n is not None and len(value) != n:
        raise ScenarioError(f"{key} has {len(value)} entries, expected {n}")
    return value


def scenario_from_dict(doc: dict[str, Any]) -> tuple[AtomScenario, BandPlan]:
    known = set(DEFAULTS) | set(_OPTIONAL_KEYS)
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {', '.join(unknown)}")
    full = {**DEFAULTS, **doc}
    n = len(_as_list(full, "band_carrier_ghz", None))
    try:
        mhz = TWO_PI * 1e6
        qa0 = CONST.q * CONST.a0
        rydberg = ()
        if "rydberg_decay_khz_over_2pi" in full:
            rydberg = tuple(TWO_PI * 1e3 * float(v) for v in _as_list(full, "rydberg_decay_khz_over_2pi", n + 1))
        atom = AtomScenario(
            n_bands=n,
            omega_p_rabi=mhz * float(full["omega_p_rabi_mhz_over_2pi"]),
            omega_c_rabi=mhz * float(full["omega_c_rabi_mhz_over_2pi"]),
            gamma2=mhz * float(full["gamma2_mhz_over_2pi"]),
            mu_probe=qa0 * float(full["mu_probe_qa0"]),
            cell_length=1e-2 * float(full["cell_length_cm"]),
            atomic_density=1e6 * float(full["atomic_density_per_cm3"]),
            probe_wavelength=1e-9 * float(full["probe_wavelength_nm"]),
            probe_power_in=1e-6 * float(full["probe_power_in_uw"]),
            ambient_temp=float(full["ambient_temp_k"]),
            field_conversion=float(full["field_conversion_v_per_m_per_sqrt_w"]),
            blackbody_scale=float(full["blackbody_scale"]),
            strong_reference_ratio=float(full["strong_reference_ratio"]),
            relaxation=str(full["relaxation"]),
            rydberg_decay=rydberg,
        )
        arr = {k: _as_list(full, k, n) for k in _BAND_KEYS}
        gain = 10.0 ** (np.asarray(arr["band_channel_gain_db"], float) / 20.0)
        h = gain * np.exp(1j * np.asarray(arr["band_channel_phase_rad"], float))
        bands = BandPlan(
            omega=TWO_PI * 1e9 * np.asarray(arr["band_carrier_ghz"], float),
            delta=TWO_PI * 1e3 * np.asarray(arr["band_if_khz"], float),
            bandwidth=1e3 * np.asarray(arr["band_bandwidth_khz"], float),
            mu=qa0 * np.asarray(arr["band_dipole_qa0"], float),
            h=h,
            pt=1e-3 * 10.0 ** (np.asarray(arr["band_tx_power_dbm"], float) / 10.0),
            omega_r=np.zeros(n),
            services=tuple(Service.parse(str(v)) for v in arr["band_service"]),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"bad scenario value: {exc}") from exc

    validate(atom, bands)
    if "band_reference_rabi_mhz_over_2pi" in full:
        omega_r = mhz * np.asarray(_as_list(full, "band_reference_rabi_mhz_over_2pi", n), float)
    else:
        # split the sensitivity-optimal sum-square evenly
        from .optimize import optimal_sum_square

        d = derive_constants(atom)
        omega_r = np.full(n, math.sqrt(optimal_sum_square(d.chi0, d.Gamma2) / n))
    bands = bands.with_reference(omega_r)
    validate(atom, bands)
    return atom, bands


def resolve_path(path: str | os.PathLike) -> Path:
    """Resolve a scenario path; bare names are looked up in $RARE_SCENARIO_DIR, then the bundled data."""
    p = Path(path)
    if p.exists():
        return p
    candidates = []
    env_dir = os.environ.get(SCENARIO_DIR_ENV)
    if env_dir:
        candidates.append(Path(env_dir) / p)
    candidates.append(Path(__file__).parent / "data" / p)
    for c in candidates:
        for cand in (c, c.with_suffix(".toml")):
            if cand.exists():
                return cand
    raise ScenarioError(f"scenario file not found: {path}")


def load_scenario(path: str | os.PathLike) -> tuple[AtomScenario, BandPlan, DerivedConstants]:
    p = resolve_path(path)
    try:
        doc = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"cannot parse {p}: {exc}") from exc
    atom, bands = scenario_from_dict(doc)
    return atom, bands, derive_constants(atom)


def default_scenario() -> tuple[AtomScenario, BandPlan, DerivedConstants]:
    return load_scenario("default.toml")


def _unscale(x: float, unit: float) -> float:
    """Return v with ``unit * v == x`` exactly when such a float exists."""
    v = x / unit
    for cand in (v, np.nextafter(v, -np.inf), np.nextafter(v, np.inf)):
        if unit * cand == x:
            return float(cand)
    return float(v)


def _unscale_all(xs, unit: float) -> list[float]:
    return [_unscale(float(x), unit) for x in xs]


def scenario_to_dict(s: AtomScenario, bands: BandPlan) -> dict[str, Any]:
    """Inverse of :func:`scenario_from_dict`; reloading reproduces the SI values."""
    mhz = TWO_PI * 1e6
    qa0 = CONST.q * CONST.a0
    doc: dict[str, Any] = {
        "omega_p_rabi_mhz_over_2pi": _unscale(s.omega_p_rabi, mhz),
        "omega_c_rabi_mhz_over_2pi": _unscale(s.omega_c_rabi, mhz),
        "gamma2_mhz_over_2pi": _unscale(s.gamma2, mhz),
        "mu_probe_qa0": _unscale(s.mu_probe, qa0),
        "cell_length_cm": _unscale(s.cell_length, 1e-2),
        "atomic_density_per_cm3": _unscale(s.atomic_density, 1e6),
        "probe_wavelength_nm": _unscale(s.probe_wavelength, 1e-9),
        "probe_power_in_uw": _unscale(s.probe_power_in, 1e-6),
        "ambient_temp_k": s.ambient_temp,
        "field_conversion_v_per_m_per_sqrt_w": s.field_conversion,
        "blackbody_scale": s.blackbody_scale,
        "strong_reference_ratio": s.strong_reference_ratio,
        "relaxation": s.relaxation,
        "band_carrier_ghz": _unscale_all(bands.omega, TWO_PI * 1e9),
        "band_if_khz": _unscale_all(bands.delta, TWO_PI * 1e3),
        "band_bandwidth_khz": _unscale_all(bands.bandwidth, 1e3),
        "band_dipole_qa0": _unscale_all(bands.mu, qa0),
        "band_channel_gain_db": [float(v) for v in 20.0 * np.log10(np.abs(bands.h))],
        "band_channel_phase_rad": [float(v) for v in np.angle(bands.h)],
        "band_tx_power_dbm": [float(v) for v in 10.0 * np.log10(bands.pt / 1e-3)],
        "band_service": [str(v) for v in bands.services],
        "band_reference_rabi_mhz_over_2pi": _unscale_all(bands.omega_r, mhz),
    }
    if s.rydberg_decay:
        doc["rydberg_decay_khz_over_2pi"] = _unscale_all(s.rydberg_decay, TWO_PI * 1e3)
    return doc


def _toml_value(v: Any) -> str:
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def dumps_scenario(s: AtomScenario, bands: BandPlan) -> str:
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in scenario_to_dict(s, bands).items())


def save_scenario(path: str | os.PathLike, s: AtomScenario, bands: BandPlan) -> None:
    Path(path).write_text(dumps_scenario(s, bands))


def scenario_hash(s: AtomScenario, bands: BandPlan) -> str:
    return hashlib.sha256(dumps_scenario(s, bands).encode()).hexdigest()[:16]
