"""Rabi sum-square and Rabi attention optimization.

The sum-square fixes the global gain shared by all bands; the attentions split
that gain between bands. Both are optimized here: the sum-square in closed
form, the spectral-efficiency attentions by bisection on the KKT multiplier,
and the sensing attentions in closed form.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import transfer
from .scenario import CONST, AtomScenario, BandPlan, DerivedConstants, derive_constants

LN2 = math.log(2.0)


class ConvergenceError(RuntimeError):
    """Bisection failed to meet its tolerance within the iteration budget."""


def sum_square_objective(A, chi0: float, Gamma2: float, P_in: float):
    """Normalized squared global gain rho0^2 / P_r as a function of the sum-square."""
    A = np.asarray(A, dtype=float)
    scale = 4.0 * chi0**2 * Gamma2**2 * P_in / CONST.hbar**2
    return scale * np.exp(-chi0 * A / (A + Gamma2)) * A / (A + Gamma2) ** 4


def sum_square_objective_x(x, chi0: float, Gamma2: float, P_in: float):
    """Same objective in the substituted variable x = A / (A + Gamma^2), x in [0, 1)."""
    x = np.asarray(x, dtype=float)
    scale = 4.0 * chi0**2 * P_in / (CONST.hbar**2 * Gamma2)
    return scale * np.exp(-chi0 * x) * x * (1.0 - x) ** 3


def optimal_sum_square(chi0: float, Gamma2: float) -> float:
    """Closed-form maximizer of :func:`sum_square_objective`.

    Both the numerator (chi0 + 4 - r) and denominator (chi0 - 4 + r) with
    r = sqrt(chi0^2 + 4 chi0 + 16) are rationalized, so the expression is free
    of subtractive cancellation for any chi0 > 0 and tends to Gamma^2 / 3.
    """
    if not (chi0 > 0 and Gamma2 > 0):
        raise ValueError("chi0 and Gamma^2 must be positive")
    r = math.sqrt(chi0 * chi0 + 4.0 * chi0 + 16.0)
    return Gamma2 * (r - chi0 + 4.0) / (3.0 * (chi0 + 4.0 + r))


def optimal_x(chi0: float) -> float:
    """Maximizer of e^{-chi0 x} x (1 - x)^3 on [0, 1)."""
    r = math.sqrt(chi0 * chi0 + 4.0 * chi0 + 16.0)
    return 2.0 / ((chi0 + 4.0) + r)


@dataclass(frozen=True)
class SEAllocationProblem:
    gamma: np.ndarray  # bandwidth fractions
    beta: np.ndarray  # received field power over extrinsic noise
    eps: np.ndarray  # intrinsic-to-extrinsic noise ratio at unit attention

    def __post_init__(self):
        for name in ("gamma", "beta", "eps"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 1 or np.any(arr <= 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be a positive 1-D vector")
            object.__setattr__(self, name, arr)
        if not (self.gamma.shape == self.beta.shape == self.eps.shape):
            raise ValueError("gamma, beta and eps must have equal length")

    @property
    def n_bands(self) -> int:
        return len(self.gamma)


@dataclass(frozen=True)
class SenseAllocationProblem:
    xi: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        if xi.ndim != 1 or np.any(xi <= 0) or not np.all(np.isfinite(xi)):
            raise ValueError("xi must be a positive 1-D vector")
        object.__setattr__(self, "xi", xi)


@dataclass(frozen=True)
class BandBudget:
    """Attention-independent per-band quantities at a given sum-square."""

    A: float
    P_r: float
    varrho0: float
    C1: float
    C2: np.ndarray
    E2: np.ndarray  # received data field power |E_s|^2
    bandwidth: np.ndarray
    mu: np.ndarray


def band_budget(s: AtomScenario, bands: BandPlan, A: float | None = None) -> BandBudget:
    d = derive_constants(s)
    if A is None:
        A = optimal_sum_square(d.chi0, d.Gamma2)
    return BandBudget(
        A=A,
        P_r=transfer.dc_bias(s, A),
        varrho0=transfer.global_gain(s, A),
        C1=transfer.shot_noise_coefficient(s),
        C2=transfer.blackbody_coefficient(s, bands.omega),
        E2=np.abs(transfer.received_field(s, bands, np.ones(bands.n_bands))) ** 2,
        bandwidth=bands.bandwidth,
        mu=bands.mu,
    )


def se_problem(b: BandBudget) -> SEAllocationProblem:
    return SEAllocationProblem(
        gamma=b.bandwidth / b.bandwidth.sum(),
        beta=b.E2 / (b.bandwidth * b.C2),
        eps=b.P_r * b.C1 / (b.mu**2 * b.varrho0**2 * b.C2),
    )


def sense_problem(b: BandBudget) -> SenseAllocationProblem:
    return SenseAllocationProblem(3.0 * b.P_r * b.bandwidth * b.C1 / (2.0 * math.pi**2 * b.mu**2 * b.varrho0**2 * b.E2))


def band_snr(alpha, p: SEAllocationProblem) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    return p.beta * alpha / (alpha + p.eps)


def se_per_band(alpha, p: SEAllocationProblem) -> np.ndarray:
    return p.gamma * np.log2(1.0 + band_snr(alpha, p))


def se_objective(alpha, p: SEAllocationProblem) -> float:
    """Bandwidth-weighted spectral efficiency in bps/Hz."""
    return float(np.sum(se_per_band(alpha, p)))


def se_marginal(alpha, p: SEAllocationProblem) -> np.ndarray:
    """d/d alpha_n of sum_n gamma_n ln(1 + SNR_n) (natural log)."""
    alpha = np.asarray(alpha, dtype=float)
    return p.gamma * p.beta * p.eps / (((1.0 + p.beta) * alpha + p.eps) * (alpha + p.eps))


def se_gradient(alpha, p: SEAllocationProblem) -> np.ndarray:
    return se_marginal(alpha, p) / LN2


def se_hessian_diag(alpha, p: SEAllocationProblem) -> np.ndarray:
    """Diagonal of the Hessian of :func:`se_objective`; off-diagonal terms vanish."""
    alpha = np.asarray(alpha, dtype=float)
    u = (1.0 + p.beta) * alpha + p.eps
    v = alpha + p.eps
    return -p.gamma * p.beta * p.eps * ((1.0 + p.beta) * v + u) / (LN2 * (u * v) ** 2)


def attention_at(nu: float, p: SEAllocationProblem) -> np.ndarray:
    """Positive root of (1+b) a^2 + (2+b) e a + e^2 - nu g b e = 0, clamped at zero.

    The textbook root (-(2+b) e + sqrt(disc)) / (2 (1+b)) loses every digit
    when the root is small next to e, so it is used in rationalized form.
    """
    b, e, g = p.beta, p.eps, p.gamma
    disc = b * b * e * e + 4.0 * nu * g * b * (1.0 + b) * e
    root = 2.0 * e * (nu * g * b - e) / (np.sqrt(disc) + (2.0 + b) * e)
    return np.maximum(0.0, root)


def attention_from_excess(w: float, p: SEAllocationProblem) -> np.ndarray:
    """Attentions at multiplier nu = (1 + w) / max_n c_n, c_n = gamma_n beta_n / eps_n.

    Same roots as :func:`attention_at`, but written in the relative excess
    ``w`` so that bands whose eps_n dwarfs their attention (far from the
    optimal sum-square) keep full precision.
    """
    c = p.gamma * p.beta / p.eps
    cmax = c.max()
    excess = (c / cmax) * w - (cmax - c) / cmax  # g_n(a_n) - 1 with a_n = alpha_n / eps_n
    excess = np.maximum(excess, 0.0)
    k = 2.0 + p.beta
    a = 2.0 * excess / (k + np.sqrt(k * k + 4.0 * (1.0 + p.beta) * excess))
    return p.eps * a


@dataclass(frozen=True)
class SEAllocation:
    alpha: np.ndarray
    nu: float
    iterations: int


def optimal_attention_se(p: SEAllocationProblem, tol: float = 1e-10, max_iter: int = 200) -> SEAllocation:
    """SE-optimal attentions by bisection on the Lagrange multiplier.

    The multiplier is searched as nu = (1 + w) / max_n c_n with w >= 0: w = 0
    gives zero total attention and the sum grows without bound in w, so the
    bracket starts at [0, 1] and doubles its upper end until it straddles one.
    """
    cmax = float(np.max(p.gamma * p.beta / p.eps))
    if p.n_bands == 1:
        return SEAllocation(np.ones(1), 1.0 / float(se_marginal(np.ones(1), p)[0]), 0)
    lo, hi = 0.0, 1.0
    while attention_from_excess(hi, p).sum() < 1.0:
        lo, hi = hi, 2.0 * hi
        if not math.isfinite(hi):
            raise ConvergenceError("could not bracket the multiplier")
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        total = attention_from_excess(mid, p).sum()
        if abs(total - 1.0) <= tol or mid in (lo, hi):
            alpha = attention_from_excess(mid, p)
            if abs(alpha.sum() - 1.0) > 1e-8:
                break
            return SEAllocation(alpha / alpha.sum(), (1.0 + mid) / cmax, it)
        if total < 1.0:
            lo = mid
        else:
            hi = mid
    raise ConvergenceError(
        f"bisection did not converge in {max_iter} iterations: w in [{lo!r}, {hi!r}], "
        f"sum alpha in [{attention_from_excess(lo, p).sum()!r}, {attention_from_excess(hi, p).sum()!r}]"
    )


def optimal_attention_sensing(p: SenseAllocationProblem) -> np.ndarray:
    r = np.sqrt(p.xi)
    return r / r.sum()


def sensing_objective(alpha, p: SenseAllocationProblem) -> float:
    alpha = np.asarray(alpha, dtype=float)
    with np.errstate(divide="ignore"):
        return float(np.sum(np.where(alpha > 0, p.xi / np.where(alpha > 0, alpha, 1.0), np.inf)))


def ncrlb(alpha, b: BandBudget) -> np.ndarray:
    """Per-band normalized CRLB of the displacement; ``inf`` where a band gets no attention."""
    alpha = np.asarray(alpha, dtype=float)
    floor = 3.0 * b.bandwidth * b.C2 / (2.0 * math.pi**2 * b.E2)
    xi = sense_problem(b).xi
    safe = np.where(alpha > 0, alpha, 1.0)
    return np.where(alpha > 0, floor + xi / safe, np.inf)


def ncrlb_from_snr(snr, omega) -> np.ndarray:
    """CRLB(d) / E|d|^2 = (c^2 / omega^2) / (2 SNR) / (pi^2 c^2 / 3 omega^2)."""
    snr = np.asarray(snr, dtype=float)
    omega = np.asarray(omega, dtype=float)
    crlb = (CONST.c / omega) ** 2 / (2.0 * snr)
    return crlb / (math.pi**2 * CONST.c**2 / (3.0 * omega**2))


def to_db(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(x)


@dataclass
class OptimizationReport:
    A_star: float
    sqrt_A_star_mhz_over_2pi: float
    services: list[str]
    alpha_se: list[float]
    nu_se: float
    se_per_band: list[float]
    se_total: float
    alpha_sensing: list[float]
    ncrlb_db: list[float]
    ncrlb_sum_db: float
    alpha_selected: list[float]
    selected_by: str
    omega_r_mhz_over_2pi: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def optimize_scenario(s: AtomScenario, bands: BandPlan, d: DerivedConstants | None = None) -> OptimizationReport:
    """Optimal sum-square plus both attention designs for the scenario's band plan.

    ``alpha_selected`` follows the service mix: all-sensing picks the NCRLB
    design, anything with a communication band picks the SE design.
    """
    d = d or derive_constants(s)
    A = optimal_sum_square(d.chi0, d.Gamma2)
    b = band_budget(s, bands, A)
    pse = se_problem(b)
    se_alloc = optimal_attention_se(pse)
    alpha_sense = optimal_attention_sensing(sense_problem(b))
    all_sense = all(sv.kind == "sense" for sv in bands.services)
    chosen = alpha_sense if all_sense else se_alloc.alpha
    nc = ncrlb(alpha_sense, b)
    return OptimizationReport(
        A_star=A,
        sqrt_A_star_mhz_over_2pi=math.sqrt(A) / (2e6 * math.pi),
        services=[str(v) for v in bands.services],
        alpha_se=se_alloc.alpha.tolist(),
        nu_se=se_alloc.nu,
        se_per_band=se_per_band(se_alloc.alpha, pse).tolist(),
        se_total=se_objective(se_alloc.alpha, pse),
        alpha_sensing=alpha_sense.tolist(),
        ncrlb_db=to_db(nc).tolist(),
        ncrlb_sum_db=float(to_db(nc.sum())),
        alpha_selected=chosen.tolist(),
        selected_by="ncrlb" if all_sense else "se",
        omega_r_mhz_over_2pi=(np.sqrt(A * chosen) / (2e6 * math.pi)).tolist(),
    )
