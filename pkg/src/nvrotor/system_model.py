"""Physical model of a levitated, NV-doped nanodiamond in a Paul trap.

Turns the raw geometry, trap and field inputs into the libration rates,
spin-libration couplings and dispersive frequency shifts, and locates the
special field values (level anti-crossing, critical field for the beta
instability, frequency-ratio resonances) by bisection.

All rates are angular frequencies in rad/s; fields are in tesla.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import constants
from scipy import optimize

from .errors import (
    AntiCrossingError,
    ConvergenceError,
    DegenerateTrapError,
    ImaginaryFrequencyError,
    NoRootError,
)

HBAR = constants.hbar
GAMMA_E = 1.76e11  # rad / (s T)
D_NV = 2.0 * math.pi * 2.87e9  # rad / s

ROOT_RTOL = 1e-6
DEFAULT_DELTA_FLOOR = 2.0 * math.pi * 1e3
DISPERSIVE_THRESHOLD = 0.1


class ExpansionWarning(UserWarning):
    """The small-b/a expansion is used outside its validity range."""


class Branch(enum.Enum):
    POSITIVE_DELTA = "PositiveDelta"
    NEGATIVE_DELTA = "NegativeDelta"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "")
        for member in cls:
            if key in (member.value.lower(), member.name.lower().replace("_", "")):
                return member
        if key in ("+", "pos", "positive", "low"):
            return cls.POSITIVE_DELTA
        if key in ("-", "neg", "negative", "high"):
            return cls.NEGATIVE_DELTA
        raise ValueError(f"unknown branch {value!r}")


class RatioOrientation(enum.Enum):
    """Which frequency goes in the numerator of a resonance condition."""

    GAMMA_OVER_BETA = "gamma/beta"
    BETA_OVER_GAMMA = "beta/gamma"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_over_", "/")
        for member in cls:
            if key == member.value:
                return member
        raise ValueError(f"unknown ratio orientation {value!r}")


# ---------------------------------------------------------------------------
# inputs


@dataclass(frozen=True)
class Geometry:
    """Prolate spheroid: symmetry semiaxis ``a``, equatorial semiaxis ``b`` (m)."""

    a: float
    b: float
    mass_density: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("semiaxes must be positive")
        if self.b > self.a:
            raise ValueError("require b <= a (prolate or spherical particle)")
        if not self.mass_density > 0:
            raise ValueError("mass_density must be positive")


@dataclass(frozen=True)
class TrapConfig:
    epsilon: float
    delta: float
    udc_over_uac: float
    omega0: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 <= self.delta < 1:
            raise ValueError("trap asymmetry delta must lie in [0, 1)")
        if not self.udc_over_uac >= 0:
            raise ValueError("udc_over_uac must be non-negative")
        if not self.omega0 > 0:
            raise ValueError("omega0 must be positive")


@dataclass(frozen=True)
class FieldSpinConfig:
    b0: float
    gamma_e: float = GAMMA_E
    d_nv: float = D_NV

    def __post_init__(self):
        if not self.b0 > 0:
            raise ValueError("b0 must be positive")
        if not self.gamma_e > 0:
            raise ValueError("gamma_e must be positive")
        if not self.d_nv > 0:
            raise ValueError("d_nv must be positive")


@dataclass(frozen=True)
class SystemConfig:
    geometry: Geometry
    trap: TrapConfig
    field: FieldSpinConfig

    def with_b0(self, b0):
        return replace(self, field=replace(self.field, b0=b0))

    def with_omega0(self, omega0):
        return replace(self, trap=replace(self.trap, omega0=omega0))


def fig1_config(b0=90e-3):
    """Parameter set of the reference libration figures, at field ``b0``."""
    return SystemConfig(
        geometry=Geometry(a=100e-9, b=20e-9, mass_density=3.5e3),
        trap=TrapConfig(epsilon=1e-2, delta=0.1, udc_over_uac=5e-3,
                        omega0=2.0 * math.pi * 5e6),
        field=FieldSpinConfig(b0=b0, gamma_e=GAMMA_E, d_nv=D_NV),
    )


# ---------------------------------------------------------------------------
# derived quantities


@dataclass(frozen=True)
class InertiaTensor:
    mass: float
    i_perp: float
    i_sym: float


@dataclass(frozen=True)
class SecularRates:
    omega_l: float
    delta_q: float
    omega_alpha: float
    omega_beta: float
    omega_gamma: float
    beta0: float
    gamma0: float
    g_beta: float
    g_gamma: float
    xi_beta: float


@dataclass(frozen=True)
class DispersiveRates:
    """Spin-conditioned libration frequencies and shifts for one sign of Delta.

    For ``POSITIVE_DELTA`` the fields hold the tilde-omega / chi pair of the
    low-field Hamiltonian; for ``NEGATIVE_DELTA`` they hold the capital-Omega /
    chi-tilde pair of the high-field one.  In both cases the mode evolves as
    ``freq * n`` in the trapped spin branch and as
    ``freq * n - chi/2 (a + a^dag)^2`` in the other.
    """

    branch: Branch
    freq_beta: float
    freq_gamma: float
    chi_beta: float
    chi_gamma: float
    delta_omega_beta: float

    @property
    def beta_stable(self):
        return self.freq_beta > 2.0 * self.chi_beta

    @property
    def gamma_stable(self):
        return self.freq_gamma > 2.0 * self.chi_gamma


@dataclass(frozen=True)
class ValidityReport:
    epsilon_ok: bool
    udc_ratio_ok: bool
    dispersive_terms: tuple
    dispersive_ok: bool
    beta_stable: bool
    threshold: float = DISPERSIVE_THRESHOLD

    @property
    def ok(self):
        return self.dispersive_ok


def derive_inertia(g: Geometry) -> InertiaTensor:
    """Mass and principal moments of a homogeneous solid prolate spheroid."""
    mass = 4.0 / 3.0 * math.pi * g.mass_density * g.a * g.b * g.b
    return InertiaTensor(
        mass=mass,
        i_perp=mass * (g.a**2 + g.b**2) / 5.0,
        i_sym=2.0 * mass * g.b**2 / 5.0,
    )


def quadrupole_anisotropy_closed(g: Geometry, q: float) -> float:
    """Small-aspect-ratio estimate ``q (a^2 + 2 b^2) / 4``.

    Emits an :class:`ExpansionWarning` when ``b/a > 0.5``.
    """
    if g.b / g.a > 0.5:
        warnings.warn(f"b/a = {g.b / g.a:.3g} is outside the small-b/a expansion",
                      ExpansionWarning, stacklevel=2)
    return q * (g.a**2 + 2.0 * g.b**2) / 4.0


def _anisotropy_quadrature(polar, equatorial, q, order):
    # Uniform surface charge; z along the symmetry axis of semilength `polar`.
    xi, w_xi = np.polynomial.legendre.leggauss(order)
    n_phi = max(8, order // 4)
    phi = 2.0 * math.pi * np.arange(n_phi) / n_phi
    w_phi = 2.0 * math.pi / n_phi
    xi2 = xi[:, None] ** 2
    ds = equatorial * np.sqrt(polar**2 * (1.0 - xi2) + equatorial**2 * xi2)
    moment = polar**2 * xi2 - equatorial**2 * (1.0 - xi2) * np.cos(phi[None, :]) ** 2
    weight = np.broadcast_to(w_xi[:, None] * w_phi * ds, moment.shape)
    area = np.sum(weight)
    return q * np.sum(weight * moment) / area


def quadrupole_anisotropy_exact(g: Geometry, q: float, quad_order: int = 64,
                                max_order: int = 4096) -> float:
    """Surface integral of ``(z^2 - x^2)`` for a uniformly charged spheroid.

    Gauss-Legendre in ``xi = cos(theta)`` and the periodic trapezoidal rule in
    the azimuth.  The order is doubled until two successive estimates agree to
    1e-8 relative to ``q a^2``; :class:`ConvergenceError` if they still differ
    by more than 1e-6 at ``max_order``.
    """
    if quad_order < 16:
        raise ValueError("quad_order must be >= 16")
    scale = abs(q) * g.a**2
    order = quad_order
    value = _anisotropy_quadrature(g.a, g.b, q, order)
    while True:
        finer = _anisotropy_quadrature(g.a, g.b, q, 2 * order)
        diff = abs(finer - value)
        if diff <= 1e-8 * scale:
            return finer
        if 2 * order >= max_order:
            if diff > 1e-6 * scale:
                raise ConvergenceError(
                    f"anisotropy quadrature not converged at order {2 * order}: "
                    f"successive difference {diff:.3e}")
            return finer
        order *= 2
        value = finer


def epsilon_from_trap(u_ac, delta_q, i_perp, omega0, ell0):
    """Drive parameter ``U_ac dQ / (I omega0^2 ell0^2)`` from trap hardware values."""
    return u_ac * delta_q / (i_perp * omega0**2 * ell0**2)


def qubit_splitting(s: SystemConfig, b0=None) -> float:
    b = s.field.b0 if b0 is None else b0
    return s.field.d_nv - s.field.gamma_e * b


def secular_rates(s: SystemConfig) -> SecularRates:
    inertia = derive_inertia(s.geometry)
    t = s.trap
    omega_l = s.field.gamma_e * s.field.b0
    delta_q = s.field.d_nv - omega_l
    omega_beta = t.omega0 * math.sqrt(
        2.0 * t.delta * t.epsilon * t.udc_over_uac + 2.0 * t.delta**2 * t.epsilon**2)
    if omega_beta == 0.0:
        raise DegenerateTrapError(
            "omega_beta vanishes: the trap needs delta > 0 (or U_dc > 0 with delta > 0)")
    omega_alpha = t.omega0 * math.sqrt(
        (1.0 + t.delta / 3.0)
        * (3.0 * t.epsilon * t.udc_over_uac + 4.5 * t.delta**2 * t.epsilon**2))
    omega_gamma = math.sqrt(HBAR * omega_l / inertia.i_sym)
    beta0 = math.sqrt(HBAR / (2.0 * inertia.i_perp * omega_beta))
    gamma0 = math.sqrt(HBAR / (math.sqrt(2.0) * inertia.i_sym * omega_gamma))
    return SecularRates(
        omega_l=omega_l,
        delta_q=delta_q,
        omega_alpha=omega_alpha,
        omega_beta=omega_beta,
        omega_gamma=omega_gamma,
        beta0=beta0,
        gamma0=gamma0,
        g_beta=omega_l * beta0 / math.sqrt(2.0),
        g_gamma=omega_l * gamma0 / math.sqrt(2.0),
        xi_beta=omega_l * beta0**2 / 2.0,
    )


def dispersive_rates(s: SystemConfig, delta_floor: float = DEFAULT_DELTA_FLOOR,
                     sec: SecularRates | None = None) -> DispersiveRates:
    """Dispersive libration frequencies and spin-dependent shifts.

    Raises :class:`AntiCrossingError` when ``|Delta| < delta_floor`` and
    :class:`ImaginaryFrequencyError` when a squared frequency is negative.
    """
    sec = secular_rates(s) if sec is None else sec
    inertia = derive_inertia(s.geometry)
    i_perp, i_sym = inertia.i_perp, inertia.i_sym
    w_l, delta = sec.omega_l, sec.delta_q
    if abs(delta) < delta_floor:
        raise AntiCrossingError(
            f"|Delta|/2pi = {abs(delta) / (2 * math.pi):.4g} Hz is below the floor "
            f"{delta_floor / (2 * math.pi):.4g} Hz (B0 = {s.field.b0 * 1e3:.6g} mT)")
    # hbar w_L (1 + w_L/Delta) = hbar w_L D_nv / Delta; same magnitude on both sides
    shift = HBAR * w_l * s.field.d_nv / abs(delta)
    delta_omega_beta = math.sqrt(shift / i_perp)

    if delta > 0:
        branch = Branch.POSITIVE_DELTA
        beta_sq = sec.omega_beta**2 + shift / i_perp
        gamma_sq = shift / i_sym
        if gamma_sq <= 0:
            raise ImaginaryFrequencyError("tilde-omega_gamma^2 <= 0")
        freq_beta = math.sqrt(beta_sq)
        freq_gamma = math.sqrt(gamma_sq)
        chi_beta = shift / (i_perp * freq_beta)
        chi_gamma = HBAR * w_l * (1.0 + 2.0 * w_l / delta) / (2.0 * i_sym * freq_gamma)
    else:
        branch = Branch.NEGATIVE_DELTA
        a_delta = -delta
        beta_sq = sec.omega_beta**2 + HBAR * w_l * (w_l / a_delta - 1.0) / i_perp
        if beta_sq <= 0:
            raise ImaginaryFrequencyError(
                f"Omega_beta^2 = {beta_sq:.4g} < 0 at B0 = {s.field.b0 * 1e3:.6g} mT")
        freq_beta = math.sqrt(beta_sq)
        freq_gamma = math.sqrt(HBAR * w_l**2 / (i_sym * a_delta))
        chi_beta = (beta_sq - sec.omega_beta**2) / freq_beta
        # curvature matching: freq^2 - 2 chi freq equals the repelled-branch
        # stiffness hbar w_L / I3 - Omega_gamma^2
        chi_gamma = freq_gamma * (1.0 - a_delta / (2.0 * w_l))
    return DispersiveRates(
        branch=branch,
        freq_beta=freq_beta,
        freq_gamma=freq_gamma,
        chi_beta=chi_beta,
        chi_gamma=chi_gamma,
        delta_omega_beta=delta_omega_beta,
    )


def validity_report(s: SystemConfig, threshold: float = DISPERSIVE_THRESHOLD,
                    n_thermal: float = 0.0) -> ValidityReport:
    """Check the secular and dispersive approximations at the configured field.

    The angular variances in the dispersive conditions are approximated by the
    zero-point values times ``2 n_thermal + 1``.
    """
    sec = secular_rates(s)
    inertia = derive_inertia(s.geometry)
    w_l = sec.omega_l
    a_delta = abs(sec.delta_q)
    occupation = 2.0 * n_thermal + 1.0
    beta_var = sec.beta0**2 * occupation
    gamma_var = sec.gamma0**2 * occupation
    if a_delta == 0.0:
        terms = (math.inf, math.inf, math.inf)
    else:
        terms = (
            w_l / a_delta * beta_var,
            (w_l / a_delta) ** 2 * gamma_var,
            inertia.i_sym / (2.0 * HBAR * a_delta) * (sec.omega_gamma / math.sqrt(2.0)) ** 2
            * gamma_var,
        )
    dispersive_ok = all(term < threshold for term in terms)
    try:
        beta_stable = dispersive_rates(s, delta_floor=0.0, sec=sec).beta_stable
    except (AntiCrossingError, ImaginaryFrequencyError, ZeroDivisionError):
        beta_stable = False
    return ValidityReport(
        epsilon_ok=s.trap.epsilon < threshold,
        udc_ratio_ok=s.trap.udc_over_uac < threshold,
        dispersive_terms=terms,
        dispersive_ok=dispersive_ok,
        beta_stable=beta_stable,
        threshold=threshold,
    )


# ---------------------------------------------------------------------------
# root finding


def _bisect(func, lo, hi, what):
    f_lo, f_hi = func(lo), func(hi)
    if not (np.isfinite(f_lo) and np.isfinite(f_hi)):
        raise NoRootError(f"{what}: target not finite at the bracket ends")
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if np.sign(f_lo) == np.sign(f_hi):
        raise NoRootError(
            f"{what}: no sign change on [{lo * 1e3:.6g}, {hi * 1e3:.6g}] mT")
    return optimize.bisect(func, lo, hi, xtol=1e-15, rtol=ROOT_RTOL, maxiter=200)


def anti_crossing_field(s: SystemConfig) -> float:
    """Exact zero of the affine qubit splitting, ``D_nv / gamma_e``."""
    return s.field.d_nv / s.field.gamma_e


def find_anti_crossing(s: SystemConfig, bracket=(1e-3, 1.0)) -> float:
    lo, hi = bracket
    return _bisect(lambda b: qubit_splitting(s, b), lo, hi, "anti-crossing")


def _below_crossing(s):
    return anti_crossing_field(s) * (1.0 - 1e-9)


def _above_crossing(s):
    return anti_crossing_field(s) * (1.0 + 1e-9)


def find_bstar(s: SystemConfig, bracket=None) -> float:
    """Field where the beta mode of the repelled branch loses confinement.

    Root of ``tilde-omega_beta - 2 chi_beta`` on the Delta > 0 side.
    """
    if bracket is None:
        bracket = (1e-4, _below_crossing(s))
    lo, hi = bracket
    if hi >= anti_crossing_field(s):
        raise NoRootError("B* bracket must stay below the anti-crossing")

    def margin(b):
        r = dispersive_rates(s.with_b0(b), delta_floor=0.0)
        return r.freq_beta - 2.0 * r.chi_beta

    return _bisect(margin, lo, hi, "B*")


def frequency_ratio(s: SystemConfig, orientation=RatioOrientation.GAMMA_OVER_BETA) -> float:
    r = dispersive_rates(s, delta_floor=0.0)
    if RatioOrientation.parse(orientation) is RatioOrientation.GAMMA_OVER_BETA:
        return r.freq_gamma / r.freq_beta
    return r.freq_beta / r.freq_gamma


def find_resonance_fields(s: SystemConfig, n: int, branch=Branch.NEGATIVE_DELTA,
                          orientation=RatioOrientation.GAMMA_OVER_BETA,
                          bracket=None) -> float:
    """Field where the chosen frequency ratio equals the integer ``n``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    branch = Branch.parse(branch)
    if bracket is None:
        if branch is Branch.POSITIVE_DELTA:
            bracket = (1e-4, _below_crossing(s))
        else:
            bracket = (_above_crossing(s), 2.0 * anti_crossing_field(s))
    lo, hi = bracket
    ac = anti_crossing_field(s)
    if branch is Branch.POSITIVE_DELTA and hi >= ac:
        raise NoRootError("PositiveDelta bracket must lie below the anti-crossing")
    if branch is Branch.NEGATIVE_DELTA and lo <= ac:
        raise NoRootError("NegativeDelta bracket must lie above the anti-crossing")

    def excess(b):
        try:
            return frequency_ratio(s.with_b0(b), orientation) - n
        except ImaginaryFrequencyError:
            return math.nan

    return _bisect(excess, lo, hi, f"ratio = {n}")
