"""Closed-form interference probability of the spin-echo superposition protocol.

Each libration mode evolves as ``freq * n`` when the spin sits in the trapping
branch and as ``freq * n - chi/2 (a + a^dag)^2`` in the other one.  The
squeezing propagator is disentangled with the SU(1,1) normal-ordering
identity

    exp(-i tau H_down) ~ exp(eta/2 a^dag^2) exp(log(eta0) K0) exp(eta/2 a^2),

with ``K0 = (a^dag a + a a^dag)/4``; the four-fold echo product
``U_down^dag U_up^dag U_down U_up`` collapses to the same form with
parameters ``(phi, theta, psi)``.  Averaging the latter over a thermal state
gives the overlap amplitude

    I^2 = g / ((1 + n (1 - g))^2 - n^2 phi psi),
    g   = |eta0| / (1 - |eta|^2 exp(2 i freq tau)),

whose square-root branch is fixed by continuity from ``I(0) = 1``.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    BranchTrackingError,
    InstabilityError,
    PoleError,
    SingularFactorizationError,
)
from .system_model import Branch, DispersiveRates

SINGULAR_TOL = 1e-14
SERIES_CUTOFF = 1e-4
# continuity path: at least 64 points per half period of the rotation
PATH_POINTS_PER_HALF_PERIOD = 64
MAX_PATH_REFINEMENTS = 60


@dataclass(frozen=True)
class Su11Factor:
    eta: complex
    eta0: complex
    zeta: complex
    lambda0: complex
    lam: complex


@dataclass(frozen=True)
class EchoKernel:
    phi: complex
    theta: complex
    psi: complex


@dataclass(frozen=True)
class ThermalSpec:
    """Initial thermal occupations; ``n_beta=None`` derives it from ``n_gamma``."""

    n_gamma: float = 0.0
    n_beta: float | None = None

    def __post_init__(self):
        if not self.n_gamma >= 0:
            raise ValueError("n_gamma must be non-negative")
        if self.n_beta is not None and not self.n_beta >= 0:
            raise ValueError("n_beta must be non-negative")

    def beta_occupation(self, rates: DispersiveRates) -> float:
        if self.n_beta is not None:
            return self.n_beta
        return thermal_occupation_transfer(self.n_gamma, rates.freq_beta, rates.freq_gamma)


@dataclass(frozen=True)
class DephasingSpec:
    """Markovian qubit dephasing; ``gamma2 = 2 pi / t2`` unless given directly."""

    t2: float = math.inf
    gamma2: float | None = None

    def __post_init__(self):
        if not self.t2 > 0:
            raise ValueError("t2 must be positive (use inf for no dephasing)")
        derived = 0.0 if math.isinf(self.t2) else 2.0 * math.pi / self.t2
        if self.gamma2 is None:
            object.__setattr__(self, "gamma2", derived)
        elif not self.gamma2 >= 0:
            raise ValueError("gamma2 must be non-negative")
        elif math.isfinite(self.t2) and not math.isclose(self.gamma2, derived, rel_tol=1e-12):
            raise ValueError("gamma2 and t2 are inconsistent; give only one of them")

    @classmethod
    def from_t2(cls, t2):
        return cls(t2=t2)

    @classmethod
    def from_rate(cls, gamma2):
        return cls(gamma2=gamma2)


@dataclass(frozen=True)
class ProbabilityPoint:
    tau: float
    p_up: float
    p_down: float
    overlap_beta: complex
    overlap_gamma: complex


# ---------------------------------------------------------------------------
# vectorised kernels (array in tau)


def _sinhc(z):
    z = np.asarray(z, dtype=complex)
    out = np.ones_like(z)
    big = np.abs(z) >= SERIES_CUTOFF
    out[big] = np.sinh(z[big]) / z[big]
    z2 = z[~big] ** 2
    out[~big] = 1.0 + z2 / 6.0 + z2 * z2 / 120.0
    return out


def _factor_arrays(freq, chi, tau):
    tau = np.asarray(tau, dtype=float)
    lam0 = -2j * tau * (freq - chi)
    lam = 1j * chi * tau
    zeta2 = (lam0 / 2.0) ** 2 - lam**2
    zeta = np.sqrt(zeta2.astype(complex))
    cosh = np.cosh(zeta)
    sinhc = _sinhc(zeta)
    # denominator of eta divided by zeta, finite at zeta -> 0
    den = cosh - (lam0 / 2.0) * sinhc
    if np.any(np.abs(den) < SINGULAR_TOL):
        raise SingularFactorizationError("zeta cosh(zeta) - lambda0/2 sinh(zeta) vanishes")
    eta = lam * sinhc / den
    eta0 = 1.0 / den**2
    return eta, eta0, zeta, lam0, lam


def _one_minus_rot(freq, tau):
    # 1 - exp(2 i freq tau) without cancellation near whole turns
    x = freq * np.asarray(tau, dtype=float)
    return 2.0 * np.sin(x) ** 2 - 1j * np.sin(2.0 * x)


def _kernel_arrays(eta, eta0, freq, tau):
    rot = np.exp(2j * freq * np.asarray(tau, dtype=float))
    # For real tau, freq and chi one has 1 - |eta|^2 = |eta0| exactly; using it
    # avoids cancellation when the squeezing is strong.
    abs_eta0 = np.abs(eta0)
    den = abs_eta0 * rot + _one_minus_rot(freq, tau)
    if np.any(np.abs(den) < SINGULAR_TOL):
        raise PoleError("1 - |eta|^2 exp(2 i freq tau) vanishes")
    phi = np.conj(eta) + np.conj(eta0) * eta * rot / den
    theta = abs_eta0**2 / den**2
    psi = eta / rot + np.conj(eta) * eta0 / den
    return phi, theta, psi, abs_eta0 / den


def _overlap_sq_arrays(freq, chi, n_bar, tau):
    eta, eta0, *_ = _factor_arrays(freq, chi, tau)
    phi, _theta, psi, g = _kernel_arrays(eta, eta0, freq, tau)
    return g / ((1.0 + n_bar * (1.0 - g)) ** 2 - n_bar**2 * phi * psi)


# ---------------------------------------------------------------------------
# scalar operations


def branch_factorization(freq: float, chi: float, tau: float) -> Su11Factor:
    """Normal-ordered parameters of the repelled-branch propagator at time ``tau``."""
    if not freq > 0:
        raise ValueError("freq must be positive")
    if not tau >= 0:
        raise ValueError("tau must be non-negative")
    eta, eta0, zeta, lam0, lam = (complex(x[0]) for x in _factor_arrays(freq, chi, [tau]))
    return Su11Factor(eta=eta, eta0=eta0, zeta=zeta, lambda0=lam0, lam=lam)


def echo_kernel(f: Su11Factor, freq: float, tau: float) -> EchoKernel:
    phi, theta, psi, _g = _kernel_arrays(np.array([f.eta]), np.array([f.eta0]), freq, [tau])
    return EchoKernel(phi=complex(phi[0]), theta=complex(theta[0]), psi=complex(psi[0]))


def overlap_squared(k: EchoKernel, f: Su11Factor, n_bar: float, freq: float,
                    tau: float) -> complex:
    """Single-valued square of the thermal overlap amplitude."""
    if not n_bar >= 0:
        raise ValueError("n_bar must be non-negative")
    rot = cmath.exp(2j * freq * tau)
    g = abs(f.eta0) / (abs(f.eta0) * rot + complex(_one_minus_rot(freq, tau)))
    return g / ((1.0 + n_bar * (1.0 - g)) ** 2 - n_bar**2 * k.phi * k.psi)


def _wrap(angle):
    return (angle + np.pi) % (2.0 * np.pi) - np.pi


def overlap_trace(freq: float, chi: float, n_bar: float, taus) -> np.ndarray:
    """Thermal overlap amplitude along an ordered grid of times starting at 0.

    The phase of ``I^2`` is unwrapped along a path whose spacing never exceeds
    ``pi / (64 freq)``; steps where it turns by more than pi/4 are subdivided.
    """
    taus = np.asarray(taus, dtype=float)
    if taus.ndim != 1 or taus.size == 0:
        raise ValueError("taus must be a non-empty 1-D grid")
    if taus[0] != 0.0:
        raise BranchTrackingError("the tau grid must start at 0 to anchor the branch")
    if np.any(np.diff(taus) < 0):
        raise BranchTrackingError("the tau grid must be non-decreasing")
    if not n_bar >= 0:
        raise ValueError("n_bar must be non-negative")
    if chi == 0.0:
        return np.ones(taus.size, dtype=complex)

    rate = max(abs(freq), abs(freq - chi), abs(chi))
    h_max = math.pi / (PATH_POINTS_PER_HALF_PERIOD * rate)
    out = np.empty(taus.size, dtype=complex)
    out[0] = 1.0
    phase = 0.0
    t_prev = 0.0
    prev_arg = 0.0
    for i in range(1, taus.size):
        t_target = taus[i]
        if t_target > t_prev:
            steps = max(1, math.ceil((t_target - t_prev) / h_max))
            sub = np.linspace(t_prev, t_target, steps + 1)[1:]
            vals = _overlap_sq_arrays(freq, chi, n_bar, sub)
            for t_next, val in zip(sub, vals):
                phase, prev_arg = _advance_phase(freq, chi, n_bar, t_prev, t_next,
                                                 val, phase, prev_arg)
                t_prev = t_next
        val = _overlap_sq_arrays(freq, chi, n_bar, [t_target])[0]
        out[i] = math.sqrt(abs(val)) * cmath.exp(0.5j * phase)
    return out


def _advance_phase(freq, chi, n_bar, t0, t1, val, phase, prev_arg, depth=0):
    turn = _wrap(np.angle(val) - prev_arg)
    if abs(turn) <= math.pi / 4:
        return phase + turn, prev_arg + turn
    t_mid = 0.5 * (t0 + t1)
    if not t0 < t_mid < t1:
        # no representable time in between: the minimal turn is all we can know
        return phase + turn, prev_arg + turn
    if depth >= MAX_PATH_REFINEMENTS:
        raise BranchTrackingError(
            f"phase of the overlap jumps by {turn:.3f} rad near tau = {t1:.6g} s")
    mid = _overlap_sq_arrays(freq, chi, n_bar, [t_mid])[0]
    phase, prev_arg = _advance_phase(freq, chi, n_bar, t0, t_mid, mid, phase, prev_arg,
                                     depth + 1)
    return _advance_phase(freq, chi, n_bar, t_mid, t1, val, phase, prev_arg, depth + 1)


def thermal_overlap(k: EchoKernel, f: Su11Factor, n_bar: float, freq: float,
                    tau: float) -> complex:
    """Thermal overlap amplitude ``Tr[U_down^dag U_up^dag U_down U_up rho]``.

    The branch of the square root is taken from a continuity path from
    ``tau = 0``; the squeezing rate is recovered from ``f.lam = i chi tau``.
    """
    if tau == 0.0:
        return 1.0 + 0.0j
    chi = f.lam.imag / tau
    value_sq = overlap_squared(k, f, n_bar, freq, tau)
    tracked = overlap_trace(freq, chi, n_bar, [0.0, tau])[1]
    root = cmath.sqrt(value_sq)
    return root if abs(root - tracked) <= abs(root + tracked) else -root


def thermal_occupation_transfer(n_gamma: float, freq_beta: float, freq_gamma: float) -> float:
    """Bose occupation of the beta mode at the temperature where gamma holds ``n_gamma``."""
    if not n_gamma >= 0:
        raise ValueError("n_gamma must be non-negative")
    if not (freq_beta > 0 and freq_gamma > 0):
        raise ValueError("frequencies must be positive")
    if n_gamma == 0.0:
        return 0.0
    if freq_beta == freq_gamma:
        return n_gamma
    # (1/n + 1)^r - 1 without cancellation for large n
    return 1.0 / math.expm1(freq_beta / freq_gamma * math.log1p(1.0 / n_gamma))


# ---------------------------------------------------------------------------
# protocol


def _combine(tau, gamma2, overlap_beta, overlap_gamma):
    contrast = 0.5 * math.exp(-2.0 * gamma2 * tau) * (overlap_beta * overlap_gamma).real
    contrast = min(0.5, max(-0.5, contrast))
    # the smaller probability is computed first so the pair sums to exactly 1
    small = 0.5 - abs(contrast)
    large = 1.0 - small
    if contrast >= 0:
        return large, small
    return small, large


def _check_beta(rates, include_beta):
    if include_beta and rates.branch is Branch.POSITIVE_DELTA and not rates.beta_stable:
        raise InstabilityError(
            f"beta mode unstable: tilde-omega_beta = {rates.freq_beta:.6g} <= "
            f"2 chi_beta = {2 * rates.chi_beta:.6g} rad/s")


def probability_trace(rates: DispersiveRates, thermal: ThermalSpec, deph: DephasingSpec,
                      taus, include_beta: bool = True) -> list[ProbabilityPoint]:
    """Protocol outcome probabilities along an ordered tau grid anchored at 0.

    For the negative-Delta branch the roles of the spin states are swapped;
    this conjugates the echo trace and leaves its real part, hence the
    probabilities, unchanged.
    """
    _check_beta(rates, include_beta)
    taus = np.asarray(taus, dtype=float)
    i_gamma = overlap_trace(rates.freq_gamma, rates.chi_gamma, thermal.n_gamma, taus)
    if include_beta:
        n_beta = thermal.beta_occupation(rates)
        i_beta = overlap_trace(rates.freq_beta, rates.chi_beta, n_beta, taus)
    else:
        i_beta = np.ones_like(i_gamma)
    points = []
    for t, ib, ig in zip(taus, i_beta, i_gamma):
        p_up, p_down = _combine(t, deph.gamma2, complex(ib), complex(ig))
        points.append(ProbabilityPoint(tau=float(t), p_up=p_up, p_down=p_down,
                                       overlap_beta=complex(ib), overlap_gamma=complex(ig)))
    return points


def protocol_probability(rates: DispersiveRates, thermal: ThermalSpec, deph: DephasingSpec,
                         tau: float, include_beta: bool = True) -> ProbabilityPoint:
    if not tau >= 0:
        raise ValueError("tau must be non-negative")
    taus = [0.0] if tau == 0.0 else [0.0, tau]
    return probability_trace(rates, thermal, deph, taus, include_beta)[-1]


def revival_time(rates: DispersiveRates) -> float:
    """Half period ``pi / freq_gamma`` of the gamma mode in the trapped branch."""
    return math.pi / rates.freq_gamma


def p_star(rates: DispersiveRates, thermal: ThermalSpec, deph: DephasingSpec,
           include_beta: bool = True) -> float:
    """Spin-up probability at the gamma revival time."""
    return protocol_probability(rates, thermal, deph, revival_time(rates), include_beta).p_up
