"""Brute-force echo traces in a truncated number basis.

Each mode is represented by ``h_up = freq n`` and
``h_down = freq n - chi/2 (a + a^dag)^2`` on the first ``dim`` Fock states.
The echo trace ``Tr[U_down^dag U_up^dag U_down U_up rho]`` of a thermal
state is evaluated directly and the truncation is doubled until the value
settles.

``h_down`` only couples ``n`` to ``n +- 2``, so it splits into two real
symmetric tridiagonal blocks (even and odd ``n``).  The oracle diagonalises
those blocks once per ``(freq, chi, dim)`` and reuses the spectra for every
``tau`` and occupation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh, eigh_tridiagonal

from .errors import ConvergenceError, TruncationError
from .su11_echo import (
    DephasingSpec,
    ProbabilityPoint,
    Su11Factor,
    ThermalSpec,
    _check_beta,
    _combine,
)
from .system_model import DispersiveRates

START_DIM = 32
MAX_DIM = 16384
TRUNCATION_LOSS = 1e-6
DEFAULT_TOL = 1e-6
NEGLIGIBLE_WEIGHT = 1e-15


@dataclass(frozen=True)
class ModeMatrices:
    dim: int
    h_up: np.ndarray
    h_down: np.ndarray
    lowering: np.ndarray


@dataclass
class ConvergenceRecord:
    dims_tried: list = field(default_factory=list)
    values: list = field(default_factory=list)
    converged: bool = False
    final_dim: int = 0


@dataclass(frozen=True)
class ThermalState:
    """Truncated Boltzmann weights; ``discarded`` is the weight lost to truncation."""

    weights: np.ndarray
    discarded: float

    @property
    def dim(self):
        return self.weights.size

    @property
    def matrix(self):
        return np.diag(self.weights)


def lowering_operator(dim: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1.0, dim)), 1)


def build_mode_matrices(freq: float, chi: float, dim: int) -> ModeMatrices:
    """Number-basis Hamiltonians of one mode in both spin branches (rad/s)."""
    if dim < 2:
        raise ValueError("dim must be at least 2")
    a = lowering_operator(dim)
    x = a + a.T
    h_up = np.diag(freq * np.arange(dim, dtype=float))
    h_down = h_up - 0.5 * chi * (x @ x)
    return ModeMatrices(dim=dim, h_up=h_up, h_down=h_down, lowering=a)


def propagator(h: np.ndarray, tau: float) -> np.ndarray:
    """``exp(-i h tau)`` from the spectral decomposition of Hermitian ``h``."""
    h = np.asarray(h)
    if np.count_nonzero(h - np.diag(np.diagonal(h))) == 0:
        return np.diag(np.exp(-1j * tau * np.diagonal(h)))
    w, v = eigh(h)
    return (v * np.exp(-1j * tau * w)) @ v.conj().T


def thermal_weights(n_bar: float, dim: int) -> tuple[np.ndarray, float]:
    if not n_bar >= 0:
        raise ValueError("n_bar must be non-negative")
    if n_bar == 0:
        w = np.zeros(dim)
        w[0] = 1.0
        return w, 0.0
    # (n/(n+1))^k computed through logs to stay accurate for large n
    log_q = -math.log1p(1.0 / n_bar)
    w = np.exp(log_q * np.arange(dim))
    discarded = math.exp(log_q * dim)
    return w / w.sum(), discarded


def minimal_dim(n_bar: float, loss: float = TRUNCATION_LOSS) -> int:
    """Smallest truncation whose discarded thermal weight is at most ``loss``."""
    if n_bar == 0:
        return 1
    return int(math.ceil(math.log(loss) / -math.log1p(1.0 / n_bar)))


def thermal_density(n_bar: float, dim: int) -> ThermalState:
    w, discarded = thermal_weights(n_bar, dim)
    if discarded > TRUNCATION_LOSS:
        raise TruncationError(
            f"dim={dim} discards thermal weight {discarded:.3g} at n_bar={n_bar:g}")
    return ThermalState(weights=w, discarded=discarded)


def echo_trace(m: ModeMatrices, rho, tau: float) -> complex:
    """``Tr[U_down^dag U_up^dag U_down U_up rho]`` with dense propagators."""
    if isinstance(rho, ThermalState):
        rho = rho.weights
    rho = np.asarray(rho)
    if rho.shape[0] != m.dim:
        raise ValueError(f"rho has dimension {rho.shape[0]}, matrices have {m.dim}")
    u_up = propagator(m.h_up, tau)
    u_down = propagator(m.h_down, tau)
    echo = u_down.conj().T @ u_up.conj().T @ u_down @ u_up
    if rho.ndim == 1:
        return complex(np.dot(np.diagonal(echo), rho))
    return complex(np.trace(echo @ rho))


class _ModeSpectrum:
    """Parity-block eigensystem of ``h_down`` for one truncation."""

    def __init__(self, freq, chi, dim):
        self.freq = freq
        self.dim = dim
        n = np.arange(dim, dtype=float)
        diag = freq * n - 0.5 * chi * (2.0 * n + 1.0)
        # the truncated (a + a^dag)^2 loses the a a^dag term on the last state
        diag[-1] = freq * (dim - 1) - 0.5 * chi * (dim - 1)
        off = -0.5 * chi * np.sqrt((n[:-2] + 1.0) * (n[:-2] + 2.0))
        self.blocks = []
        for p in (0, 1):
            idx = np.arange(p, dim, 2)
            if idx.size == 0:
                continue
            d = diag[idx]
            e = off[idx[:-1]]
            if idx.size == 1:
                w, v = d.copy(), np.ones((1, 1))
            else:
                w, v = eigh_tridiagonal(d, e)
            self.blocks.append((idx, w, v))

        self._memo = {}

    def echo_diagonal(self, tau, count):
        """``<n|U_down^dag U_up^dag U_down U_up|n>`` for ``n < count``."""
        hit = self._memo.get(tau)
        if hit is not None and hit.size >= count:
            return hit[:count]
        out = np.empty(count, dtype=complex)
        n_all = np.arange(self.dim, dtype=float)
        for idx, w, v in self.blocks:
            k = min(int(np.searchsorted(idx, count)), idx.size)
            if k == 0:
                continue
            # columns of U_down for the populated states, kept in real
            # arithmetic because the eigenvectors are real
            vk = v[:k].T
            phase = tau * w
            re = v @ (np.cos(phase)[:, None] * vk)
            im = v @ (np.sin(phase)[:, None] * vk)
            weight = re * re + im * im
            rot = np.exp(1j * self.freq * tau * n_all[idx])
            out[idx[:k]] = np.exp(-1j * self.freq * tau * n_all[idx[:k]]) * (rot @ weight)
        self._memo[tau] = out
        return out


def _spectrum(cache, freq, chi, dim):
    if cache is None:
        return _ModeSpectrum(freq, chi, dim)
    key = (float(freq), float(chi), int(dim))
    spec = cache.get(key)
    if spec is None:
        spec = cache[key] = _ModeSpectrum(freq, chi, dim)
    return spec


def _mode_trace(freq, chi, n_bar, tau, dim, cache):
    w, _ = thermal_weights(n_bar, dim)
    # |<n|echo|n>| <= 1, so states beyond this weight cannot move the trace
    count = min(dim, minimal_dim(n_bar, NEGLIGIBLE_WEIGHT))
    diag = _spectrum(cache, freq, chi, dim).echo_diagonal(tau, count)
    return complex(np.dot(diag, w[:count]))


def _start_dim(n_bar, start_dim):
    need = minimal_dim(n_bar)
    dim = start_dim
    while dim < need:
        dim *= 2
    return dim


def converged_trace(freq, chi, n_bar, tau, tol=DEFAULT_TOL, start_dim=START_DIM,
                    max_dim=MAX_DIM, cache=None):
    """Echo trace of one thermal mode at ``tau``, refined by doubling ``dim``."""
    record = ConvergenceRecord()
    dim = _start_dim(n_bar, start_dim)
    if dim > max_dim:
        raise ConvergenceError(
            f"thermal state needs dim {dim} above the cap {max_dim}", record=record)
    while dim <= max_dim:
        record.dims_tried.append(dim)
        record.values.append(_mode_trace(freq, chi, n_bar, tau, dim, cache))
        record.final_dim = dim
        if tau == 0.0 or (len(record.values) > 1
                          and abs(record.values[-1] - record.values[-2]) < tol):
            record.converged = True
            return record.values[-1], record
        dim *= 2
    change = (f"last change {abs(record.values[-1] - record.values[-2]):.3g}"
              if len(record.values) > 1 else "no second truncation fits under the cap")
    raise ConvergenceError(
        f"echo trace not converged at tau={tau:.6g} s up to dim {max_dim} ({change})",
        record=record)


def _merge(records):
    # report the mode that needed the largest truncation
    worst = max(records, key=lambda r: r.final_dim)
    return ConvergenceRecord(dims_tried=list(worst.dims_tried), values=list(worst.values),
                             converged=all(r.converged for r in records),
                             final_dim=worst.final_dim)


def _modes(rates, thermal, include_beta):
    modes = [(rates.freq_gamma, rates.chi_gamma, thermal.n_gamma)]
    if include_beta:
        modes.append((rates.freq_beta, rates.chi_beta, thermal.beta_occupation(rates)))
    return modes


def oracle_trace(rates: DispersiveRates, thermal: ThermalSpec, deph: DephasingSpec,
                 taus, include_beta: bool = True, tol: float = DEFAULT_TOL,
                 start_dim: int = START_DIM, max_dim: int = MAX_DIM, cache=None):
    """Oracle probabilities on a tau grid; spectra are shared across points.

    Each mode is converged separately and the traces are multiplied.  The
    returned records describe, per point, the mode that needed the largest
    truncation.  ``cache`` may be shared between calls with the same rates.
    """
    _check_beta(rates, include_beta)
    modes = _modes(rates, thermal, include_beta)
    cache = {} if cache is None else cache
    points, records = [], []
    for t in np.asarray(taus, dtype=float):
        traces, recs = [], []
        for freq, chi, n_bar in modes:
            val, rec = converged_trace(freq, chi, n_bar, float(t), tol, start_dim,
                                       max_dim, cache)
            traces.append(val)
            recs.append(rec)
        rec = _merge(recs)
        i_gamma = traces[0]
        i_beta = traces[1] if include_beta else 1.0 + 0.0j
        p_up, p_down = _combine(float(t), deph.gamma2, i_beta, i_gamma)
        points.append(ProbabilityPoint(tau=float(t), p_up=p_up, p_down=p_down,
                                       overlap_beta=i_beta, overlap_gamma=i_gamma))
        records.append(rec)
    return points, records


def oracle_probability(rates: DispersiveRates, thermal: ThermalSpec, deph: DephasingSpec,
                       tau: float, include_beta: bool = True, tol: float = DEFAULT_TOL,
                       max_dim: int = MAX_DIM):
    if not tau >= 0:
        raise ValueError("tau must be non-negative")
    points, records = oracle_trace(rates, thermal, deph, [tau], include_beta, tol,
                                   max_dim=max_dim)
    return points[0], records[0]


def _nilpotent_exp(m):
    # strictly triangular, so the series ends after at most dim terms
    out = np.eye(m.shape[0], dtype=complex)
    term = out.copy()
    for k in range(1, m.shape[0] + 1):
        term = term @ m / k
        if not term.any():
            return out
        out += term
    return out


def _unwrapped_log_eta0(freq, chi, tau, steps=2048):
    from .su11_echo import _factor_arrays

    ts = np.linspace(0.0, tau, steps + 1)
    eta0 = _factor_arrays(freq, chi, ts)[1]
    return math.log(abs(eta0[-1])) + 1j * np.unwrap(np.angle(eta0))[-1]


def verify_factorization(f: Su11Factor, freq: float, chi: float, tau: float,
                         dim: int) -> float:
    """Max deviation between the normal-ordered and spectral forms of ``U_down``.

    Both sides are compared on the lowest ``dim/2`` block, away from the
    truncation edge.  The normal-ordered product is taken relative to the
    ``-i freq tau / 2`` zero-point phase that ``h_down`` carries.
    """
    m = build_mode_matrices(freq, chi, dim)
    h = dim // 2
    # a^dag^2 is lower triangular and a^2 upper triangular, so the top-left
    # block of the normal-ordered product only involves the top-left blocks
    # of its factors; the series is then exact on that block
    a = lowering_operator(h)
    log_eta0 = _unwrapped_log_eta0(freq, chi, tau) if tau > 0 else 0.0
    k0 = 0.5 * np.arange(h) + 0.25
    left = _nilpotent_exp(0.5 * f.eta * (a.T @ a.T))
    right = _nilpotent_exp(0.5 * f.eta * (a @ a))
    normal = np.exp(0.5j * freq * tau) * (left * np.exp(log_eta0 * k0)) @ right
    exact = propagator(m.h_down, tau)
    return float(np.abs(normal[:h, :h] - exact[:h, :h]).max())
