"""Two-boundary drift-diffusion first-passage density, choice probabilities,
and a validated trajectory sampler.

The joint density of (decision time, boundary) for a Wiener process with
drift ``v``, diffusion 1, boundaries at 0 and ``a``, and relative start
``w`` is evaluated through the classic pair of series expansions of the
standardized lower-boundary density:

    small time:  phi(u, w) = (2*pi*u^3)^(-1/2) * sum_k (w+2k) exp(-(w+2k)^2 / (2u))
    large time:  phi(u, w) = pi * sum_{k>=1} k exp(-k^2 pi^2 u / 2) sin(k pi w)

with ``u = (t - ndt) / a**2``.  The expansion needing fewer terms for a
requested truncation error is selected per evaluation.  Everything is
computed in the log domain; upper-boundary densities use the exact
reflection ``f_upper(t; a, w, v) = f_lower(t; a, 1-w, -v)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InvalidParameterError

__all__ = [
    "DdmStateParams",
    "HorizonResampleWarning",
    "wfpt_log_density",
    "wfpt_log_density_arrays",
    "choice_probability",
    "sample_ddm",
    "sample_ddm_many",
]

DEFAULT_TRUNCATION_EPS = 1e-10
DEFAULT_SAMPLER_DT = 1e-4
DEFAULT_MAX_HORIZON = 30.0

_LOG_2PI = math.log(2.0 * math.pi)


class HorizonResampleWarning(UserWarning):
    """A simulated path ran past the time horizon and was redrawn."""


@dataclass(frozen=True)
class DdmStateParams:
    """Diffusion parameters for one latent-state configuration.

    Attributes
    ----------
    boundary : float
        Separation between the absorbing boundaries (> 0).
    start_frac : float
        Relative starting point in (0, 1); the process starts at
        ``start_frac * boundary``.
    drift : float
        Mean evidence accumulation rate (any real).
    nondecision : float
        Additive non-decision time in seconds (> 0).

    The diffusion coefficient is fixed at 1.
    """

    boundary: float
    start_frac: float
    drift: float
    nondecision: float

    def __post_init__(self):
        for name in ("boundary", "start_frac", "drift", "nondecision"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidParameterError(f"{name} must be finite, got {getattr(self, name)!r}")
        if self.boundary <= 0.0:
            raise InvalidParameterError(f"boundary must be > 0, got {self.boundary}")
        if not 0.0 < self.start_frac < 1.0:
            raise InvalidParameterError(f"start_frac must be in (0, 1), got {self.start_frac}")
        if self.nondecision <= 0.0:
            raise InvalidParameterError(f"nondecision must be > 0, got {self.nondecision}")


@njit(cache=True, nogil=True)
def _log_density_lower(t_dec, a, w, v, eps):
    """Log density of absorption at the lower boundary after decision time
    ``t_dec`` (non-decision time already removed).  Scalar kernel."""
    if not t_dec > 0.0:
        return -np.inf
    u = t_dec / (a * a)

    # Terms needed by each expansion for truncation error eps.
    if 2.0 * np.sqrt(2.0 * np.pi * u) * eps < 1.0:
        ks = 2.0 + np.sqrt(-2.0 * u * np.log(2.0 * eps * np.sqrt(2.0 * np.pi * u)))
        if ks < np.sqrt(u) + 1.0:
            ks = np.sqrt(u) + 1.0
    else:
        ks = 2.0
    if np.pi * u * eps < 1.0:
        kl = np.sqrt(-2.0 * np.log(np.pi * u * eps) / (np.pi * np.pi * u))
        if kl < 1.0 / (np.pi * np.sqrt(u)):
            kl = 1.0 / (np.pi * np.sqrt(u))
    else:
        kl = 1.0 / (np.pi * np.sqrt(u))

    base = -v * a * w - v * v * t_dec / 2.0 - 2.0 * np.log(a)

    if ks < kl:
        # Small-time expansion; the k = 0 exponent is factored out so the
        # residual sum stays O(1) even as u -> 0.
        n_terms = int(np.ceil(ks))
        lo = -((n_terms - 1) // 2)
        hi = (n_terms - 1) - (n_terms - 1) // 2
        acc = 0.0
        for k in range(lo, hi + 1):
            wk = w + 2.0 * k
            acc += wk * np.exp(-(wk * wk - w * w) / (2.0 * u))
        if acc <= 0.0:
            return -np.inf
        return base - 0.5 * _LOG_2PI - 1.5 * np.log(u) - w * w / (2.0 * u) + np.log(acc)

    # Large-time expansion; the k = 1 exponent is factored out.
    n_terms = int(np.ceil(kl))
    half_pi2_u = np.pi * np.pi * u / 2.0
    acc = 0.0
    for k in range(1, n_terms + 1):
        acc += k * np.exp(-(k * k - 1.0) * half_pi2_u) * np.sin(k * np.pi * w)
    if acc <= 0.0:
        return -np.inf
    return base + np.log(np.pi) - half_pi2_u + np.log(acc)


@njit(cache=True, nogil=True)
def _log_density_choice(t_dec, choice, a, w, v, eps):
    if choice == 1:
        return _log_density_lower(t_dec, a, 1.0 - w, -v, eps)
    return _log_density_lower(t_dec, a, w, v, eps)


@njit(cache=True, nogil=True)
def _log_density_many(t_dec, choice, a, w, v, eps, out):
    for i in range(t_dec.shape[0]):
        out[i] = _log_density_choice(t_dec[i], choice[i], a[i], w[i], v[i], eps)


def wfpt_log_density(t, choice, p: DdmStateParams, eps: float = DEFAULT_TRUNCATION_EPS):
    """Log of the joint first-passage density of (``t``, ``choice``).

    Parameters
    ----------
    t : float
        Total response time in seconds (including non-decision time).
    choice : int
        1 for absorption at the upper boundary, 0 for the lower one.
    p : DdmStateParams
        Diffusion parameters.
    eps : float
        Series truncation error budget.

    Returns
    -------
    float
        Log density; ``-inf`` whenever ``t <= p.nondecision``.
    """
    if not math.isfinite(t):
        raise InvalidParameterError(f"t must be finite, got {t!r}")
    if choice not in (0, 1):
        raise InvalidParameterError(f"choice must be 0 or 1, got {choice!r}")
    return float(
        _log_density_choice(t - p.nondecision, choice, p.boundary, p.start_frac, p.drift, eps)
    )


def wfpt_log_density_arrays(t_dec, choice, boundary, start_frac, drift,
                            eps: float = DEFAULT_TRUNCATION_EPS):
    """Vectorized log density over pre-broadcast flat arrays.

    ``t_dec`` is decision time (non-decision time already subtracted).
    All five arrays must share one shape.
    """
    t_dec = np.ascontiguousarray(t_dec, dtype=np.float64)
    out = np.empty(t_dec.shape[0])
    _log_density_many(
        t_dec,
        np.ascontiguousarray(choice, dtype=np.int8),
        np.ascontiguousarray(boundary, dtype=np.float64),
        np.ascontiguousarray(start_frac, dtype=np.float64),
        np.ascontiguousarray(drift, dtype=np.float64),
        eps,
        out,
    )
    return out


def choice_probability(p: DdmStateParams) -> float:
    """Probability of absorption at the upper boundary.

    Uses ``(1 - exp(-2 v w a)) / (1 - exp(-2 v a))`` for ``v != 0`` and the
    limit ``w`` at ``v = 0``, arranged through ``expm1`` so that neither
    small nor large drifts lose precision.
    """
    a, w, v = p.boundary, p.start_frac, p.drift
    if v == 0.0:
        return w
    if v > 0.0:
        return math.expm1(-2.0 * v * w * a) / math.expm1(-2.0 * v * a)
    # Negative drift: rewrite with non-positive exponents only.
    return 1.0 - math.expm1(2.0 * v * (1.0 - w) * a) / math.expm1(2.0 * v * a)


@njit(cache=True)
def _simulate_path(gen, x0, a, v, dt, sqrt_dt, max_steps):
    """Euler-Maruyama path until absorption; returns (choice, steps) with
    choice = -1 when the horizon was exceeded."""
    x = x0
    for step in range(1, max_steps + 1):
        x += v * dt + sqrt_dt * gen.standard_normal()
        if x >= a:
            return 1, step
        if x <= 0.0:
            return 0, step
    return -1, max_steps


@njit(cache=True)
def _simulate_many(gen, n, x0, a, v, dt, sqrt_dt, max_steps, max_resamples):
    choices = np.empty(n, dtype=np.int8)
    steps = np.empty(n, dtype=np.int64)
    resamples = 0
    for i in range(n):
        choice, nstep = _simulate_path(gen, x0, a, v, dt, sqrt_dt, max_steps)
        while choice < 0 and resamples < max_resamples:
            resamples += 1
            choice, nstep = _simulate_path(gen, x0, a, v, dt, sqrt_dt, max_steps)
        choices[i] = choice
        steps[i] = nstep
    return choices, steps, resamples


def sample_ddm(p: DdmStateParams, rng: np.random.Generator,
               dt: float = DEFAULT_SAMPLER_DT,
               max_horizon: float = DEFAULT_MAX_HORIZON):
    """Draw one (choice, response time) pair by simulating the diffusion.

    The returned time includes the non-decision offset.  A path that fails
    to hit a boundary within ``max_horizon`` seconds is redrawn, with a
    :class:`HorizonResampleWarning` per redraw.
    """
    choices, ts, n_resampled = sample_ddm_many(p, 1, rng, dt=dt, max_horizon=max_horizon)
    return int(choices[0]), float(ts[0])


def sample_ddm_many(p: DdmStateParams, n: int, rng: np.random.Generator,
                    dt: float = DEFAULT_SAMPLER_DT,
                    max_horizon: float = DEFAULT_MAX_HORIZON):
    """Draw ``n`` (choice, rt) pairs from one stream; see :func:`sample_ddm`."""
    max_steps = int(round(max_horizon / dt))
    choices, steps, resamples = _simulate_many(
        rng,
        n,
        p.start_frac * p.boundary,
        p.boundary,
        p.drift,
        dt,
        math.sqrt(dt),
        max_steps,
        1000,
    )
    if resamples:
        warnings.warn(
            f"{resamples} diffusion path(s) exceeded the {max_horizon:g} s horizon "
            "and were resampled",
            HorizonResampleWarning,
            stacklevel=2,
        )
    if np.any(choices < 0):
        raise InvalidParameterError(
            "diffusion path failed to reach a boundary after 1000 horizon resamples"
        )
    return choices.astype(np.int64), p.nondecision + steps * dt, resamples
