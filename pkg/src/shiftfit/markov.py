"""Two-state covariate-dependent hidden Markov machinery: transition model,
log-space forward-backward recursions, and an exact path-enumeration oracle
used to validate them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DegenerateLikelihoodError, InvalidParameterError

__all__ = [
    "HmmParams",
    "PosteriorWeights",
    "transition_matrix",
    "log_transition_matrix",
    "forward_backward",
    "brute_force_posterior",
]

MAX_BRUTE_FORCE_TRIALS = 16


@dataclass(frozen=True)
class HmmParams:
    """Initial engaged probability and per-origin-state logistic coefficients.

    ``coefs[l] = (intercept, slope_1, ..., slope_p)`` parameterizes
    ``logit P(next = 1 | current = l)`` as a function of the covariates.
    """

    init_prob_engaged: float
    coefs: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.init_prob_engaged < 1.0:
            raise InvalidParameterError(
                f"init_prob_engaged must be in (0, 1), got {self.init_prob_engaged}"
            )
        coefs = np.asarray(self.coefs, dtype=np.float64)
        if coefs.ndim != 2 or coefs.shape[0] != 2:
            raise InvalidParameterError(f"coefs must have shape (2, 1 + p), got {coefs.shape}")
        if not np.all(np.isfinite(coefs)):
            raise InvalidParameterError("transition coefficients must be finite")
        object.__setattr__(self, "coefs", coefs)

    @property
    def n_covariates(self) -> int:
        return self.coefs.shape[1] - 1


@dataclass
class PosteriorWeights:
    """Marginal (zeta) and pairwise (xi) latent-state posteriors.

    zeta has shape (J, 2); xi has shape (J - 1, 2, 2) with
    ``xi[j, l, m] = P(U_j = l, U_{j+1} = m | data)``.
    """

    zeta: np.ndarray
    xi: np.ndarray
    log_marginal: float


def _predictors(h: HmmParams, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise InvalidParameterError("covariates must be finite")
    if x.shape[0] != h.n_covariates:
        raise InvalidParameterError(
            f"expected {h.n_covariates} covariates, got {x.shape[0]}"
        )
    return h.coefs[:, 0] + h.coefs[:, 1:] @ x


def transition_matrix(h: HmmParams, x) -> np.ndarray:
    """Row-stochastic 2x2 matrix; row l gives P(next state | current = l)."""
    eta = _predictors(h, x)
    p_to_engaged = np.where(eta >= 0, 1.0 / (1.0 + np.exp(-np.abs(eta))),
                            np.exp(-np.abs(eta)) / (1.0 + np.exp(-np.abs(eta))))
    out = np.empty((2, 2))
    out[:, 1] = p_to_engaged
    out[:, 0] = 1.0 - p_to_engaged
    return out


def log_transition_matrix(h: HmmParams, x) -> np.ndarray:
    """Elementwise log of :func:`transition_matrix`, stable for large predictors."""
    eta = _predictors(h, x)
    # log sigmoid(eta) and log sigmoid(-eta) without overflow.
    log_p1 = -np.logaddexp(0.0, -eta)
    log_p0 = -np.logaddexp(0.0, eta)
    return np.column_stack([log_p0, log_p1])


@njit(cache=True, nogil=True)
def _lse2(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    hi = a if a > b else b
    return hi + np.log(np.exp(a - hi) + np.exp(b - hi))


@njit(cache=True, nogil=True)
def _forward_backward_kernel(log_em, log_pi, log_c, zeta, xi):
    J = log_em.shape[0]
    la = np.empty((J, 2))
    lb = np.empty((J, 2))
    for l in range(2):
        la[0, l] = log_pi[l] + log_em[0, l]
        lb[J - 1, l] = 0.0
    for j in range(1, J):
        for l in range(2):
            la[j, l] = log_em[j, l] + _lse2(
                la[j - 1, 0] + log_c[0, l], la[j - 1, 1] + log_c[1, l]
            )
    for j in range(J - 2, -1, -1):
        for l in range(2):
            lb[j, l] = _lse2(
                lb[j + 1, 0] + log_em[j + 1, 0] + log_c[l, 0],
                lb[j + 1, 1] + log_em[j + 1, 1] + log_c[l, 1],
            )
    log_z = _lse2(la[J - 1, 0], la[J - 1, 1])
    if log_z == -np.inf or np.isnan(log_z):
        return log_z
    for j in range(J):
        for l in range(2):
            zeta[j, l] = np.exp(la[j, l] + lb[j, l] - log_z)
        tot = zeta[j, 0] + zeta[j, 1]
        zeta[j, 0] /= tot
        zeta[j, 1] /= tot
    for j in range(J - 1):
        tot = 0.0
        for l in range(2):
            for m in range(2):
                xi[j, l, m] = np.exp(
                    la[j, l] + log_c[l, m] + log_em[j + 1, m] + lb[j + 1, m] - log_z
                )
                tot += xi[j, l, m]
        for l in range(2):
            for m in range(2):
                xi[j, l, m] /= tot
    return log_z


def _check_emissions(log_emissions: np.ndarray) -> np.ndarray:
    log_em = np.asarray(log_emissions, dtype=np.float64)
    if log_em.ndim != 2 or log_em.shape[1] != 2 or log_em.shape[0] < 1:
        raise InvalidParameterError(f"log emissions must have shape (J, 2), got {log_em.shape}")
    if np.any(np.isnan(log_em)) or np.any(log_em == np.inf):
        raise InvalidParameterError("log emissions must be finite or -inf")
    dead = np.where(np.all(np.isneginf(log_em), axis=1))[0]
    if dead.size:
        raise DegenerateLikelihoodError(
            f"trial {dead[0]} has zero likelihood under both latent states",
            trial=int(dead[0]),
        )
    return log_em


def forward_backward(log_emissions, h: HmmParams, x) -> PosteriorWeights:
    """Exact smoothing posteriors for the two-state chain, in log space.

    Returns marginals zeta, pairwise xi, and the log marginal likelihood of
    the emission sequence.
    """
    log_em = _check_emissions(log_emissions)
    J = log_em.shape[0]
    log_pi = np.log(np.array([1.0 - h.init_prob_engaged, h.init_prob_engaged]))
    log_c = log_transition_matrix(h, x)
    zeta = np.zeros((J, 2))
    xi = np.zeros((max(J - 1, 0), 2, 2))
    log_z = _forward_backward_kernel(log_em, log_pi, log_c, zeta, xi)
    if math.isinf(log_z) or math.isnan(log_z):
        raise DegenerateLikelihoodError("emission sequence has zero total likelihood")
    return PosteriorWeights(zeta=zeta, xi=xi, log_marginal=float(log_z))


def brute_force_posterior(log_emissions, h: HmmParams, x) -> PosteriorWeights:
    """Posteriors by explicit summation over all 2**J state paths.

    Test oracle only; refuses J > 16.
    """
    from scipy.special import logsumexp

    log_em = _check_emissions(log_emissions)
    J = log_em.shape[0]
    if J > MAX_BRUTE_FORCE_TRIALS:
        raise InvalidParameterError(
            f"brute-force enumeration limited to J <= {MAX_BRUTE_FORCE_TRIALS}, got {J}"
        )
    log_pi = np.log(np.array([1.0 - h.init_prob_engaged, h.init_prob_engaged]))
    log_c = log_transition_matrix(h, x)

    paths = np.arange(2 ** J)
    bits = (paths[:, None] >> np.arange(J)[None, :]) & 1  # (2^J, J)
    logp = log_pi[bits[:, 0]] + log_em[np.arange(J)[None, :], bits].sum(axis=1)
    if J > 1:
        logp = logp + log_c[bits[:, :-1], bits[:, 1:]].sum(axis=1)

    log_z = float(logsumexp(logp))
    if math.isinf(log_z) or math.isnan(log_z):
        raise DegenerateLikelihoodError("emission sequence has zero total likelihood")
    zeta = np.empty((J, 2))
    for j in range(J):
        for l in range(2):
            sel = logp[bits[:, j] == l]
            zeta[j, l] = np.exp(logsumexp(sel) - log_z) if sel.size else 0.0
    xi = np.empty((max(J - 1, 0), 2, 2))
    for j in range(J - 1):
        for l in range(2):
            for m in range(2):
                sel = logp[(bits[:, j] == l) & (bits[:, j + 1] == m)]
                xi[j, l, m] = np.exp(logsumexp(sel) - log_z) if sel.size else 0.0
    return PosteriorWeights(zeta=zeta, xi=xi, log_marginal=log_z)
