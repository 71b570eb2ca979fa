"""Compiled kernels for the estimation hot paths.

All kernels run single-threaded with fixed accumulation order so results are
bitwise reproducible regardless of worker configuration.  Inside the
optimizer, emission log densities are floored at -745 (the smallest double
exponent) instead of -inf so line searches always see finite objectives; the
floor only binds where the density has already underflowed to zero.  A
decision time <= 0 still yields -inf in the per-trial emission matrix so
impossible data surfaces during the E-step.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .wiener import _log_density_choice

LOG_FLOOR = -745.0


@njit(cache=True, nogil=True)
def emission_matrix(rt, choice, drifts, a0, a1, b0, b1, subj_index, tau, eps, out):
    """Per-trial log emission under each latent state.

    rt/choice/drifts are flat over all subjects' trials; a0..b1 give each
    subject's state-wise boundary and start values at the factor point
    estimate.  out has shape (n_trials, 2).
    """
    for j in range(rt.shape[0]):
        i = subj_index[j]
        t_dec = rt[j] - tau
        if t_dec <= 0.0:
            out[j, 0] = -np.inf
            out[j, 1] = -np.inf
            continue
        v0 = _log_density_choice(t_dec, choice[j], a0[i], b0[i], drifts[j, 0], eps)
        v1 = _log_density_choice(t_dec, choice[j], a1[i], b1[i], drifts[j, 1], eps)
        out[j, 0] = v0 if v0 > LOG_FLOOR else LOG_FLOOR
        out[j, 1] = v1 if v1 > LOG_FLOOR else LOG_FLOOR


@njit(cache=True, nogil=True)
def weighted_cell_sums(rt, choice, subj_start, subj_end, drifts, zeta,
                       a0, a1, b0, b1, tau, eps, l_only, out):
    """Posterior-weighted emission sums per (subject, state, node) cell.

    a0..b1 have shape (N, R): one boundary/start value per subject and
    quadrature node.  out has shape (N, 2, R) and receives
    ``sum_j zeta[j, l] * log f(trial_j | cell)``.  ``l_only`` restricts the
    computation to one latent state (-1 = both), used by partial finite
    differences where the other state's contribution cancels.
    """
    n_subj, n_nodes = a0.shape
    for i in range(n_subj):
        lo = subj_start[i]
        hi = subj_end[i]
        for r in range(n_nodes):
            aa0 = a0[i, r]
            aa1 = a1[i, r]
            bb0 = b0[i, r]
            bb1 = b1[i, r]
            s0 = 0.0
            s1 = 0.0
            for j in range(lo, hi):
                t_dec = rt[j] - tau
                c = choice[j]
                if l_only != 1:
                    z = zeta[j, 0]
                    if z != 0.0:
                        lf = _log_density_choice(t_dec, c, aa0, bb0, drifts[j, 0], eps)
                        if lf < LOG_FLOOR:
                            lf = LOG_FLOOR
                        s0 += z * lf
                if l_only != 0:
                    z = zeta[j, 1]
                    if z != 0.0:
                        lf = _log_density_choice(t_dec, c, aa1, bb1, drifts[j, 1], eps)
                        if lf < LOG_FLOOR:
                            lf = LOG_FLOOR
                        s1 += z * lf
            out[i, 0, r] = s0
            out[i, 1, r] = s1


@njit(cache=True, nogil=True)
def subject_neg_expected_ll(m, s, nodes, weights, mu, psi, xg, rt, choice,
                            drifts, zeta, tau, eps, lapsed_half):
    """Negated quadrature expectation of one subject's weighted emission sum
    for a single task, with the link maps applied inline.

    nodes: (R, d_f); mu/xg: (3,); psi: (d_f, 3, ).  ``lapsed_half`` selects
    the lapsed-state start rule (True pins it at 1/2).
    """
    n_nodes = nodes.shape[0]
    d_f = nodes.shape[1]
    n_trials = rt.shape[0]
    total = 0.0
    for r in range(n_nodes):
        e0 = mu[0] + xg[0]
        e1 = mu[1] + xg[1]
        e2 = mu[2] + xg[2]
        for d in range(d_f):
            f_d = m[d] + s[d] * nodes[r, d]
            e0 += psi[d, 0] * f_d
            e1 += psi[d, 1] * f_d
            e2 += psi[d, 2] * f_d
        a0 = np.exp(e0)
        a1 = np.exp(e1)
        if e2 >= 0.0:
            b1 = 1.0 / (1.0 + np.exp(-e2))
        else:
            t = np.exp(e2)
            b1 = t / (1.0 + t)
        b0 = 0.5 if lapsed_half else b1
        acc = 0.0
        for j in range(n_trials):
            t_dec = rt[j] - tau
            c = choice[j]
            z = zeta[j, 0]
            if z != 0.0:
                lf = _log_density_choice(t_dec, c, a0, b0, drifts[j, 0], eps)
                if lf < LOG_FLOOR:
                    lf = LOG_FLOOR
                acc += z * lf
            z = zeta[j, 1]
            if z != 0.0:
                lf = _log_density_choice(t_dec, c, a1, b1, drifts[j, 1], eps)
                if lf < LOG_FLOOR:
                    lf = LOG_FLOOR
                acc += z * lf
        total += weights[r] * acc
    return -total


@njit(cache=True, nogil=True)
def q_gaps_batch(stimulus, action, reward, subj_start, subj_end, b, q_init, out):
    """Q-value gaps for all subjects' reward-task sequences at learning rate b."""
    for i in range(subj_start.shape[0]):
        q00 = q_init[0, 0]
        q01 = q_init[0, 1]
        q10 = q_init[1, 0]
        q11 = q_init[1, 1]
        for j in range(subj_start[i], subj_end[i]):
            s = stimulus[j]
            if s == 0:
                out[j] = q10 - q00
            else:
                out[j] = q11 - q01
            a = action[j]
            r = reward[j]
            if a == 0:
                if s == 0:
                    q00 += b * (r - q00)
                else:
                    q01 += b * (r - q01)
            else:
                if s == 0:
                    q10 += b * (r - q10)
                else:
                    q11 += b * (r - q11)
