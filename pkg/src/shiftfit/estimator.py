"""Alternating expectation and coordinate-ascent updates for the joint
multi-task model, with multiple restarts, and the single-task baseline as
the no-factor special case fit per task.

One iteration runs, in order: posteriors for the latent strategy chains at
the current factor point estimates; the initial-state and transition
updates; the per-subject variational mean and SD solves; and the global
emission-parameter solve per task.  The surrogate objective (expected
complete-data log likelihood plus the Gaussian penalty terms) is tracked
per iteration and drives convergence.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import _compute
from .data import Dataset
from .errors import (
    DegenerateLikelihoodError,
    FitError,
    InvalidParameterError,
    OptimizerError,
)
from .factor import FactorModel, sigmoid
from .markov import HmmParams, PosteriorWeights, forward_backward, log_transition_matrix
from .quadrature import gauss_hermite
from .tasks import SHARED_LINKS, get_task

__all__ = [
    "FitConfig",
    "TaskParams",
    "ModelParams",
    "VariationalState",
    "Posteriors",
    "FitResult",
    "prepare_dataset",
    "e_step",
    "m_step_initial",
    "m_step_hmm",
    "fit_weighted_logistic",
    "update_variational",
    "optimize_gaussian_variational",
    "m_step_ddm",
    "elbo",
    "fit_shift",
    "fit_split",
]

PI_CLIP = 1e-6
GAMMA_BOUND = 15.0
#: Non-decision time stays this factor below the fastest observed response.
TAU_MAX_FACTOR = 0.999
FD_STEP = 1e-6
SUBJECT_SOLVE_MAXITER = 50
DDM_SOLVE_MAXITER = 200


# --------------------------------------------------------------------------
# configuration and containers
# --------------------------------------------------------------------------

@dataclass
class FitConfig:
    """Estimation settings; defaults match the shipped simulation study."""

    d_f: int = 2
    quad_points: int = 5
    tol: float = 1e-5
    max_iter: int = 200
    restarts: int = 10
    seed: int = 0
    workers: int = 1
    estimate_loadings: bool = True
    covariate_effects: bool = False
    split_warm_start: bool = True
    elbo_slack: float = 1e-3
    init_jitter: float = 0.1
    density_eps: float = 1e-10
    trace_sink: object = None

    def __post_init__(self):
        if self.d_f < 0:
            raise InvalidParameterError(f"d_f must be >= 0, got {self.d_f}")
        if self.quad_points < 1:
            raise InvalidParameterError("quad_points must be >= 1")
        if self.max_iter < 1 or self.restarts < 1 or self.workers < 1:
            raise InvalidParameterError("max_iter, restarts, workers must be >= 1")
        if not 0.0 < self.tol < 1.0:
            raise InvalidParameterError("tol must be in (0, 1)")


@dataclass
class TaskParams:
    """Per-task parameter block: link-scale shared triple plus scalars and HMM."""

    task_id: str
    mu: np.ndarray              # (3,)
    psi: np.ndarray             # (d_f, 3)
    gamma: np.ndarray           # (p, 3)
    scalars: object
    hmm: HmmParams

    def copy(self) -> "TaskParams":
        return TaskParams(self.task_id, self.mu.copy(), self.psi.copy(),
                          self.gamma.copy(), self.scalars, self.hmm)


@dataclass
class ModelParams:
    tasks: dict
    d_f: int

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tasks.items()}, self.d_f)

    def factor_model(self) -> FactorModel:
        ids = list(self.tasks)
        return FactorModel(
            intercepts=[self.tasks[t].mu.copy() for t in ids],
            covar_loads=[self.tasks[t].gamma.copy() for t in ids],
            factor_loads=[self.tasks[t].psi.copy() for t in ids],
            masks=[np.ones(3, dtype=bool) for _ in ids],
            links=[SHARED_LINKS for _ in ids],
            task_ids=ids,
        )


@dataclass
class VariationalState:
    """Per-subject Gaussian variational parameters (diagonal covariance)."""

    mean: np.ndarray   # (N, d_f)
    sd: np.ndarray     # (N, d_f)

    def copy(self) -> "VariationalState":
        return VariationalState(self.mean.copy(), self.sd.copy())


@dataclass
class Posteriors:
    """Flat per-task posterior arrays with per-subject views."""

    zeta: dict
    xi: dict
    log_marginals: dict
    _subj_start: dict = field(default_factory=dict, repr=False)
    _subj_end: dict = field(default_factory=dict, repr=False)

    def get(self, task_id: str, subject: int) -> PosteriorWeights:
        lo = self._subj_start[task_id][subject]
        hi = self._subj_end[task_id][subject]
        xlo = lo - subject
        xhi = hi - subject - 1
        return PosteriorWeights(
            zeta=self.zeta[task_id][lo:hi],
            xi=self.xi[task_id][xlo:xhi],
            log_marginal=float(self.log_marginals[task_id][subject]),
        )

    def zeta_first(self, task_id: str) -> np.ndarray:
        return self.zeta[task_id][self._subj_start[task_id]]

    def xi_subject_sums(self, task_id: str) -> np.ndarray:
        starts = self._subj_start[task_id]
        ends = self._subj_end[task_id]
        out = np.empty((len(starts), 2, 2))
        xi = self.xi[task_id]
        for i, (lo, hi) in enumerate(zip(starts, ends)):
            out[i] = xi[lo - i:hi - i - 1].sum(axis=0)
        return out


@dataclass
class FitResult:
    params: ModelParams
    variational: object
    posteriors: Posteriors
    elbo_trace: np.ndarray
    converged: bool
    iterations: int
    restart_id: int
    canonical: object = None       # (FactorModel, factors) after fitting
    diagnostics: dict = field(default_factory=dict)

    @property
    def final_elbo(self) -> float:
        return float(self.elbo_trace[-1])


# --------------------------------------------------------------------------
# data preparation
# --------------------------------------------------------------------------

@dataclass
class PreparedTask:
    task_id: str
    model: object
    rt: np.ndarray
    choice: np.ndarray
    stimulus: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    subj_start: np.ndarray
    subj_end: np.ndarray
    subj_index: np.ndarray
    min_rt: float
    tau_max: float

    @property
    def n_trials(self) -> int:
        return self.rt.shape[0]


@dataclass
class PreparedData:
    subject_ids: list
    covariates: np.ndarray   # (N, p)
    tasks: dict

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)


def prepare_dataset(dataset: Dataset) -> PreparedData:
    """Flatten a dataset into contiguous per-task arrays (history-derived
    quantities are memoized here; anything parameter-dependent is rebuilt
    from these arrays on demand)."""
    dataset.validate()
    n = dataset.n_subjects
    covariates = np.array([s.covariates for s in dataset.subjects], dtype=np.float64)
    tasks = {}
    for task_id in dataset.task_ids:
        model = get_task(task_id)
        stim, act, rts, rew = [], [], [], []
        starts = np.zeros(n, dtype=np.int64)
        ends = np.zeros(n, dtype=np.int64)
        subj_index = []
        pos = 0
        for i, sub in enumerate(dataset.subjects):
            trials = sub.tasks.get(task_id)
            if trials is None or len(trials) == 0:
                raise InvalidParameterError(
                    f"subject {sub.subject_id} has no {task_id} trials; every subject "
                    "needs at least one trial in each task being fit"
                )
            starts[i] = pos
            stim.append(trials.stimulus)
            act.append(trials.action)
            rts.append(trials.rt)
            rew.append(
                trials.reward if trials.reward is not None else np.zeros(len(trials))
            )
            subj_index.append(np.full(len(trials), i, dtype=np.int32))
            pos += len(trials)
            ends[i] = pos
        rt = np.concatenate(rts) if rts else np.empty(0)
        min_rt = float(rt.min()) if rt.size else np.inf
        tasks[task_id] = PreparedTask(
            task_id=task_id,
            model=model,
            rt=np.ascontiguousarray(rt),
            choice=np.ascontiguousarray(np.concatenate(act), dtype=np.int8),
            stimulus=np.ascontiguousarray(np.concatenate(stim), dtype=np.int8),
            action=np.ascontiguousarray(np.concatenate(act), dtype=np.int8),
            reward=np.ascontiguousarray(np.concatenate(rew), dtype=np.float64),
            subj_start=starts,
            subj_end=ends,
            subj_index=np.concatenate(subj_index).astype(np.int32),
            min_rt=min_rt,
            tau_max=TAU_MAX_FACTOR * min_rt,
        )
    return PreparedData(
        subject_ids=[s.subject_id for s in dataset.subjects],
        covariates=covariates,
        tasks=tasks,
    )


# --------------------------------------------------------------------------
# scalar reparameterizations and parameter packing
# --------------------------------------------------------------------------

def _scalar_transforms(model, tau_max):
    pairs = []
    for name, kind, _states in model.scalar_fields:
        if kind == "unit":
            pairs.append((
                lambda v: np.log(v) - np.log1p(-v),
                lambda x: 1.0 / (1.0 + np.exp(-x)) if x >= 0 else np.exp(x) / (1 + np.exp(x)),
            ))
        elif kind == "positive":
            pairs.append((np.log, np.exp))
        elif kind == "nondecision":
            pairs.append((
                lambda v, tm=tau_max: np.log(v / tm) - np.log1p(-v / tm),
                lambda x, tm=tau_max: tm * (1.0 / (1.0 + np.exp(-x)) if x >= 0
                                            else np.exp(x) / (1 + np.exp(x))),
            ))
        else:
            raise InvalidParameterError(f"unknown scalar domain {kind!r}")
    return pairs


class TaskBlock:
    """Packs one task's free emission parameters into an unconstrained vector.

    Layout: mu (3) | psi free entries (row-major, if estimated) | gamma
    (row-major, if covariate effects are estimated) | transformed scalars.
    """

    def __init__(self, prep_task, d_f, p_cov, estimate_loadings, covariate_effects):
        self.model = prep_task.model
        self.tau_max = prep_task.tau_max
        self.d_f = d_f
        self.p_cov = p_cov
        self.with_psi = estimate_loadings and d_f > 0
        self.with_gamma = covariate_effects and p_cov > 0
        self.transforms = _scalar_transforms(self.model, self.tau_max)
        self.n_scalars = len(self.model.scalar_fields)
        self.n_psi = 3 * d_f if self.with_psi else 0
        self.n_gamma = 3 * p_cov if self.with_gamma else 0
        self.size = 3 + self.n_psi + self.n_gamma + self.n_scalars

    def pack(self, tp: TaskParams) -> np.ndarray:
        parts = [tp.mu]
        if self.with_psi:
            parts.append(tp.psi.ravel())
        if self.with_gamma:
            parts.append(tp.gamma.ravel())
        svec = [fwd(getattr(tp.scalars, name))
                for (name, _k, _s), (fwd, _) in zip(self.model.scalar_fields, self.transforms)]
        parts.append(np.array(svec, dtype=np.float64))
        return np.concatenate(parts)

    def unpack(self, x: np.ndarray, template: TaskParams) -> TaskParams:
        mu = x[:3].copy()
        pos = 3
        psi = template.psi.copy()
        if self.with_psi:
            psi = x[pos:pos + self.n_psi].reshape(self.d_f, 3).copy()
            pos += self.n_psi
        gamma = template.gamma.copy()
        if self.with_gamma:
            gamma = x[pos:pos + self.n_gamma].reshape(self.p_cov, 3).copy()
            pos += self.n_gamma
        vals = [inv(x[pos + idx])
                for idx, (_f, inv) in enumerate(self.transforms)]
        scalars = self.model.scalars_from_vector(vals)
        return TaskParams(template.task_id, mu, psi, gamma, scalars, template.hmm)


# --------------------------------------------------------------------------
# emission assembly
# --------------------------------------------------------------------------

def _natural_cells(mu, gamma, psi, covariates, f_nodes, model):
    """State-wise boundary/start arrays per (subject, node) cell.

    f_nodes: (N, R, d_f).  Returns a0, a1, b0, b1 with shape (N, R).
    """
    eta = mu[np.newaxis, np.newaxis, :] + (covariates @ gamma)[:, np.newaxis, :]
    if f_nodes.shape[2]:
        eta = eta + f_nodes @ psi
    a0 = np.exp(eta[..., 0])
    a1 = np.exp(eta[..., 1])
    beta1 = sigmoid(eta[..., 2])
    b0, b1 = model.start_fracs_from_engaged(beta1)
    return np.ascontiguousarray(a0), np.ascontiguousarray(a1), \
        np.ascontiguousarray(b0), np.ascontiguousarray(b1)


def _cell_sums(prep_t, drifts, zeta, cells, tau, eps, l_only=-1):
    a0, a1, b0, b1 = cells
    out = np.zeros((a0.shape[0], 2, a0.shape[1]))
    _compute.weighted_cell_sums(
        prep_t.rt, prep_t.choice, prep_t.subj_start, prep_t.subj_end,
        drifts, zeta, a0, a1, b0, b1, float(tau), eps, l_only, out,
    )
    return out


def _emission_matrix(prep_t, tp: TaskParams, covariates, factor_means, eps):
    """Per-trial log emissions at the factor point estimates (f_i = m_i)."""
    f_nodes = factor_means[:, np.newaxis, :]
    a0, a1, b0, b1 = _natural_cells(tp.mu, tp.gamma, tp.psi, covariates, f_nodes, prep_t.model)
    drifts = prep_t.model.state_drifts_batch(
        prep_t.stimulus, prep_t.action, prep_t.reward,
        prep_t.subj_start, prep_t.subj_end, tp.scalars,
    )
    out = np.empty((prep_t.n_trials, 2))
    _compute.emission_matrix(
        prep_t.rt, prep_t.choice, drifts, a0[:, 0], a1[:, 0], b0[:, 0], b1[:, 0],
        prep_t.subj_index, float(tp.scalars.nondecision), eps, out,
    )
    return out


# --------------------------------------------------------------------------
# E-step
# --------------------------------------------------------------------------

def e_step(params: ModelParams, var, prep: PreparedData,
           eps: float = 1e-10) -> Posteriors:
    """Latent-strategy posteriors for every subject and task at the current
    parameters, with factors plugged in at their variational means."""
    n = prep.n_subjects
    if params.d_f > 0:
        means = var.mean
    else:
        means = np.zeros((n, 0))
    zeta, xi, logm, starts, ends = {}, {}, {}, {}, {}
    for task_id, prep_t in prep.tasks.items():
        tp = params.tasks[task_id]
        log_em = _emission_matrix(prep_t, tp, prep.covariates, means, eps)
        z = np.empty((prep_t.n_trials, 2))
        x_rows = np.empty((prep_t.n_trials - n, 2, 2))
        lm = np.empty(n)
        for i in range(n):
            lo, hi = prep_t.subj_start[i], prep_t.subj_end[i]
            try:
                post = forward_backward(log_em[lo:hi], tp.hmm, prep.covariates[i])
            except DegenerateLikelihoodError as err:
                trial = err.trial if err.trial is not None else -1
                raise DegenerateLikelihoodError(
                    f"subject {prep.subject_ids[i]}, task {task_id}, trial {trial}: "
                    "zero likelihood under both latent states",
                    subject=prep.subject_ids[i], task=task_id, trial=trial,
                ) from err
            z[lo:hi] = post.zeta
            x_rows[lo - i:hi - i - 1] = post.xi
            lm[i] = post.log_marginal
        zeta[task_id] = z
        xi[task_id] = x_rows
        logm[task_id] = lm
        starts[task_id] = prep_t.subj_start
        ends[task_id] = prep_t.subj_end
    return Posteriors(zeta=zeta, xi=xi, log_marginals=logm,
                      _subj_start=starts, _subj_end=ends)


# --------------------------------------------------------------------------
# M-step (i): initial state probabilities
# --------------------------------------------------------------------------

def m_step_initial(posteriors: Posteriors, task_ids) -> dict:
    """Mean first-trial engaged posterior per task, clipped away from {0, 1}."""
    out = {}
    for task_id in task_ids:
        pi = float(posteriors.zeta_first(task_id)[:, 1].mean())
        out[task_id] = float(np.clip(pi, PI_CLIP, 1.0 - PI_CLIP))
    return out


# --------------------------------------------------------------------------
# M-step (ii): transition coefficients
# --------------------------------------------------------------------------

def fit_weighted_logistic(a, b_tot, design, coef0, ridge=1e-8, tol=1e-8,
                          max_iter=100, bound=GAMMA_BOUND):
    """Minimize sum_i [-a_i eta_i + b_i log(1 + e^eta_i)] + ridge ||coef||^2
    over coef with eta = design @ coef, by projected Newton steps in the box
    [-bound, bound].

    Returns (coef, at_bound, grad_norm).  Raises OptimizerError if the KKT
    conditions are not met within ``max_iter`` steps.
    """
    coef = np.clip(np.asarray(coef0, dtype=np.float64).copy(), -bound, bound)
    a = np.asarray(a, dtype=np.float64)
    b_tot = np.asarray(b_tot, dtype=np.float64)
    design = np.asarray(design, dtype=np.float64)
    grad_norm = np.inf
    for _ in range(max_iter):
        eta = design @ coef
        p = sigmoid(eta)
        grad = design.T @ (b_tot * p - a) + 2.0 * ridge * coef
        hess = (design * (b_tot * p * (1.0 - p))[:, np.newaxis]).T @ design
        hess[np.diag_indices_from(hess)] += 2.0 * ridge
        # KKT: zero gradient at interior coordinates, outward-pointing at
        # active bounds.
        at_lo = coef <= -bound + 1e-12
        at_hi = coef >= bound - 1e-12
        kkt = np.where(at_lo, np.minimum(grad, 0.0), np.where(at_hi, np.maximum(grad, 0.0), grad))
        grad_norm = float(np.abs(kkt).max())
        if grad_norm < tol:
            return coef, bool(at_lo.any() or at_hi.any()), grad_norm
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = grad / max(float(np.abs(np.diag(hess)).max()), 1.0)
        new = np.clip(coef - step, -bound, bound)
        # Backtrack if the objective worsened (rare; keeps Newton safe).
        def objective(c):
            e = design @ c
            return float(-(a * e).sum() + (b_tot * np.logaddexp(0.0, e)).sum()
                         + ridge * (c ** 2).sum())
        f_old = objective(coef)
        shrink = 0
        while objective(new) > f_old + 1e-12 and shrink < 30:
            step *= 0.5
            new = np.clip(coef - step, -bound, bound)
            shrink += 1
        coef = new
    raise OptimizerError(
        f"transition-coefficient solver did not reach tolerance (|grad| = {grad_norm:.3e})",
        grad_norm=grad_norm,
    )


def m_step_hmm(posteriors: Posteriors, prep: PreparedData, task_ids,
               current: ModelParams) -> dict:
    """Pairwise-posterior-weighted logistic updates per task and origin state."""
    design = np.column_stack([np.ones(prep.n_subjects), prep.covariates])
    out = {}
    for task_id in task_ids:
        sums = posteriors.xi_subject_sums(task_id)  # (N, 2, 2)
        coefs = np.empty_like(current.tasks[task_id].hmm.coefs)
        boundary = False
        for l in range(2):
            a = sums[:, l, 1]
            b_tot = sums[:, l, 0] + sums[:, l, 1]
            coef0 = current.tasks[task_id].hmm.coefs[l]
            coef, at_bound, _ = fit_weighted_logistic(a, b_tot, design, coef0)
            coefs[l] = coef
            boundary = boundary or at_bound
        out[task_id] = (coefs, boundary)
    return out


# --------------------------------------------------------------------------
# M-steps (iii)-(iv): variational updates
# --------------------------------------------------------------------------

def optimize_gaussian_variational(neg_expected_ll, m0, s0,
                                  max_iter=SUBJECT_SOLVE_MAXITER,
                                  fd_step=FD_STEP):
    """Sequential mean and SD solves for one subject's variational Gaussian.

    ``neg_expected_ll(m, s)`` returns the negated posterior-weighted
    expected emission term.  The mean minimizes it plus ``0.5 ||m||^2`` (SD
    held fixed); the SD then minimizes it plus ``0.5 ||s||^2 - sum log s``,
    optimized on the log scale.  Either solve keeps its incumbent unless it
    strictly improves its own objective.

    Returns (m, s, improved) where ``improved`` reports (mean, sd) solves.
    """
    m0 = np.asarray(m0, dtype=np.float64)
    s0 = np.asarray(s0, dtype=np.float64)

    def m_obj(m):
        return neg_expected_ll(m, s0) + 0.5 * float(m @ m)

    def grad_of(fun, x):
        g = np.empty_like(x)
        for d in range(x.size):
            h = fd_step * max(1.0, abs(x[d]))
            xp = x.copy(); xp[d] += h
            xm = x.copy(); xm[d] -= h
            g[d] = (fun(xp) - fun(xm)) / (2.0 * h)
        return g

    m_new, m_ok = _descending_minimize(m_obj, m0, grad_of, max_iter)

    def s_obj(u):
        s = np.exp(u)
        return neg_expected_ll(m_new, s) + 0.5 * float(s @ s) - float(u.sum())

    u_new, s_ok = _descending_minimize(s_obj, np.log(s0), grad_of, max_iter)
    return m_new, np.exp(u_new), (m_ok, s_ok)


def _descending_minimize(fun, x0, grad_of, max_iter):
    """L-BFGS-B with the descent contract: fall back to the incumbent unless
    the objective strictly improved."""
    f0 = fun(x0)
    try:
        res = minimize(
            fun, x0, jac=lambda x: grad_of(fun, x), method="L-BFGS-B",
            options={"maxiter": max_iter},
        )
    except (FloatingPointError, np.linalg.LinAlgError):
        return x0.copy(), False
    if np.isfinite(res.fun) and res.fun < f0:
        return np.asarray(res.x), True
    return x0.copy(), False


def _subject_neg_expected_ll(subject, prep, params, posteriors, rule, eps):
    """Builds fn(m, s) = -sum_task sum_j sum_l zeta * quadrature emission."""
    pieces = []
    for task_id, prep_t in prep.tasks.items():
        lo, hi = prep_t.subj_start[subject], prep_t.subj_end[subject]
        tp = params.tasks[task_id]
        drifts = prep_t.model.state_drifts_batch(
            prep_t.stimulus[lo:hi], prep_t.action[lo:hi], prep_t.reward[lo:hi],
            np.array([0], dtype=np.int64), np.array([hi - lo], dtype=np.int64),
            tp.scalars,
        )
        pieces.append((
            prep_t.rt[lo:hi],
            prep_t.choice[lo:hi],
            np.ascontiguousarray(drifts),
            np.ascontiguousarray(posteriors.zeta[task_id][lo:hi]),
            tp.mu,
            np.ascontiguousarray(tp.psi),
            prep.covariates[subject] @ tp.gamma,
            float(tp.scalars.nondecision),
            prep_t.model.lapsed_start_rule == "half",
        ))
    nodes = np.ascontiguousarray(rule.nodes)
    weights = np.ascontiguousarray(rule.weights)

    def fn(m, s):
        m = np.ascontiguousarray(m, dtype=np.float64)
        s = np.ascontiguousarray(s, dtype=np.float64)
        total = 0.0
        for rt, choice, drifts, zeta, mu, psi, xg, tau, lapsed_half in pieces:
            total += _compute.subject_neg_expected_ll(
                m, s, nodes, weights, mu, psi, xg, rt, choice, drifts, zeta,
                tau, eps, lapsed_half,
            )
        return total

    return fn


def update_variational(subject, params, var, posteriors, rule, prep,
                       eps=1e-10):
    """Coordinate updates of one subject's variational mean and SD."""
    fn = _subject_neg_expected_ll(subject, prep, params, posteriors, rule, eps)
    return optimize_gaussian_variational(fn, var.mean[subject], var.sd[subject])


# --------------------------------------------------------------------------
# M-step (v): emission parameters
# --------------------------------------------------------------------------

def _task_objective_factory(prep_t, block, covariates, f_nodes, zeta, weights, eps):
    """Full objective and chain-rule central-difference gradient for one
    task's emission block."""
    model = block.model
    comp_states = model.component_states

    def assemble(tp):
        drifts = model.state_drifts_batch(
            prep_t.stimulus, prep_t.action, prep_t.reward,
            prep_t.subj_start, prep_t.subj_end, tp.scalars,
        )
        eta = tp.mu[np.newaxis, np.newaxis, :] \
            + (covariates @ tp.gamma)[:, np.newaxis, :]
        if f_nodes.shape[2]:
            eta = eta + f_nodes @ tp.psi
        return drifts, eta

    def cells_from_eta(eta):
        a0 = np.ascontiguousarray(np.exp(eta[..., 0]))
        a1 = np.ascontiguousarray(np.exp(eta[..., 1]))
        beta1 = sigmoid(eta[..., 2])
        b0, b1 = model.start_fracs_from_engaged(beta1)
        return a0, a1, np.ascontiguousarray(b0), np.ascontiguousarray(b1)

    def weighted(sums):
        return float(np.tensordot(sums, weights, axes=([2], [0])).sum())

    def value(x, template):
        tp = block.unpack(x, template)
        drifts, eta = assemble(tp)
        sums = _cell_sums(prep_t, drifts, zeta, cells_from_eta(eta),
                          tp.scalars.nondecision, eps)
        return -weighted(sums)

    def value_and_grad(x, template):
        tp = block.unpack(x, template)
        drifts, eta = assemble(tp)
        tau = tp.scalars.nondecision
        f_val = -weighted(_cell_sums(prep_t, drifts, zeta, cells_from_eta(eta), tau, eps))

        grad = np.zeros_like(x)
        # Shared components: finite differences on the per-cell linear
        # predictor, then exact chain rule onto mu / psi / gamma.
        for c in range(3):
            states = comp_states[c]
            l_only = states[0] if len(states) == 1 else -1
            h = FD_STEP * max(1.0, abs(float(tp.mu[c])))
            plus = eta.copy(); plus[..., c] += h
            minus = eta.copy(); minus[..., c] -= h
            s_plus = _cell_sums(prep_t, drifts, zeta, cells_from_eta(plus), tau, eps, l_only)
            s_minus = _cell_sums(prep_t, drifts, zeta, cells_from_eta(minus), tau, eps, l_only)
            g_cell = (s_plus - s_minus) / (2.0 * h)       # (N, 2, R)
            grad[c] = -float(np.tensordot(g_cell, weights, axes=([2], [0])).sum())
            pos = 3
            if block.with_psi:
                # d eta_c / d psi[d, c] = f_nodes[i, r, d]
                gw = g_cell * weights[np.newaxis, np.newaxis, :]  # (N, 2, R)
                g_ir = gw.sum(axis=1)                             # (N, R)
                for d in range(block.d_f):
                    grad[pos + d * 3 + c] = -float((g_ir * f_nodes[:, :, d]).sum())
                pos += block.n_psi
            if block.with_gamma:
                gw = g_cell * weights[np.newaxis, np.newaxis, :]
                g_i = gw.sum(axis=(1, 2))                         # (N,)
                for qcov in range(block.p_cov):
                    grad[pos + qcov * 3 + c] = -float((g_i * covariates[:, qcov]).sum())
                pos += block.n_gamma

        # Scalars: central differences on the unconstrained coordinates.
        base = 3 + block.n_psi + block.n_gamma
        for s_idx, (name, _kind, states) in enumerate(model.scalar_fields):
            l_only = states[0] if len(states) == 1 else -1
            h = FD_STEP * max(1.0, abs(float(x[base + s_idx])))
            xp = x.copy(); xp[base + s_idx] += h
            xm = x.copy(); xm[base + s_idx] -= h
            tp_p = block.unpack(xp, template)
            tp_m = block.unpack(xm, template)
            d_p, eta_p = assemble(tp_p)
            d_m, eta_m = assemble(tp_m)
            f_p = weighted(_cell_sums(prep_t, d_p, zeta, cells_from_eta(eta_p),
                                      tp_p.scalars.nondecision, eps, l_only))
            f_m = weighted(_cell_sums(prep_t, d_m, zeta, cells_from_eta(eta_m),
                                      tp_m.scalars.nondecision, eps, l_only))
            grad[base + s_idx] = -(f_p - f_m) / (2.0 * h)
        return f_val, grad

    return value, value_and_grad


def m_step_ddm(params: ModelParams, var, posteriors: Posteriors, rule,
               prep: PreparedData, config: FitConfig) -> dict:
    """Per-task quasi-Newton solve of the expected emission objective over
    intercepts, free loadings, and task scalars.  Never returns a point
    worse than the incumbent."""
    if params.d_f > 0:
        nodes, weights = rule.nodes, rule.weights
        f_nodes = var.mean[:, np.newaxis, :] + var.sd[:, np.newaxis, :] * nodes[np.newaxis, :, :]
    else:
        weights = np.ones(1)
        f_nodes = np.zeros((prep.n_subjects, 1, 0))

    out = {}
    for task_id, prep_t in prep.tasks.items():
        tp = params.tasks[task_id]
        block = TaskBlock(prep_t, params.d_f, prep.covariates.shape[1],
                          config.estimate_loadings, config.covariate_effects)
        zeta = np.ascontiguousarray(posteriors.zeta[task_id])
        value, value_and_grad = _task_objective_factory(
            prep_t, block, prep.covariates, f_nodes, zeta, weights, config.density_eps,
        )
        x0 = block.pack(tp)
        f0 = value(x0, tp)
        best_x, best_f, flagged = x0, f0, False
        radius = None
        for attempt in range(3):
            bounds = None if radius is None else [(xi - radius, xi + radius) for xi in x0]
            res = minimize(
                lambda x: value_and_grad(x, tp), x0, jac=True, method="L-BFGS-B",
                bounds=bounds, options={"maxiter": DDM_SOLVE_MAXITER},
            )
            if np.isfinite(res.fun) and res.fun < best_f:
                best_x, best_f = np.asarray(res.x), float(res.fun)
            if res.success or best_f < f0:
                break
            # Line-search trouble: restrict to a shrinking trust box.
            radius = 0.5 if radius is None else radius * 0.5
        else:
            flagged = True
        out[task_id] = (block.unpack(best_x, tp), best_f, f0, flagged, block)
    return out


# --------------------------------------------------------------------------
# surrogate objective
# --------------------------------------------------------------------------

def elbo(params: ModelParams, var, posteriors: Posteriors, prep: PreparedData,
         rule, config: FitConfig) -> float:
    """Expected complete-data log likelihood under the current posteriors
    plus the Gaussian penalty terms of the variational family."""
    if params.d_f > 0:
        nodes, weights = rule.nodes, rule.weights
        f_nodes = var.mean[:, np.newaxis, :] + var.sd[:, np.newaxis, :] * nodes[np.newaxis, :, :]
    else:
        weights = np.ones(1)
        f_nodes = np.zeros((prep.n_subjects, 1, 0))

    total = 0.0
    for task_id, prep_t in prep.tasks.items():
        tp = params.tasks[task_id]
        drifts = prep_t.model.state_drifts_batch(
            prep_t.stimulus, prep_t.action, prep_t.reward,
            prep_t.subj_start, prep_t.subj_end, tp.scalars,
        )
        cells = _natural_cells(tp.mu, tp.gamma, tp.psi, prep.covariates, f_nodes, prep_t.model)
        sums = _cell_sums(prep_t, drifts, np.ascontiguousarray(posteriors.zeta[task_id]),
                          cells, tp.scalars.nondecision, config.density_eps)
        total += float(np.tensordot(sums, weights, axes=([2], [0])).sum())

        pi1 = tp.hmm.init_prob_engaged
        zf = posteriors.zeta_first(task_id)
        total += float(zf[:, 0].sum() * np.log(1.0 - pi1) + zf[:, 1].sum() * np.log(pi1))

        xi_sums = posteriors.xi_subject_sums(task_id)
        for i in range(prep.n_subjects):
            log_c = log_transition_matrix(tp.hmm, prep.covariates[i])
            total += float((xi_sums[i] * log_c).sum())

    if params.d_f > 0:
        total += float(
            -0.5 * (var.mean ** 2).sum()
            + np.log(var.sd).sum()
            - 0.5 * (var.sd ** 2).sum()
        )
    return total


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

def _moment_guesses(prep_t):
    rts = prep_t.rt
    spread = float(np.clip(rts.std() / 0.35, 0.4, 2.5))
    alpha1 = 1.6 * spread
    alpha0 = 0.55 * alpha1
    beta1 = 0.55
    tau = 0.9 * prep_t.min_rt
    if prep_t.model.task_id == "prt":
        scalars = {"learn_rate": 0.05, "reward_sensitivity": 1.5, "nondecision": tau}
    elif prep_t.model.task_id == "ft":
        scalars = {"drift_controlled": 2.0, "drift_automatic": 1.0,
                   "attenuation": 0.3, "nondecision": tau}
    else:
        scalars = {name: (0.5 if kind == "unit" else (tau if kind == "nondecision" else 1.0))
                   for name, kind, _s in prep_t.model.scalar_fields}
    return np.array([alpha0, alpha1, beta1]), scalars


def _initial_params(prep, task_ids, config, rng, jitter, warm=None):
    p_cov = prep.covariates.shape[1]
    tasks = {}
    for task_id in task_ids:
        prep_t = prep.tasks[task_id]
        model = prep_t.model
        transforms = _scalar_transforms(model, prep_t.tau_max)
        if warm is not None and task_id in warm.tasks:
            wt = warm.tasks[task_id]
            mu = wt.mu.copy()
            svec = np.array([
                fwd(getattr(wt.scalars, name))
                for (name, _k, _s), (fwd, _) in zip(model.scalar_fields, transforms)
            ])
            hmm = HmmParams(wt.hmm.init_prob_engaged, wt.hmm.coefs.copy())
        else:
            shared, scalars = _moment_guesses(prep_t)
            mu = np.array([np.log(shared[0]), np.log(shared[1]),
                           np.log(shared[2]) - np.log1p(-shared[2])])
            svec = np.array([
                fwd(scalars[name])
                for (name, _k, _s), (fwd, _) in zip(model.scalar_fields, transforms)
            ])
            hmm = HmmParams(0.9, np.zeros((2, 1 + p_cov)))
        if jitter:
            mu = mu + rng.normal(0.0, config.init_jitter, 3)
            svec = svec + rng.normal(0.0, 2.0 * config.init_jitter, svec.size)
        if config.d_f > 0 and config.estimate_loadings:
            psi = rng.normal(0.0, config.init_jitter, (config.d_f, 3))
        else:
            psi = np.zeros((config.d_f, 3))
        vals = [inv(svec[idx]) for idx, (_f, inv) in enumerate(transforms)]
        tasks[task_id] = TaskParams(
            task_id=task_id, mu=mu, psi=psi, gamma=np.zeros((p_cov, 3)),
            scalars=model.scalars_from_vector(vals), hmm=hmm,
        )
    params = ModelParams(tasks=tasks, d_f=config.d_f)
    var = VariationalState(
        mean=np.zeros((prep.n_subjects, config.d_f)),
        sd=np.ones((prep.n_subjects, config.d_f)),
    )
    return params, var


# --------------------------------------------------------------------------
# EM loop and restart orchestration
# --------------------------------------------------------------------------

def _packed_all(params, blocks, var):
    parts = [blocks[t].pack(params.tasks[t]) for t in blocks]
    if params.d_f > 0:
        parts += [var.mean.ravel(), np.log(var.sd).ravel()]
    return np.concatenate(parts)


def _run_em(prep, task_ids, config, params, var, restart_id):
    rule = gauss_hermite(config.quad_points, config.d_f) if config.d_f > 0 else None
    params = params.copy()
    var = var.copy()
    diagnostics = {
        "variational_failures": 0,
        "ddm_solver_flags": 0,
        "hmm_boundary_events": 0,
        "pi_clip_events": 0,
    }
    blocks = {
        t: TaskBlock(prep.tasks[t], config.d_f, prep.covariates.shape[1],
                     config.estimate_loadings, config.covariate_effects)
        for t in task_ids
    }
    trace = []
    converged = False
    packed_prev = _packed_all(params, blocks, var)
    iteration = 0
    for iteration in range(1, config.max_iter + 1):
        tic = time.perf_counter()
        posteriors = e_step(params, var, prep, config.density_eps)

        new_pi = m_step_initial(posteriors, task_ids)
        for t in task_ids:
            if new_pi[t] in (PI_CLIP, 1.0 - PI_CLIP):
                diagnostics["pi_clip_events"] += 1
            params.tasks[t].hmm = HmmParams(new_pi[t], params.tasks[t].hmm.coefs)

        hmm_updates = m_step_hmm(posteriors, prep, task_ids, params)
        for t in task_ids:
            coefs, at_bound = hmm_updates[t]
            if at_bound:
                diagnostics["hmm_boundary_events"] += 1
            params.tasks[t].hmm = HmmParams(params.tasks[t].hmm.init_prob_engaged, coefs)

        if config.d_f > 0:
            def solve_subject(i):
                return update_variational(i, params, var, posteriors, rule, prep,
                                          config.density_eps)
            if config.workers > 1:
                with ThreadPoolExecutor(max_workers=config.workers) as pool:
                    results = list(pool.map(solve_subject, range(prep.n_subjects)))
            else:
                results = [solve_subject(i) for i in range(prep.n_subjects)]
            for i, (m_i, s_i, oks) in enumerate(results):
                var.mean[i] = m_i
                var.sd[i] = s_i
                if not all(oks):
                    diagnostics["variational_failures"] += 1

        ddm_updates = m_step_ddm(params, var, posteriors, rule, prep, config)
        for t in task_ids:
            tp_new, f_new, f_old, flagged, _block = ddm_updates[t]
            if flagged:
                diagnostics["ddm_solver_flags"] += 1
            if f_new <= f_old:
                params.tasks[t].mu = tp_new.mu
                params.tasks[t].psi = tp_new.psi
                params.tasks[t].gamma = tp_new.gamma
                params.tasks[t].scalars = tp_new.scalars

        current = elbo(params, var, posteriors, prep, rule, config)
        packed = _packed_all(params, blocks, var)
        delta = float(np.abs(packed - packed_prev).max())
        packed_prev = packed
        trace.append(current)
        if config.trace_sink is not None:
            config.trace_sink({
                "event": "em_iteration", "restart": restart_id, "iteration": iteration,
                "elbo": current, "max_param_delta": delta,
                "wall_time": time.perf_counter() - tic,
            })
        if len(trace) >= 2:
            prev = trace[-2]
            denom = max(abs(prev), 1e-10)
            if iteration > 3 and current < prev - config.elbo_slack * denom:
                raise FitError(
                    f"objective decreased beyond slack at iteration {iteration}: "
                    f"{prev:.6f} -> {current:.6f}",
                    diagnostics=[{"restart": restart_id, "trace": trace}],
                )
            if abs(current - prev) / denom < config.tol:
                converged = True
                break

    posteriors = e_step(params, var, prep, config.density_eps)
    canonical = None
    if config.d_f > 0 and config.estimate_loadings:
        from .factor import canonicalize
        from .errors import CanonicalizationError
        try:
            canonical = canonicalize(params.factor_model(), var.mean)
        except CanonicalizationError as err:
            diagnostics["canonicalization_error"] = str(err)
    return FitResult(
        params=params,
        variational=var if config.d_f > 0 else None,
        posteriors=posteriors,
        elbo_trace=np.array(trace),
        converged=converged,
        iterations=iteration,
        restart_id=restart_id,
        canonical=canonical,
        diagnostics=diagnostics,
    )


def _restart_rng(seed, restart):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7001, restart)))


def _fit_restarts(prep, task_ids, config, warm=None):
    """Run all restarts and keep the best final objective."""
    if set(task_ids) != set(prep.tasks):
        prep = PreparedData(
            subject_ids=prep.subject_ids,
            covariates=prep.covariates,
            tasks={t: prep.tasks[t] for t in task_ids},
        )
    results, failures = [], []
    for r in range(config.restarts):
        rng = _restart_rng(config.seed, r)
        use_warm = warm if (r == 0 and warm is not None) else None
        params, var = _initial_params(prep, task_ids, config, rng,
                                      jitter=(r > 0), warm=use_warm)
        try:
            results.append(_run_em(prep, task_ids, config, params, var, restart_id=r))
        except (FitError, DegenerateLikelihoodError, OptimizerError) as err:
            failures.append({"restart": r, "error": str(err)})
    if not results:
        raise FitError("all restarts failed", diagnostics=failures)
    best = max(results, key=lambda res: res.final_elbo)
    best.diagnostics["restart_final_elbos"] = {
        res.restart_id: res.final_elbo for res in results
    }
    best.diagnostics["failed_restarts"] = failures
    return best


def fit_split(dataset: Dataset, config: FitConfig) -> dict:
    """Fit each task separately with population-level parameters (no factors,
    no variational layer)."""
    prep = prepare_dataset(dataset)
    split_cfg = replace(config, d_f=0, split_warm_start=False)
    out = {}
    for task_id in prep.tasks:
        out[task_id] = _fit_restarts(prep, [task_id], split_cfg)
    return out


def fit_shift(dataset: Dataset, config: FitConfig) -> FitResult:
    """Fit the joint model; with ``d_f = 0`` this reduces, by construction,
    to the per-task baseline assembled into one result."""
    prep = prepare_dataset(dataset)
    if config.d_f == 0:
        per_task = fit_split(dataset, replace(config, split_warm_start=False))
        return _compose_split_results(per_task, config)

    warm = None
    if config.split_warm_start:
        split_results = fit_split(dataset, replace(config, d_f=0))
        warm_tasks = {t: res.params.tasks[t].copy() for t, res in split_results.items()}
        warm = ModelParams(tasks=warm_tasks, d_f=0)
    return _fit_restarts(prep, list(prep.tasks), config, warm=warm)


def _compose_split_results(per_task: dict, config: FitConfig) -> FitResult:
    """Assemble independent per-task fits into one joint result.

    Without factors the tasks share nothing, so each task's EM runs to its
    own convergence; the joint objective trace is the sum of the per-task
    traces, shorter ones extended at their converged value.
    """
    task_ids = list(per_task)
    n_iter = max(len(per_task[t].elbo_trace) for t in task_ids)
    trace = np.zeros(n_iter)
    for t in task_ids:
        tr = per_task[t].elbo_trace
        trace[:len(tr)] += tr
        trace[len(tr):] += tr[-1]
    params = ModelParams(
        tasks={t: per_task[t].params.tasks[t] for t in task_ids}, d_f=0,
    )
    posteriors = Posteriors(
        zeta={t: per_task[t].posteriors.zeta[t] for t in task_ids},
        xi={t: per_task[t].posteriors.xi[t] for t in task_ids},
        log_marginals={t: per_task[t].posteriors.log_marginals[t] for t in task_ids},
        _subj_start={t: per_task[t].posteriors._subj_start[t] for t in task_ids},
        _subj_end={t: per_task[t].posteriors._subj_end[t] for t in task_ids},
    )
    return FitResult(
        params=params,
        variational=None,
        posteriors=posteriors,
        elbo_trace=trace,
        converged=all(per_task[t].converged for t in task_ids),
        iterations=max(per_task[t].iterations for t in task_ids),
        restart_id=0,
        canonical=None,
        diagnostics={t: per_task[t].diagnostics for t in task_ids},
    )
