"""Task-specific emission models composed into the two-state mixture of
drift-diffusion processes.

Two paradigms ship with the package: a reward-learning task ("prt") whose
engaged-state drift tracks Q-learning value differences, and a conflict task
("ft") whose drift decomposes into controlled and automatic components.
Further paradigms can be registered without touching the estimator: a task
declares its population scalars, how per-trial drifts and starting points
depend on the latent state, and whether trials carry rewards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .errors import InvalidParameterError
from .wiener import DdmStateParams, wfpt_log_density

__all__ = [
    "TrialRecord",
    "QTable",
    "PrtParams",
    "FtParams",
    "SubjectSharedParams",
    "SHARED_COMPONENTS",
    "SHARED_LINKS",
    "prt_drift",
    "q_update",
    "q_value_gaps",
    "q_trajectory",
    "ft_drift",
    "emission_log_likelihood",
    "get_task",
    "register_task",
    "TASK_REGISTRY",
]

#: Order and links of the shared subject/task parameter triple.
SHARED_COMPONENTS = ("boundary_lapsed", "boundary_engaged", "start_engaged")
SHARED_LINKS = ("log", "log", "logit")


@dataclass(frozen=True)
class TrialRecord:
    """One trial: stimulus, action, response time, optional reward."""

    stimulus: int
    action: int
    rt: float
    reward: Optional[int] = None

    def __post_init__(self):
        if self.stimulus not in (0, 1):
            raise InvalidParameterError(f"stimulus must be 0 or 1, got {self.stimulus!r}")
        if self.action not in (0, 1):
            raise InvalidParameterError(f"action must be 0 or 1, got {self.action!r}")
        if not (math.isfinite(self.rt) and self.rt > 0.0):
            raise InvalidParameterError(f"rt must be positive and finite, got {self.rt!r}")
        if self.reward is not None and self.reward not in (0, 1):
            raise InvalidParameterError(f"reward must be 0, 1 or None, got {self.reward!r}")


class QTable:
    """Expected-reward table with entry ``values[a, s]`` for action a, stimulus s."""

    __slots__ = ("values",)

    def __init__(self, values=None):
        if values is None:
            values = np.diag([0.5, 0.5])
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (2, 2) or not np.all(np.isfinite(values)):
            raise InvalidParameterError("QTable needs a finite 2x2 value matrix")
        self.values = values

    def __eq__(self, other):
        return isinstance(other, QTable) and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"QTable({self.values.tolist()})"


@dataclass(frozen=True)
class PrtParams:
    """Reward-task scalars: learning rate, reward sensitivity, non-decision time."""

    learn_rate: float
    reward_sensitivity: float
    nondecision: float

    def __post_init__(self):
        if not 0.0 < self.learn_rate < 1.0:
            raise InvalidParameterError(f"learn_rate must be in (0, 1), got {self.learn_rate}")
        if not self.reward_sensitivity > 0.0:
            raise InvalidParameterError(
                f"reward_sensitivity must be > 0, got {self.reward_sensitivity}"
            )
        if not self.nondecision > 0.0:
            raise InvalidParameterError(f"nondecision must be > 0, got {self.nondecision}")


@dataclass(frozen=True)
class FtParams:
    """Conflict-task scalars: controlled/automatic drift, attenuation, non-decision."""

    drift_controlled: float
    drift_automatic: float
    attenuation: float
    nondecision: float

    def __post_init__(self):
        if not self.drift_controlled > 0.0:
            raise InvalidParameterError(f"drift_controlled must be > 0, got {self.drift_controlled}")
        if not self.drift_automatic > 0.0:
            raise InvalidParameterError(f"drift_automatic must be > 0, got {self.drift_automatic}")
        if not 0.0 < self.attenuation < 1.0:
            raise InvalidParameterError(f"attenuation must be in (0, 1), got {self.attenuation}")
        if not self.nondecision > 0.0:
            raise InvalidParameterError(f"nondecision must be > 0, got {self.nondecision}")


@dataclass(frozen=True)
class SubjectSharedParams:
    """Natural-scale shared triple for one subject in one task."""

    boundary_lapsed: float
    boundary_engaged: float
    start_engaged: float

    def __post_init__(self):
        if not self.boundary_lapsed > 0.0:
            raise InvalidParameterError(f"boundary_lapsed must be > 0, got {self.boundary_lapsed}")
        if not self.boundary_engaged > 0.0:
            raise InvalidParameterError(
                f"boundary_engaged must be > 0, got {self.boundary_engaged}"
            )
        if not 0.0 < self.start_engaged < 1.0:
            raise InvalidParameterError(f"start_engaged must be in (0, 1), got {self.start_engaged}")


def prt_drift(q: QTable, stimulus: int, state: int, c: float) -> float:
    """Engaged drift is the scaled action-value gap for the shown stimulus;
    lapsed drift is exactly zero."""
    if state == 0:
        return 0.0
    return c * (q.values[1, stimulus] - q.values[0, stimulus])


def q_update(q: QTable, action: int, stimulus: int, reward: int, b: float) -> QTable:
    """One Q-learning step on the realized (action, stimulus) entry."""
    values = q.values.copy()
    values[action, stimulus] += b * (reward - values[action, stimulus])
    return QTable(values)


def ft_drift(stimulus: int, state: int, p: FtParams) -> float:
    """Controlled component (attenuated in the reduced state) plus the
    automatic component, whose sign flips with congruency."""
    controlled = p.drift_controlled if state == 1 else p.attenuation * p.drift_controlled
    return controlled + (1.0 if stimulus == 1 else -1.0) * p.drift_automatic


@njit(cache=True, nogil=True)
def _q_gaps_kernel(stimulus, action, reward, b, q_init, out):
    q = q_init.copy()
    for j in range(stimulus.shape[0]):
        s = stimulus[j]
        out[j] = q[1, s] - q[0, s]
        a = action[j]
        q[a, s] += b * (reward[j] - q[a, s])


def q_value_gaps(stimulus, action, reward, b: float, q_init=None) -> np.ndarray:
    """Per-trial value gaps ``Q_j(1, s_j) - Q_j(0, s_j)`` along a sequence.

    The table is rebuilt forward from ``q_init`` for the given learning
    rate; it depends only on the observed (action, stimulus, reward)
    history, never on latent states.
    """
    if q_init is None:
        q_init = np.diag([0.5, 0.5])
    out = np.empty(len(stimulus))
    _q_gaps_kernel(
        np.ascontiguousarray(stimulus, dtype=np.int8),
        np.ascontiguousarray(action, dtype=np.int8),
        np.ascontiguousarray(reward, dtype=np.float64),
        float(b),
        np.ascontiguousarray(q_init, dtype=np.float64),
        out,
    )
    return out


def q_trajectory(stimulus, action, reward, b: float, q_init=None) -> np.ndarray:
    """Q-tables before each trial, shape (J + 1, 2, 2); last entry is final."""
    if q_init is None:
        q_init = np.diag([0.5, 0.5])
    q = QTable(q_init)
    tables = [q.values.copy()]
    for s, a, r in zip(stimulus, action, reward):
        q = q_update(q, int(a), int(s), int(r), b)
        tables.append(q.values.copy())
    return np.array(tables)


class TaskModel:
    """Interface one behavioral paradigm exposes to the estimator.

    Subclasses define the scalar parameter block, the state-dependent drift
    and starting-point rules, and (for reward paradigms) how trial history
    feeds the drift.
    """

    task_id: str = ""
    requires_reward: bool = False
    #: (name, domain, affected_states); domain in {"unit", "positive",
    #: "nondecision"}; affected_states lists which latent states' emissions
    #: depend on the scalar.
    scalar_fields: tuple = ()
    scalar_type: type = object
    #: Which latent states each shared component (lapsed boundary, engaged
    #: boundary, engaged start) feeds into.
    component_states: tuple = ((0,), (1,), (0, 1))
    #: Starting point in the lapsed state: "half" pins it at 1/2, "engaged"
    #: reuses the engaged-state start.
    lapsed_start_rule: str = "engaged"

    def start_frac(self, state: int, shared: SubjectSharedParams) -> float:
        raise NotImplementedError

    def drift(self, trial: TrialRecord, state: int, scalars, q: Optional[QTable] = None) -> float:
        raise NotImplementedError

    def state_drifts(self, stimulus, action, reward, scalars) -> np.ndarray:
        """(J, 2) drift array for states 0 and 1 given observed sequences."""
        raise NotImplementedError

    def state_drifts_batch(self, stimulus, action, reward, subj_start, subj_end,
                           scalars) -> np.ndarray:
        """Drifts over concatenated per-subject sequences (history resets at
        each subject boundary)."""
        out = np.empty((len(stimulus), 2))
        rew = reward if reward is not None else np.zeros(len(stimulus))
        for lo, hi in zip(subj_start, subj_end):
            out[lo:hi] = self.state_drifts(stimulus[lo:hi], action[lo:hi], rew[lo:hi], scalars)
        return out

    def start_fracs_from_engaged(self, beta1):
        """(start_state0, start_state1) arrays given engaged-start values."""
        beta1 = np.asarray(beta1, dtype=np.float64)
        if self.lapsed_start_rule == "half":
            return np.full_like(beta1, 0.5), beta1
        return beta1, beta1

    def scalars_from_vector(self, vec) -> object:
        return self.scalar_type(*vec)

    def scalars_to_vector(self, scalars) -> np.ndarray:
        return np.array([getattr(scalars, name) for name, _k, _s in self.scalar_fields])


class PrtTask(TaskModel):
    task_id = "prt"
    requires_reward = True
    scalar_fields = (
        ("learn_rate", "unit", (1,)),
        ("reward_sensitivity", "positive", (1,)),
        ("nondecision", "nondecision", (0, 1)),
    )
    scalar_type = PrtParams
    # Lapsed start is pinned at 1/2, so the engaged start only touches state 1.
    component_states = ((0,), (1,), (1,))
    lapsed_start_rule = "half"

    def start_frac(self, state, shared):
        # Lapsed responding is random guessing from an unbiased start.
        return 0.5 if state == 0 else shared.start_engaged

    def drift(self, trial, state, scalars, q=None):
        if q is None:
            raise InvalidParameterError("reward-learning emissions need the trial's QTable")
        return prt_drift(q, trial.stimulus, state, scalars.reward_sensitivity)

    def state_drifts(self, stimulus, action, reward, scalars):
        gaps = q_value_gaps(stimulus, action, reward, scalars.learn_rate)
        out = np.zeros((len(stimulus), 2))
        out[:, 1] = scalars.reward_sensitivity * gaps
        return out

    def state_drifts_batch(self, stimulus, action, reward, subj_start, subj_end, scalars):
        from ._compute import q_gaps_batch

        gaps = np.empty(len(stimulus))
        q_gaps_batch(
            np.ascontiguousarray(stimulus, dtype=np.int8),
            np.ascontiguousarray(action, dtype=np.int8),
            np.ascontiguousarray(reward, dtype=np.float64),
            np.ascontiguousarray(subj_start, dtype=np.int64),
            np.ascontiguousarray(subj_end, dtype=np.int64),
            float(scalars.learn_rate),
            np.diag([0.5, 0.5]),
            gaps,
        )
        out = np.zeros((len(stimulus), 2))
        out[:, 1] = scalars.reward_sensitivity * gaps
        return out


class FtTask(TaskModel):
    task_id = "ft"
    requires_reward = False
    scalar_fields = (
        ("drift_controlled", "positive", (0, 1)),
        ("drift_automatic", "positive", (0, 1)),
        ("attenuation", "unit", (0,)),
        ("nondecision", "nondecision", (0, 1)),
    )
    scalar_type = FtParams
    component_states = ((0,), (1,), (0, 1))
    lapsed_start_rule = "engaged"

    def start_frac(self, state, shared):
        # Starting bias does not differ across engagement states.
        return shared.start_engaged

    def drift(self, trial, state, scalars, q=None):
        return ft_drift(trial.stimulus, state, scalars)

    def state_drifts(self, stimulus, action, reward, scalars):
        sign = np.where(np.asarray(stimulus) == 1, 1.0, -1.0)
        auto = sign * scalars.drift_automatic
        out = np.empty((len(stimulus), 2))
        out[:, 0] = scalars.attenuation * scalars.drift_controlled + auto
        out[:, 1] = scalars.drift_controlled + auto
        return out

    def state_drifts_batch(self, stimulus, action, reward, subj_start, subj_end, scalars):
        # Drift depends on the current stimulus only; subject boundaries are
        # irrelevant.
        return self.state_drifts(stimulus, action, reward, scalars)


TASK_REGISTRY: dict = {}


def register_task(model: TaskModel) -> None:
    TASK_REGISTRY[model.task_id] = model


def get_task(task_id: str) -> TaskModel:
    try:
        return TASK_REGISTRY[task_id]
    except KeyError:
        raise InvalidParameterError(
            f"unknown task {task_id!r}; registered: {sorted(TASK_REGISTRY)}"
        ) from None


register_task(PrtTask())
register_task(FtTask())


def emission_log_likelihood(trial: TrialRecord, task: str, state: int,
                            shared: SubjectSharedParams, task_params,
                            q: Optional[QTable] = None) -> float:
    """Mixture-component log density of one trial under one latent state.

    Assembles the state's diffusion parameterization (boundary by state,
    starting point and drift by task rule, task-level non-decision time)
    and evaluates the first-passage density with action 1 mapped to the
    upper boundary.
    """
    model = get_task(task)
    boundary = shared.boundary_engaged if state == 1 else shared.boundary_lapsed
    p = DdmStateParams(
        boundary=boundary,
        start_frac=model.start_frac(state, shared),
        drift=model.drift(trial, state, task_params, q=q),
        nondecision=task_params.nondecision,
    )
    return wfpt_log_density(trial.rt, trial.action, p)
