"""Dataset containers and the flat-file formats used by the command line.

Trial files are plain CSV with one row per trial:

    subject_id,task_id,trial,stimulus,action,rt_seconds,reward

(the reward column is empty for tasks that carry none).  Covariates live in
a second CSV keyed by ``subject_id`` with columns ``x1..xp``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .errors import DataError
from .tasks import TrialRecord, get_task

__all__ = [
    "TaskTrials",
    "SubjectData",
    "Dataset",
    "load_dataset",
    "save_dataset",
    "DEFAULT_TRUNCATION",
]

#: Response-time truncation bounds (seconds) applied at ingestion on request.
DEFAULT_TRUNCATION = (0.150, 1.500)

DATASET_COLUMNS = ["subject_id", "task_id", "trial", "stimulus", "action", "rt_seconds", "reward"]


@dataclass
class TaskTrials:
    """Columnar trial sequences for one subject in one task."""

    stimulus: np.ndarray
    action: np.ndarray
    rt: np.ndarray
    reward: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.rt)

    def records(self) -> list:
        rew = self.reward if self.reward is not None else [None] * len(self)
        return [
            TrialRecord(int(s), int(a), float(t), None if r is None else int(r))
            for s, a, t, r in zip(self.stimulus, self.action, self.rt, rew)
        ]


@dataclass
class SubjectData:
    """One subject's covariates and per-task trial sequences."""

    subject_id: str
    covariates: np.ndarray
    tasks: dict = field(default_factory=dict)


@dataclass
class Dataset:
    subjects: list
    task_ids: list
    covariate_names: list

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    def validate(self) -> None:
        for sub in self.subjects:
            if len(sub.covariates) != self.n_covariates:
                raise DataError(
                    f"subject {sub.subject_id}: expected {self.n_covariates} covariates"
                )
            if not np.all(np.isfinite(sub.covariates)):
                raise DataError(f"subject {sub.subject_id}: non-finite covariates")
            for task_id, trials in sub.tasks.items():
                model = get_task(task_id)
                n = len(trials)
                for name in ("stimulus", "action"):
                    vals = getattr(trials, name)
                    if len(vals) != n or not np.isin(vals, (0, 1)).all():
                        raise DataError(
                            f"subject {sub.subject_id}, task {task_id}: bad {name} column"
                        )
                if not np.all(np.isfinite(trials.rt)) or np.any(trials.rt <= 0):
                    raise DataError(
                        f"subject {sub.subject_id}, task {task_id}: response times must be > 0"
                    )
                if model.requires_reward:
                    if trials.reward is None or np.isnan(trials.reward).any():
                        raise DataError(
                            f"subject {sub.subject_id}, task {task_id}: rewards required"
                        )
                    if not np.isin(trials.reward, (0, 1)).all():
                        raise DataError(
                            f"subject {sub.subject_id}, task {task_id}: rewards must be 0/1"
                        )
                elif trials.reward is not None and not np.isnan(trials.reward).all():
                    raise DataError(
                        f"subject {sub.subject_id}, task {task_id}: unexpected rewards"
                    )


def _float_str(x: float) -> str:
    return repr(float(x))


def save_dataset(dataset: Dataset, trials_path, covariates_path) -> None:
    """Write the two CSV files; byte-stable for identical inputs."""
    buf = io.StringIO()
    buf.write(",".join(DATASET_COLUMNS) + "\n")
    for sub in dataset.subjects:
        for task_id in dataset.task_ids:
            trials = sub.tasks.get(task_id)
            if trials is None:
                continue
            rew = trials.reward
            for j in range(len(trials)):
                r = "" if rew is None or math.isnan(rew[j]) else str(int(rew[j]))
                buf.write(
                    f"{sub.subject_id},{task_id},{j},{int(trials.stimulus[j])},"
                    f"{int(trials.action[j])},{_float_str(trials.rt[j])},{r}\n"
                )
    Path(trials_path).write_text(buf.getvalue())

    cov = io.StringIO()
    cov.write("subject_id," + ",".join(dataset.covariate_names) + "\n")
    for sub in dataset.subjects:
        vals = ",".join(_float_str(v) for v in sub.covariates)
        cov.write(f"{sub.subject_id},{vals}\n")
    Path(covariates_path).write_text(cov.getvalue())


def load_dataset(trials_path, covariates_path, rt_unit: str = "s",
                 truncate=None) -> Dataset:
    """Read trial and covariate CSVs into a validated :class:`Dataset`.

    ``rt_unit`` is ``"s"`` or ``"ms"``.  When ``truncate`` is given (a
    ``(lo, hi)`` pair in seconds, or True for the standard bounds),
    response times are clipped into that interval after unit conversion.
    """
    trials_path, covariates_path = Path(trials_path), Path(covariates_path)
    for path in (trials_path, covariates_path):
        if not path.exists():
            raise FileNotFoundError(f"missing input file: {path}")
    try:
        df = pd.read_csv(trials_path, dtype={"subject_id": str, "task_id": str})
        cov_df = pd.read_csv(covariates_path, dtype={"subject_id": str})
    except Exception as exc:
        raise DataError(f"could not parse input files: {exc}") from exc
    missing = [c for c in DATASET_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"{trials_path}: missing columns {missing}")
    if "subject_id" not in cov_df.columns or cov_df.shape[1] < 1:
        raise DataError(f"{covariates_path}: needs subject_id plus covariate columns")

    if rt_unit == "ms":
        df = df.assign(rt_seconds=df["rt_seconds"] / 1000.0)
    elif rt_unit != "s":
        raise DataError(f"rt_unit must be 's' or 'ms', got {rt_unit!r}")
    if truncate is not None and truncate is not False:
        lo, hi = DEFAULT_TRUNCATION if truncate is True else truncate
        df = df.assign(rt_seconds=df["rt_seconds"].clip(lo, hi))

    covariate_names = [c for c in cov_df.columns if c != "subject_id"]
    cov_map = {
        row["subject_id"]: np.array([float(row[c]) for c in covariate_names])
        for _, row in cov_df.iterrows()
    }

    task_ids = list(dict.fromkeys(df["task_id"]))
    subjects = []
    for subject_id, sub_df in df.groupby("subject_id", sort=False):
        if subject_id not in cov_map:
            raise DataError(f"subject {subject_id} has trials but no covariates")
        tasks = {}
        for task_id, task_df in sub_df.groupby("task_id", sort=False):
            task_df = task_df.sort_values("trial")
            model = get_task(task_id)
            reward = None
            if model.requires_reward or task_df["reward"].notna().any():
                reward = task_df["reward"].to_numpy(dtype=np.float64)
            tasks[task_id] = TaskTrials(
                stimulus=task_df["stimulus"].to_numpy(dtype=np.int8),
                action=task_df["action"].to_numpy(dtype=np.int8),
                rt=task_df["rt_seconds"].to_numpy(dtype=np.float64),
                reward=reward,
            )
        subjects.append(SubjectData(subject_id, cov_map[subject_id], tasks))

    dataset = Dataset(subjects=subjects, task_ids=task_ids, covariate_names=covariate_names)
    dataset.validate()
    return dataset
