"""Gauss-Hermite quadrature normalized to standard-normal expectations,
with tensor-product rules for multivariate factors."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import factor as factor_mod
from . import tasks as tasks_mod
from .errors import InvalidParameterError

__all__ = ["QuadratureRule", "gauss_hermite", "expect_gaussian", "expected_emission"]

MAX_POINTS_PER_DIM = 50


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes (n, d) and probability weights (n,) for E[h(Z)], Z ~ N(0, I_d)."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def n_points(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]


@functools.lru_cache(maxsize=None)
def _hermite_1d(n: int):
    """Probabilists' Gauss-Hermite rule rescaled to N(0, 1) expectations."""
    x, w = np.polynomial.hermite_e.hermegauss(n)
    # Exact symmetry about zero and unit total mass, bit-for-bit reproducible.
    x = (x - x[::-1]) / 2.0
    w = (w + w[::-1]) / 2.0
    w = w / w.sum()
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@functools.lru_cache(maxsize=None)
def gauss_hermite(n_points: int, dim: int = 1) -> QuadratureRule:
    """Tensor-product rule with ``n_points`` nodes per dimension.

    One-dimensional moments are exact through degree ``2 * n_points - 1``.
    """
    if n_points < 1 or n_points > MAX_POINTS_PER_DIM:
        raise InvalidParameterError(
            f"n_points must be in [1, {MAX_POINTS_PER_DIM}], got {n_points}"
        )
    if dim < 1:
        raise InvalidParameterError(f"dim must be >= 1, got {dim}")
    x, w = _hermite_1d(n_points)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    nodes = np.column_stack([g.ravel() for g in grids])
    weights = np.ones(nodes.shape[0])
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    for g in wgrids:
        weights = weights * g.ravel()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(nodes=nodes, weights=weights)


def expect_gaussian(fn, m, sd, rule: QuadratureRule) -> float:
    """Approximate E[fn(F)] for F ~ N(m, diag(sd^2)) with the given rule."""
    m = np.asarray(m, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    total = 0.0
    for z, w in zip(rule.nodes, rule.weights):
        total += w * fn(m + sd * z)
    return total


def expected_emission(trial, task: str, state: int, m, s, fm, x, scalars, rule: QuadratureRule,
                      q=None) -> float:
    """Quadrature estimate of the expected emission log likelihood over the
    variational Gaussian of the subject factors.

    Evaluates the emission at each node ``f = m + diag(s) z_r``, mapping
    ``f`` to natural-scale shared parameters through the factor model
    ``fm`` (task index inferred from ``task`` position in ``fm`` is not
    assumed; pass ``x`` covariates and the task's scalar block explicitly).
    """
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0.0):
        raise InvalidParameterError("variational SDs must be strictly positive")
    task_index = fm.task_index(task) if fm.task_ids else 0

    def emission_at(f):
        theta = factor_mod.subject_params(fm, x, f, task_index)
        shared = tasks_mod.SubjectSharedParams(*theta[:3])
        return tasks_mod.emission_log_likelihood(trial, task, state, shared, scalars, q=q)

    return expect_gaussian(emission_at, m, s, rule)
