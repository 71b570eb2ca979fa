"""Latent-factor layer mapping covariates and subject factors to natural-scale
subject/task parameters through componentwise links, plus the post-hoc
canonicalization that fixes the rotation / scale / location indeterminacy of
the loadings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CanonicalizationError, LinkDomainError

__all__ = [
    "LINKS",
    "LinkSpec",
    "FactorModel",
    "link_transform",
    "subject_params",
    "linear_predictor",
    "canonicalize",
]

LINKS = ("log", "logit", "identity")

#: A link specification is a tuple of link names, one per component.
LinkSpec = tuple


def _forward_one(value: float, link: str, component: int) -> float:
    if link == "identity":
        return value
    if link == "log":
        if value <= 0.0:
            raise LinkDomainError(f"component {component}: log link requires value > 0, got {value}")
        return np.log(value)
    if link == "logit":
        if not 0.0 < value < 1.0:
            raise LinkDomainError(
                f"component {component}: logit link requires value in (0, 1), got {value}"
            )
        return np.log(value) - np.log1p(-value)
    raise LinkDomainError(f"component {component}: unknown link {link!r}")


def _inverse_one(value: float, link: str, component: int) -> float:
    if link == "identity":
        return value
    if link == "log":
        return np.exp(value)
    if link == "logit":
        # Stable two-sided sigmoid.
        if value >= 0.0:
            return 1.0 / (1.0 + np.exp(-value))
        e = np.exp(value)
        return e / (1.0 + e)
    raise LinkDomainError(f"component {component}: unknown link {link!r}")


def link_transform(values, spec: LinkSpec, direction: str):
    """Apply the componentwise link (``direction='forward'``) or its inverse.

    ``values`` has one entry per component of ``spec`` along its last axis.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != len(spec):
        raise LinkDomainError(f"expected {len(spec)} components, got {values.shape[-1]}")
    if direction not in ("forward", "inverse"):
        raise LinkDomainError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    fn = _forward_one if direction == "forward" else _inverse_one
    out = np.empty_like(values)
    for c, link in enumerate(spec):
        col = values[..., c]
        out[..., c] = np.reshape(
            [fn(float(v), link, c) for v in np.atleast_1d(col).ravel()], np.shape(col)
        )
    return out


def sigmoid(x):
    """Numerically stable logistic function for arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def inverse_links_array(values: np.ndarray, spec: LinkSpec) -> np.ndarray:
    """Vectorized link inverse over the last axis (no domain checks)."""
    out = np.empty_like(values)
    for c, link in enumerate(spec):
        col = values[..., c]
        if link == "identity":
            out[..., c] = col
        elif link == "log":
            out[..., c] = np.exp(col)
        else:
            out[..., c] = sigmoid(col)
    return out


@dataclass
class FactorModel:
    """Per-task intercepts, covariate loadings, and factor loadings.

    Parameters for subject i in task k live on the link scale as
    ``mu_k + gamma_k.T @ x_i + psi_k.T @ f_i``; columns whose ``mask`` entry
    is False are task-specific and carry structurally zero factor loadings.
    """

    intercepts: list = field(default_factory=list)     # per task: (d_k,)
    covar_loads: list = field(default_factory=list)    # per task: (p, d_k)
    factor_loads: list = field(default_factory=list)   # per task: (d_f, d_k)
    masks: list = field(default_factory=list)          # per task: (d_k,) bool
    links: list = field(default_factory=list)          # per task: LinkSpec
    task_ids: list = field(default_factory=list)       # per task: str

    @property
    def n_tasks(self) -> int:
        return len(self.intercepts)

    def task_index(self, task_id: str) -> int:
        return list(self.task_ids).index(task_id)

    @property
    def d_f(self) -> int:
        return int(self.factor_loads[0].shape[0])

    def validate(self) -> None:
        for k in range(self.n_tasks):
            mask = np.asarray(self.masks[k], dtype=bool)
            psi = self.factor_loads[k]
            if psi.shape[0] != self.d_f:
                raise CanonicalizationError("inconsistent factor dimension across tasks")
            off = psi[:, ~mask]
            if off.size and np.any(off != 0.0):
                raise CanonicalizationError(
                    f"task {k}: factor loadings on task-specific components must be exactly zero"
                )

    def copy(self) -> "FactorModel":
        return FactorModel(
            [m.copy() for m in self.intercepts],
            [g.copy() for g in self.covar_loads],
            [p.copy() for p in self.factor_loads],
            [np.asarray(m, dtype=bool).copy() for m in self.masks],
            list(self.links),
            list(self.task_ids),
        )


def linear_predictor(fm: FactorModel, x, f, task: int) -> np.ndarray:
    """Link-scale parameter vector ``mu + gamma.T x + psi.T f`` for one task."""
    x = np.asarray(x, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return fm.intercepts[task] + fm.covar_loads[task].T @ x + fm.factor_loads[task].T @ f


def subject_params(fm: FactorModel, x, f, task: int) -> np.ndarray:
    """Natural-scale subject parameters for one task."""
    eta = linear_predictor(fm, x, f, task)
    return np.array(
        [_inverse_one(float(eta[c]), link, c) for c, link in enumerate(fm.links[task])]
    )


def _stacked_shared_columns(fm: FactorModel) -> np.ndarray:
    cols = []
    for k in range(fm.n_tasks):
        mask = np.asarray(fm.masks[k], dtype=bool)
        cols.append(fm.factor_loads[k][:, mask])
    return np.concatenate(cols, axis=1)


def canonicalize(fm: FactorModel, factors: np.ndarray):
    """Center the factors, rotate the loadings to a triangular frame, and
    rescale factor coordinates to unit sample SD.

    Steps, each preserving every subject's linear predictor exactly:

    1. center: ``mu_k += psi_k.T @ fbar``, ``f_i -= fbar``;
    2. rotate: with ``B`` the first ``d_f`` stacked shared loading columns
       and ``B = Q R`` (diag ``R`` > 0), ``psi_k <- Q.T psi_k``,
       ``f_i <- Q.T f_i``;
    3. rescale: each factor coordinate is divided by its sample SD and the
       matching loading row multiplied by it.

    Returns a new ``(FactorModel, factors)`` pair; inputs are not modified.
    """
    factors = np.asarray(factors, dtype=np.float64)
    n, d_f = factors.shape
    if d_f != fm.d_f:
        raise CanonicalizationError(f"factors have dimension {d_f}, loadings expect {fm.d_f}")
    if n <= d_f:
        raise CanonicalizationError(f"need more subjects ({n}) than factors ({d_f})")
    out = fm.copy()

    # 1. center
    fbar = factors.mean(axis=0)
    new_factors = factors - fbar
    for k in range(out.n_tasks):
        out.intercepts[k] = out.intercepts[k] + out.factor_loads[k].T @ fbar

    # 2. rotate
    stacked = _stacked_shared_columns(out)
    if stacked.shape[1] < d_f:
        raise CanonicalizationError(
            f"only {stacked.shape[1]} shared loading columns for {d_f} factors"
        )
    lead = stacked[:, :d_f]
    q, r = np.linalg.qr(lead)
    diag = np.diag(r)
    scale = np.abs(diag).max() if diag.size else 0.0
    if scale == 0.0 or np.any(np.abs(diag) < 1e-10 * scale):
        raise CanonicalizationError(
            "leading block of the stacked shared loadings is rank deficient; "
            "reorder the shared components so the first columns are independent"
        )
    signs = np.sign(diag)
    q = q * signs[np.newaxis, :]
    for k in range(out.n_tasks):
        out.factor_loads[k] = q.T @ out.factor_loads[k]
    new_factors = new_factors @ q

    # 3. rescale
    sds = new_factors.std(axis=0, ddof=1)
    if np.any(sds < 1e-12):
        raise CanonicalizationError("a factor coordinate has (near) zero sample variance")
    new_factors = new_factors / sds
    for k in range(out.n_tasks):
        out.factor_loads[k] = out.factor_loads[k] * sds[:, np.newaxis]

    # Structural zeros survive: rotation and scaling act on rows, and
    # task-specific columns were zero in every row.
    for k in range(out.n_tasks):
        mask = np.asarray(out.masks[k], dtype=bool)
        out.factor_loads[k][:, ~mask] = 0.0
    out.validate()
    return out, new_factors
