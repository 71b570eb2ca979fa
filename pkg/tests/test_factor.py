"""Link transforms, subject-parameter mapping, and canonicalization."""

import numpy as np
import pytest

from shiftfit.errors import CanonicalizationError, LinkDomainError
from shiftfit.factor import (
    FactorModel,
    canonicalize,
    link_transform,
    linear_predictor,
    subject_params,
)

SHARED_LINKS = ("log", "log", "logit")


def make_model(psi1=None, psi2=None, p_cov=1, d_f=2, rng=None):
    mu1 = np.array([np.log(0.4), np.log(1.5), np.log(1.2)])
    mu2 = np.array([np.log(1.1), np.log(2.0), np.log(0.5)])
    if psi1 is None:
        psi1 = np.array([[0.1, 0.2, -0.1], [0.0, 0.1, -0.1]])
    if psi2 is None:
        psi2 = np.array([[0.1, 0.15, -0.1], [-0.15, -0.1, 0.1]])
    return FactorModel(
        intercepts=[mu1, mu2],
        covar_loads=[np.zeros((p_cov, 3)), np.zeros((p_cov, 3))],
        factor_loads=[np.asarray(psi1, dtype=float), np.asarray(psi2, dtype=float)],
        masks=[np.array([True, True, True])] * 2,
        links=[SHARED_LINKS] * 2,
        task_ids=["prt", "ft"],
    )


def all_predictors(fm, X, F):
    return np.array([
        np.concatenate([linear_predictor(fm, x, f, k) for k in range(fm.n_tasks)])
        for x, f in zip(X, F)
    ])


class TestLinks:
    def test_inverse_of_simulation_intercepts(self):
        mu = np.array([np.log(0.4), np.log(1.5), np.log(1.2)])
        got = link_transform(mu, SHARED_LINKS, "inverse")
        assert got == pytest.approx([0.4, 1.5, 1.2 / 2.2], abs=1e-12)
        assert got[2] == pytest.approx(0.54545, abs=1e-5)

    def test_identity_is_noop(self):
        vals = np.array([-2.0, 0.3, 7.1])
        spec = ("identity", "identity", "identity")
        assert np.array_equal(link_transform(vals, spec, "forward"), vals)
        assert np.array_equal(link_transform(vals, spec, "inverse"), vals)

    def test_forward_inverse_roundtrip(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            x = rng.normal(0, 2, 3)
            back = link_transform(link_transform(x, SHARED_LINKS, "inverse"), SHARED_LINKS, "forward")
            assert np.abs(back - x).max() < 1e-12
        natural = np.array([0.4, 1.5, 0.3])
        round_nat = link_transform(
            link_transform(natural, SHARED_LINKS, "forward"), SHARED_LINKS, "inverse"
        )
        assert np.abs(round_nat - natural).max() < 1e-14

    def test_domain_errors_name_the_component(self):
        with pytest.raises(LinkDomainError, match="component 0"):
            link_transform(np.array([-0.1, 1.0, 0.5]), SHARED_LINKS, "forward")
        with pytest.raises(LinkDomainError, match="component 2"):
            link_transform(np.array([0.1, 1.0, 1.5]), SHARED_LINKS, "forward")

    def test_bad_direction_rejected(self):
        with pytest.raises(LinkDomainError):
            link_transform(np.zeros(3), SHARED_LINKS, "sideways")


class TestSubjectParams:
    def test_zero_loadings_reduce_to_intercept(self):
        fm = make_model(psi1=np.zeros((2, 3)), psi2=np.zeros((2, 3)))
        theta = subject_params(fm, [0.7], np.array([3.1, -2.2]), 0)
        assert theta == pytest.approx([0.4, 1.5, 1.2 / 2.2], abs=1e-12)

    def test_zero_factor_uses_intercept_plus_covariates(self):
        fm = make_model()
        fm.covar_loads[0] = np.array([[0.2, -0.1, 0.3]])
        x = [1.0]
        theta = subject_params(fm, x, np.zeros(2), 0)
        eta = fm.intercepts[0] + fm.covar_loads[0].T @ np.array(x)
        expected = [np.exp(eta[0]), np.exp(eta[1]), 1 / (1 + np.exp(-eta[2]))]
        assert theta == pytest.approx(expected, rel=1e-12)

    def test_mask_keeps_task_specific_components_fixed(self):
        psi = np.array([[0.1, 0.0, -0.1], [0.2, 0.0, 0.1]])
        fm = make_model(psi1=psi, psi2=psi)
        fm.masks[0] = np.array([True, False, True])
        fm.factor_loads[0][:, 1] = 0.0
        fm.validate()
        base = subject_params(fm, [0.0], np.zeros(2), 0)
        moved = subject_params(fm, [0.0], np.array([1.7, -0.9]), 0)
        assert moved[1] == base[1]
        assert moved[0] != base[0] and moved[2] != base[2]


class TestPredictorInvariances:
    def test_orthogonal_rescale_translate_invariance(self):
        rng = np.random.default_rng(9)
        fm = make_model()
        X = rng.normal(0, 1, (12, 1))
        F = rng.normal(0, 1, (12, 2))
        base = all_predictors(fm, X, F)

        o = np.linalg.qr(rng.normal(0, 1, (2, 2)))[0]
        rot = fm.copy()
        for k in range(2):
            rot.factor_loads[k] = o.T @ rot.factor_loads[k]
        assert np.abs(all_predictors(rot, X, F @ o) - base).max() < 1e-12

        d = np.array([2.0, 0.25])
        scl = fm.copy()
        for k in range(2):
            scl.factor_loads[k] = scl.factor_loads[k] * d[:, None]
        assert np.abs(all_predictors(scl, X, F / d) - base).max() < 1e-12

        shift = rng.normal(0, 1, 2)
        tra = fm.copy()
        for k in range(2):
            tra.intercepts[k] = tra.intercepts[k] + tra.factor_loads[k].T @ shift
        assert np.abs(all_predictors(tra, X, F - shift) - base).max() < 1e-12


class TestCanonicalize:
    def canonical_state(self, rng, n=40):
        fm = make_model()
        raw = rng.normal(0, 1, (n, 2))
        raw -= raw.mean(axis=0)
        raw /= raw.std(axis=0, ddof=1)
        fm_c, f_c = canonicalize(fm, raw)
        return fm_c, f_c

    def test_idempotent_on_canonical_inputs(self):
        fm_c, f_c = self.canonical_state(np.random.default_rng(1))
        fm2, f2 = canonicalize(fm_c, f_c)
        assert np.abs(f2 - f_c).max() < 1e-12
        for k in range(2):
            assert np.abs(fm2.factor_loads[k] - fm_c.factor_loads[k]).max() < 1e-12
            assert np.abs(fm2.intercepts[k] - fm_c.intercepts[k]).max() < 1e-12

    def test_orthogonal_transform_reaches_same_canonical_form(self):
        rng = np.random.default_rng(2)
        fm_c, f_c = self.canonical_state(rng)
        o = np.linalg.qr(rng.normal(0, 1, (2, 2)))[0]
        fm_rot = fm_c.copy()
        for k in range(2):
            fm_rot.factor_loads[k] = o.T @ fm_rot.factor_loads[k]
        fm_back, f_back = canonicalize(fm_rot, f_c @ o)
        assert np.abs(f_back - f_c).max() < 1e-9
        for k in range(2):
            assert np.abs(fm_back.factor_loads[k] - fm_c.factor_loads[k]).max() < 1e-9

    def test_linear_predictors_preserved(self):
        rng = np.random.default_rng(3)
        fm = make_model()
        X = rng.normal(0, 1, (25, 1))
        F = rng.normal(0.4, 1.3, (25, 2))
        fm_c, f_c = canonicalize(fm, F)
        assert np.abs(all_predictors(fm_c, X, f_c) - all_predictors(fm, X, F)).max() < 1e-12

    def test_structural_zeros_survive(self):
        rng = np.random.default_rng(4)
        fm = make_model()
        fm.masks[0] = np.array([True, True, False])
        fm.factor_loads[0][:, 2] = 0.0
        fm_c, _ = canonicalize(fm, rng.normal(0, 1, (30, 2)))
        assert np.all(fm_c.factor_loads[0][:, 2] == 0.0)

    def test_rank_deficient_leading_block_raises(self):
        fm = make_model(
            psi1=np.array([[0.1, 0.2, -0.1], [0.2, 0.4, -0.1]]),  # collinear lead columns
            psi2=np.zeros((2, 3)),
        )
        with pytest.raises(CanonicalizationError, match="reorder"):
            canonicalize(fm, np.random.default_rng(0).normal(0, 1, (20, 2)))

    def test_needs_more_subjects_than_factors(self):
        fm = make_model()
        with pytest.raises(CanonicalizationError):
            canonicalize(fm, np.zeros((2, 2)))
