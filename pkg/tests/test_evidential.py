import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from monoloc import evidential as ev
from conftest import central_diff, rel_err


def random_alpha(rng, n=3):
    return 1.0 + rng.gamma(1.5, 4.0, size=n)


def random_nig(rng):
    return ev.NigParams(gamma=rng.normal(scale=5.0),
                        upsilon=rng.uniform(0.2, 5.0),
                        alpha=rng.uniform(1.2, 6.0),
                        beta=rng.uniform(0.2, 5.0))


class TestDirichlet:
    def test_uniform_alpha_gives_uniform_prob(self):
        np.testing.assert_allclose(ev.dirichlet_expected_prob(np.ones(3)), np.full(3, 1 / 3))

    def test_ratio(self):
        np.testing.assert_allclose(ev.dirichlet_expected_prob(np.array([9.0, 1.0])), [0.9, 0.1])

    def test_normalization(self, rng):
        for _ in range(200):
            p = ev.dirichlet_expected_prob(random_alpha(rng, rng.integers(2, 8)))
            assert abs(p.sum() - 1.0) < 1e-12
            assert np.all(p > 0)

    def test_uncertainty_vacuous(self):
        assert ev.dirichlet_uncertainty(np.array([1.0, 1.0])) == pytest.approx(1.0)

    def test_uncertainty_arithmetic(self):
        assert ev.dirichlet_uncertainty(np.array([99.0, 1.0])) == pytest.approx(0.02)

    def test_uncertainty_monotone_in_evidence(self):
        us = [ev.dirichlet_uncertainty(np.array([a1, 1.0])) for a1 in np.linspace(1, 100, 200)]
        assert all(b < a for a, b in zip(us, us[1:]))
        assert 0 < min(us) and max(us) == 1.0

    def test_params_invariants(self):
        with pytest.raises(ValueError):
            ev.DirichletParams(np.array([0.5, 2.0]))
        d = ev.DirichletParams(np.array([2.0, 3.0]))
        assert d.num_classes == 2


class TestDirichletLoss:
    def test_confident_correct_prediction_vanishes(self):
        alpha = np.array([1e6, 1.0, 1.0])
        y = np.array([1.0, 0.0, 0.0])
        assert ev.dirichlet_loss(alpha, y, 0.0) < 1e-3

    def test_kl_zero_at_uniform(self):
        # alpha = 1 everywhere makes alpha~ the uniform Dirichlet
        alpha = np.ones(3)
        y = np.array([0.0, 1.0, 0.0])
        assert ev.dirichlet_loss(alpha, y, 0.7) == pytest.approx(ev.dirichlet_loss(alpha, y, 0.0))

    def test_lambda_zero_recovers_sum_of_squares(self, rng):
        alpha = random_alpha(rng)
        y = np.eye(3)[1]
        p = ev.dirichlet_expected_prob(alpha)
        s = alpha.sum()
        expected = float(((y - p) ** 2).sum() + (p * (1 - p)).sum() / (s + 1))
        assert ev.dirichlet_loss(alpha, y, 0.0) == pytest.approx(expected, rel=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        for _ in range(300):
            n = int(rng.integers(2, 6))
            alpha = random_alpha(rng, n)
            y = np.eye(n)[rng.integers(0, n)]
            lam = rng.uniform(0.0, 1.0)
            grad = ev.dirichlet_loss_grad(alpha, y, lam)
            fd = central_diff(lambda a: ev.dirichlet_loss(a, y, lam), alpha, h=1e-5)
            assert rel_err(grad, fd) < 1e-5

    def test_raster_loss_equals_per_pixel_sum(self, rng):
        h, w, n = 4, 5, 3
        alpha = 1.0 + rng.gamma(1.5, 4.0, size=(h, w, n))
        labels = rng.integers(0, n, size=(h, w))
        raster = ev.DirichletRaster(alpha)
        total = ev.semantic_loss(raster, labels, 0.3)
        looped = sum(float(ev.dirichlet_loss(alpha[r, c], np.eye(n)[labels[r, c]], 0.3))
                     for r in range(h) for c in range(w))
        assert total == pytest.approx(looped, rel=1e-12)


class TestAnnealing:
    def test_schedule(self):
        assert ev.annealing_coefficient(0, 100) == 0.0
        assert ev.annealing_coefficient(200, 100) == pytest.approx(0.5)
        assert ev.annealing_coefficient(800, 100) == 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            ev.annealing_coefficient(1, 0)
        with pytest.raises(ValueError):
            ev.annealing_coefficient(-1, 10)


class TestNig:
    def test_uncertainty_formulas(self):
        ua, ue = ev.nig_uncertainties(ev.NigParams(2.0, 1.0, 2.0, 3.0))
        assert ua == pytest.approx(3.0)
        assert ue == pytest.approx(3.0)

    def test_epistemic_vanishes_with_upsilon(self):
        _, ue = ev.nig_uncertainties(ev.NigParams(0.0, 1e9, 2.0, 3.0))
        assert ue < 1e-8

    def test_aleatoric_pole_at_alpha_one(self):
        ua, _ = ev.nig_uncertainties(ev.NigParams(0.0, 1.0, 1.0 + 1e-9, 3.0))
        assert ua > 1e8

    def test_invariants_enforced(self):
        for bad in [dict(upsilon=-1.0), dict(alpha=1.0), dict(beta=0.0)]:
            kw = dict(gamma=0.0, upsilon=1.0, alpha=2.0, beta=1.0)
            kw.update(bad)
            with pytest.raises(ValueError):
                ev.NigParams(**kw)

    def test_nll_minimized_at_observation(self, rng):
        for _ in range(50):
            n = random_nig(rng)
            y = rng.normal(scale=5.0)
            res = minimize_scalar(
                lambda gamma: float(ev.nig_nll(ev.NigParams(gamma, n.upsilon, n.alpha, n.beta), y)),
                bracket=(y - 10, y, y + 10), method="golden",
                options={"xtol": 1e-10})
            assert abs(res.x - y) < 1e-6
            assert ev.nig_nll(ev.NigParams(y, n.upsilon, n.alpha, n.beta), y) < \
                ev.nig_nll(ev.NigParams(y + 1.0, n.upsilon, n.alpha, n.beta), y)

    def test_nll_translation_invariance(self, rng):
        n = random_nig(rng)
        y = rng.normal()
        for shift in (-3.7, 12.9):
            shifted = ev.NigParams(n.gamma + shift, n.upsilon, n.alpha, n.beta)
            assert float(ev.nig_nll(shifted, y + shift)) == pytest.approx(
                float(ev.nig_nll(n, y)), rel=1e-12)

    def test_nll_gradient_matches_finite_differences(self, rng):
        for _ in range(300):
            n = random_nig(rng)
            y = rng.normal(scale=5.0)
            x0 = np.array([n.gamma, n.upsilon, n.alpha, n.beta])
            grad = ev.nig_nll_grad(n, y)
            fd = central_diff(lambda x: float(ev.nig_nll(tuple(x), y)), x0, h=1e-5)
            assert rel_err(grad, fd) < 1e-5

    def test_regularizer(self, rng):
        assert ev.nig_regularizer(ev.NigParams(2.0, 1.0, 2.0, 1.0), 2.0) == 0.0
        assert ev.nig_regularizer(ev.NigParams(1.0, 1.0, 2.0, 1.0), 2.0) == pytest.approx(4.0)
        n = random_nig(rng)
        y = n.gamma + 1.3
        one = float(ev.nig_regularizer(n, y))
        two = float(ev.nig_regularizer(n, n.gamma + 2.6))
        assert two == pytest.approx(2 * one, rel=1e-12)

    def test_regularizer_gradient(self, rng):
        for _ in range(100):
            n = random_nig(rng)
            y = n.gamma + rng.uniform(0.5, 5.0) * rng.choice([-1, 1])
            x0 = np.array([n.gamma, n.upsilon, n.alpha, n.beta])
            grad = ev.nig_regularizer_grad(n, y)
            fd = central_diff(lambda x: float(ev.nig_regularizer(tuple(x), y)), x0, h=1e-5)
            assert rel_err(grad, fd) < 1e-5


class TestDetectionLoss:
    def _box(self, offset=0.0):
        target = (10.0, 20.0, 30.0, 40.0)
        edges = tuple(ev.NigParams(t + offset, 1.0, 2.0, 1.0) for t in target)
        return edges, target

    def test_empty(self):
        assert ev.detection_loss([]) == 0.0

    def test_perfect_mean_has_zero_regularizer(self):
        edges, target = self._box()
        loss = ev.detection_loss([(edges, target)], lam_det=0.04)
        nll_only = sum(float(ev.nig_nll(p, t)) for p, t in zip(edges, target))
        assert loss == pytest.approx(nll_only, rel=1e-12)

    def test_lambda_scaling(self):
        edges, target = self._box(offset=2.0)
        reg = sum(float(ev.nig_regularizer(p, t)) for p, t in zip(edges, target))
        diff = ev.detection_loss([(edges, target)], 0.04) - ev.detection_loss([(edges, target)], 0.01)
        assert diff == pytest.approx(0.03 * reg, rel=1e-10)


class TestCombinedLoss:
    def test_values(self):
        assert ev.combined_loss(1.0, 0.0) == 1.0
        assert ev.combined_loss(0.0, 1.0) == 15.0
        assert ev.combined_loss(2.0, 3.0) == 47.0
