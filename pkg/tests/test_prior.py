import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glip.errors import PreconditionError
from glip.forward import ForwardOperator
from glip.infer import Domain, GlipProblem
from glip.noise import NoiseFamily
from glip.prior import PriorModel, g_values, grad_hess, smoothness_matrix, solve_x_star


def _problem(a, x_true, prior=None, domain=Domain.ALL_REALS):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    prior = prior or PriorModel.gaussian(np.eye(a.shape[1]))
    noise = NoiseFamily.gaussian(1.0, a.shape[0])
    return GlipProblem(noise, ForwardOperator.dense(a), prior, np.asarray(x_true, dtype=float), 0.01, domain=domain)


def _log_cosh_prior():
    return PriorModel.generic(
        lambda x: float(np.sum(np.log(np.cosh(x)))),
        lambda x: np.tanh(x),
        lambda x: np.diag(1 / np.cosh(x) ** 2),
    )


class TestGradHess:
    def test_identity_quadratic(self):
        g, grad, hess = grad_hess(PriorModel.gaussian(np.eye(2)), [3.0, 4.0])
        assert g == 12.5
        np.testing.assert_array_equal(grad, [3.0, 4.0])
        np.testing.assert_array_equal(hess, np.eye(2))

    def test_diagonal_quadratic(self):
        g, grad, _ = grad_hess(PriorModel.gaussian(np.diag([1.0, 4.0])), [1.0, 1.0])
        assert g == 2.5
        np.testing.assert_array_equal(grad, [1.0, 4.0])

    def test_generic_gradient_finite_differences(self):
        prior, h = _log_cosh_prior(), 1e-6
        x = np.array([0.3, -1.2, 2.0])
        _, grad, hess = grad_hess(prior, x)
        fd = [(prior.g(x + h * e) - prior.g(x - h * e)) / (2 * h) for e in np.eye(3)]
        np.testing.assert_allclose(grad, fd, rtol=1e-6)
        fdh = np.array([(prior.grad(x + h * e) - prior.grad(x - h * e)) / (2 * h) for e in np.eye(3)])
        np.testing.assert_allclose(hess, fdh, rtol=1e-6, atol=1e-9)

    def test_batched_values(self):
        b = np.array([[2.0, 0.5], [0.5, 1.0]])
        prior = PriorModel.gaussian(b, mean=[1.0, -1.0])
        xs = np.random.default_rng(0).normal(size=(7, 2))
        np.testing.assert_allclose(g_values(prior, xs), [grad_hess(prior, x)[0] for x in xs], rtol=1e-13)

    def test_rejects_bad_precision(self):
        with pytest.raises(ValueError):
            PriorModel.gaussian([[1.0, 2.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            PriorModel.gaussian(np.diag([1.0, -1.0]))

    def test_sobolev_config(self):
        prior = PriorModel.from_config({"precision": "sobolev", "kappa": 1.0}, 3)
        np.testing.assert_allclose(np.diag(prior.precision), [1, 8, 27])


class TestSmoothnessMatrix:
    def test_gaussian_is_zero(self):
        np.testing.assert_array_equal(smoothness_matrix(PriorModel.gaussian(np.eye(2)), np.zeros(2), 0.1), 0)

    def test_metadata_wins(self):
        prior = PriorModel.generic(lambda x: 0.0, lambda x: 0 * x, lambda x: np.zeros((2, 2)), c_g=np.eye(2) * 3)
        np.testing.assert_array_equal(smoothness_matrix(prior, np.zeros(2), 0.1), 3 * np.eye(2))

    def test_heuristic_bounds_hessian_change(self):
        # |sech^2'| <= 4/(3 sqrt 3), so the estimate cannot exceed it
        c = smoothness_matrix(_log_cosh_prior(), np.zeros(2), 0.5, stream=np.random.default_rng(0))
        assert 0 < c[0, 0] <= 4 / (3 * np.sqrt(3)) + 1e-12


class TestSolveXStar:
    def test_full_rank_pins_truth(self):
        a = np.random.default_rng(2).normal(size=(5, 3))
        star = solve_x_star(_problem(a, [1.0, -2.0, 0.5]))
        assert np.linalg.norm(star.x_star - [1.0, -2.0, 0.5]) <= 1e-8
        assert star.interior

    def test_symmetric_minimum_norm(self):
        star = solve_x_star(_problem([[1.0, 1.0]], [1.0, 0.0]))
        np.testing.assert_allclose(star.x_star, [0.5, 0.5], atol=1e-14)

    def test_kkt_matches_projected_gradient(self):
        g = np.random.default_rng(4)
        a = g.normal(size=(2, 4))
        l = g.normal(size=(4, 4))
        prior = PriorModel.gaussian(l @ l.T + np.eye(4), mean=g.normal(size=4))
        x_true = g.normal(size=4)
        star = solve_x_star(_problem(a, x_true, prior))
        # projected gradient descent on the affine set
        proj = np.eye(4) - np.linalg.pinv(a) @ a
        x = x_true.copy()
        step = 1 / np.linalg.eigvalsh(prior.precision).max()
        for _ in range(20000):
            x = x - step * proj @ grad_hess(prior, x)[1]
        np.testing.assert_allclose(star.x_star, x, atol=1e-8)

    def test_generic_prior(self):
        star = solve_x_star(_problem([[1.0, 1.0]], [2.0, 0.0], _log_cosh_prior()))
        np.testing.assert_allclose(star.x_star, [1.0, 1.0], atol=1e-9)

    def test_singular_b11(self):
        with pytest.raises(PreconditionError, match="B11"):
            solve_x_star(_problem([[1.0, 0.0]], [1.0, 1.0], PriorModel.gaussian(np.diag([1.0, 0.0]))))

    def test_improper_prior_allowed_when_b11_definite(self):
        star = solve_x_star(_problem([[1.0, 0.0]], [1.0, 1.0], PriorModel.gaussian(np.diag([0.0, 1.0]))))
        np.testing.assert_allclose(star.x_star, [1.0, 0.0], atol=1e-14)

    def test_orthant_constraint(self):
        # unconstrained minimiser (1.5, -0.5) leaves the orthant
        star = solve_x_star(_problem([[1.0, -1.0]], [2.0, 0.0], domain=Domain.NONNEG))
        np.testing.assert_allclose(star.x_star, [2.0, 0.0], atol=1e-12)
        assert not star.interior and star.active == (1,)

    def test_boundary_truth(self):
        star = solve_x_star(_problem([[1.0, 0.5], [0.3, 1.0]], [0.0, 0.0], domain=Domain.NONNEG))
        np.testing.assert_array_equal(star.x_star, 0.0)
        assert not star.interior

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), rank=st.integers(1, 3))
    def test_minimises_over_feasible_set(self, seed, rank):
        g = np.random.default_rng(seed)
        a = g.normal(size=(rank, 4))
        l = g.normal(size=(4, 4))
        prior = PriorModel.gaussian(l @ l.T + 0.1 * np.eye(4))
        x_true = g.normal(size=4)
        star = solve_x_star(_problem(a, x_true, prior))
        null = np.linalg.svd(a)[2][rank:].T
        xs = star.x_star + (g.normal(size=(200, null.shape[1])) * 3) @ null.T
        gstar = grad_hess(prior, star.x_star)[0]
        assert np.all(g_values(prior, xs) - gstar >= -1e-9)
        proj = np.eye(4) - np.linalg.pinv(a) @ a
        assert np.linalg.norm(proj @ grad_hess(prior, star.x_star)[1]) <= 1e-9 * max(1.0, np.abs(prior.precision).max())
