import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from glip.errors import DomainError
from glip.forward import (
    ForwardOperator,
    LinkMap,
    apply,
    build_grid,
    link_apply,
    link_derivative,
    link_jacobian,
    link_second,
    rank_split,
)

matrices = st.tuples(st.integers(1, 5), st.integers(1, 5)).flatmap(
    lambda s: arrays(float, s, elements=st.floats(-3, 3, allow_subnormal=False))
)


class TestApply:
    def test_identity(self):
        np.testing.assert_array_equal(apply(ForwardOperator.dense(np.eye(3)), [1, 2, 3]), [1, 2, 3])

    def test_spectral(self):
        np.testing.assert_allclose(apply(ForwardOperator.spectral(1.0, 3), np.ones(3)), [1, 0.5, 1 / 3], rtol=1e-15)

    def test_against_naive_product(self):
        g = np.random.default_rng(1)
        a, x = g.normal(size=(4, 6)), g.normal(size=6)
        naive = [sum(a[i, j] * x[j] for j in range(6)) for i in range(4)]
        np.testing.assert_allclose(apply(ForwardOperator.dense(a), x), naive, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            apply(ForwardOperator.dense(np.ones((2, 3))), np.ones(2))

    def test_batched(self):
        a = np.arange(6.0).reshape(2, 3)
        xs = np.arange(12.0).reshape(4, 3)
        np.testing.assert_allclose(apply(ForwardOperator.dense(a), xs), xs @ a.T)


class TestRankSplit:
    def test_full_rank_identity(self):
        p0, p1, proj, _ = rank_split(ForwardOperator.dense(np.eye(2)))
        assert (p0, p1) == (2, 0)
        np.testing.assert_allclose(proj, np.eye(2), atol=1e-15)

    def test_row_vector(self):
        p0, p1, proj, u = rank_split(ForwardOperator.dense([[1.0, 1.0]]))
        assert (p0, p1) == (1, 1)
        np.testing.assert_allclose(proj, np.full((2, 2), 0.5), atol=1e-15)
        np.testing.assert_allclose(u @ u.T, np.eye(2), atol=1e-14)

    def test_rank_one_outer_product(self):
        v = np.array([1.0, -2.0, 0.5])
        assert rank_split(ForwardOperator.dense(np.outer(v, [3.0, 1.0, 1.0])))[0] == 1

    def test_zero_matrix(self):
        p0, p1, proj, _ = rank_split(ForwardOperator.dense(np.zeros((2, 3))))
        assert (p0, p1) == (0, 3)
        np.testing.assert_array_equal(proj, 0.0)

    def test_custom_tolerance(self):
        op = ForwardOperator.dense(np.diag([1.0, 1e-6]))
        assert rank_split(op)[0] == 2
        assert rank_split(op, 1e-4)[0] == 1

    @settings(max_examples=60)
    @given(a=matrices, seed=st.integers(0, 2**31))
    def test_projector_fixes_row_space(self, a, seed):
        op = ForwardOperator.dense(a)
        v = np.random.default_rng(seed).normal(size=op.n)
        x = op.matrix.T @ v
        assert np.linalg.norm(op.projector @ x - x) <= 1e-8 * max(1.0, np.linalg.norm(x))
        np.testing.assert_allclose(op.projector @ op.projector, op.projector, atol=1e-10)

    @settings(max_examples=40)
    @given(a=matrices)
    def test_norm_matches_power_iteration(self, a):
        op = ForwardOperator.dense(a)
        m = op.matrix.T @ op.matrix
        x = np.ones(op.p) + np.arange(op.p) * 1e-3
        for _ in range(2000):
            nx = np.linalg.norm(m @ x)
            if nx == 0:
                break
            x = m @ x / nx
        power = np.sqrt(np.linalg.norm(m @ x)) if nx else 0.0
        assert op.norm == pytest.approx(power, rel=1e-8, abs=1e-12)

    @settings(max_examples=40)
    @given(a=matrices, seed=st.integers(0, 2**31))
    def test_interlace_lower_bound(self, a, seed):
        # smallest positive eigenvalue of A^T D A is at least min positive D_i times that of A^T A
        g = np.random.default_rng(seed)
        d = g.uniform(0.1, 3.0, size=a.shape[0])
        def min_pos(m):
            w = np.linalg.eigvalsh(m)
            w = w[w > 1e-9 * max(1.0, w.max())]
            return w.min() if w.size else None
        base = min_pos(a.T @ a)
        if base is None:
            return
        assert min_pos(a.T @ np.diag(d) @ a) >= d.min() * base * (1 - 1e-8)


class TestBuildGrid:
    def test_volterra_two_points(self):
        np.testing.assert_array_equal(build_grid("volterra", 2, 2).matrix, [[0.5, 0.0], [0.5, 0.5]])

    @pytest.mark.parametrize("kernel", ["volterra", "gaussian_bump"])
    def test_single_cell(self, kernel):
        op = build_grid(kernel, 1, 1)
        assert op.matrix.shape == (1, 1)
        expect = 1.0 if kernel == "volterra" else 1 / (np.sqrt(2 * np.pi) * 0.05)
        assert op.matrix[0, 0] == pytest.approx(expect)

    def test_bump_interior_rows(self):
        sums = build_grid("gaussian_bump", 50, 400).matrix.sum(axis=1)
        interior = sums[10:40]
        assert np.ptp(interior) < 1e-3
        assert interior.mean() == pytest.approx(1.0, abs=1e-2)

    def test_unknown_kernel(self):
        with pytest.raises(ValueError, match="unknown kernel"):
            build_grid("radon", 3, 3)


class TestLinks:
    def test_identity(self):
        link = LinkMap.identity()
        np.testing.assert_array_equal(link_apply(link, [3.0, -1.0]), [3.0, -1.0])
        np.testing.assert_array_equal(link_jacobian(link, [3.0, -1.0]), np.eye(2))
        np.testing.assert_array_equal(link_second(link, [3.0, -1.0]), 0.0)

    def test_exp_at_origin(self):
        link = LinkMap.exp()
        assert link_apply(link, [0.0])[0] == 1.0
        assert link_derivative(link, [0.0])[0] == 1.0

    def test_exp_derivatives_match_finite_differences(self):
        link, h = LinkMap.exp(), 1e-5
        mu = np.linspace(-2, 2, 9)
        fd = (link_apply(link, mu + h) - link_apply(link, mu - h)) / (2 * h)
        np.testing.assert_allclose(link_derivative(link, mu), fd, rtol=1e-6)
        fd2 = (link_derivative(link, mu + h) - link_derivative(link, mu - h)) / (2 * h)
        np.testing.assert_allclose(link_second(link, mu), fd2, rtol=1e-6)

    def test_domain_violation(self):
        link = LinkMap("sqrt", np.sqrt, np.square, lambda m: 0.5 / np.sqrt(m), None, lambda m: m > 0)
        with pytest.raises(DomainError):
            link_apply(link, [-1.0])

    @pytest.mark.parametrize("kind", ["identity", "exp"])
    def test_round_trip(self, kind):
        assert LinkMap.from_dict(LinkMap.from_dict({"kind": kind}).to_dict()).name == kind


class TestSerialization:
    @pytest.mark.parametrize(
        "op",
        [
            ForwardOperator.dense([[1.0, 2.0], [0.5, -1.0]]),
            ForwardOperator.spectral(1.5, 7),
            build_grid("volterra", 4, 3),
        ],
        ids=["dense", "spectral", "grid"],
    )
    def test_json_round_trip(self, op):
        again = ForwardOperator.from_json(op.to_json())
        np.testing.assert_array_equal(again.matrix, op.matrix)
        assert again.provenance == op.provenance

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ForwardOperator.from_dict({"kind": "radon"})

    def test_immutable(self):
        op = ForwardOperator.dense(np.eye(2))
        with pytest.raises(ValueError):
            op.matrix[0, 0] = 5.0
