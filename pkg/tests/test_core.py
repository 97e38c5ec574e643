import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mdals.core import (
    NormalEquations,
    SolverError,
    accumulate,
    flatten,
    flatten_outer,
    merge,
    solve_regularized,
    unflatten,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def naive_gauss(a, b):
    """Gaussian elimination with partial pivoting, written out with loops."""
    n = len(b)
    m = [list(map(float, a[i])) + [float(b[i])] for i in range(n)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(m[r][col]))
        m[col], m[piv] = m[piv], m[col]
        for r in range(col + 1, n):
            f = m[r][col] / m[col][col]
            for c in range(col, n + 1):
                m[r][c] -= f * m[col][c]
    x = [0.0] * n
    for r in range(n - 1, -1, -1):
        s = m[r][n] - sum(m[r][c] * x[c] for c in range(r + 1, n))
        x[r] = s / m[r][r]
    return np.array(x)


class TestAccumulate:
    def test_rank_one(self):
        ne = NormalEquations.zeros(2)
        accumulate(ne, [1.0, 0.0], 2.0)
        np.testing.assert_array_equal(ne.gram, [[1, 0], [0, 0]])
        np.testing.assert_array_equal(ne.moment, [2, 0])
        assert ne.count == 1

    def test_symmetry_cancellation(self):
        ne = NormalEquations.zeros(2)
        accumulate(ne, [1.0, 1.0], 1.0)
        accumulate(ne, [1.0, -1.0], 1.0)
        np.testing.assert_array_equal(ne.gram, [[2, 0], [0, 2]])
        np.testing.assert_array_equal(ne.moment, [2, 0])

    def test_matches_double_loop(self, rng):
        feats = rng.standard_normal((50, 4))
        targets = rng.standard_normal(50)
        ne = NormalEquations.zeros(4)
        for f, r in zip(feats, targets):
            accumulate(ne, f, r)
        oracle = [[0.0] * 4 for _ in range(4)]
        for f in feats:
            for a in range(4):
                for b in range(4):
                    oracle[a][b] += f[a] * f[b]
        np.testing.assert_allclose(ne.gram, oracle, rtol=0, atol=1e-10)
        np.testing.assert_allclose(ne.moment, (feats * targets[:, None]).sum(0), atol=1e-10)
        assert np.array_equal(ne.gram, ne.gram.T)

    def test_weight(self):
        ne = NormalEquations.zeros(2)
        accumulate(ne, [1.0, 2.0], 3.0, weight=2.0)
        np.testing.assert_array_equal(ne.gram, [[2, 4], [4, 8]])
        np.testing.assert_array_equal(ne.moment, [6, 12])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            accumulate(NormalEquations.zeros(3), [1.0, 2.0], 1.0)

    def test_nonpositive_weight(self):
        with pytest.raises(ValueError):
            accumulate(NormalEquations.zeros(2), [1.0, 2.0], 1.0, weight=0.0)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            accumulate(NormalEquations.zeros(2), [np.nan, 2.0], 1.0)

    def test_block_matches_rows(self, rng):
        feats = rng.standard_normal((30, 3))
        targets = rng.standard_normal(30)
        a = NormalEquations.zeros(3)
        for f, r in zip(feats, targets):
            accumulate(a, f, r)
        b = NormalEquations.zeros(3).add_block(feats, targets)
        np.testing.assert_allclose(a.gram, b.gram, atol=1e-12)
        np.testing.assert_allclose(a.moment, b.moment, atol=1e-12)
        assert a.count == b.count == 30

    def test_merge_equals_joint(self, rng):
        feats = rng.standard_normal((40, 3))
        targets = rng.standard_normal(40)
        whole = NormalEquations.zeros(3).add_block(feats, targets)
        parts = merge(
            NormalEquations.zeros(3).add_block(feats[:15], targets[:15]),
            NormalEquations.zeros(3).add_block(feats[15:], targets[15:]),
        )
        np.testing.assert_allclose(parts.gram, whole.gram, atol=1e-12)
        assert parts.count == 40

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 20), st.randoms(use_true_random=False))
    def test_order_independent(self, n, k, rnd):
        gen = np.random.default_rng(rnd.randint(0, 2**32 - 1))
        feats = gen.standard_normal((k, n))
        targets = gen.standard_normal(k)
        perm = gen.permutation(k)
        a = NormalEquations.zeros(n).add_block(feats, targets)
        b = NormalEquations.zeros(n)
        for j in perm:
            accumulate(b, feats[j], targets[j])
        scale = 1.0 + np.abs(a.gram).max()
        np.testing.assert_allclose(a.gram, b.gram, rtol=0, atol=1e-10 * scale)


class TestSolveRegularized:
    def test_identity_system(self):
        ne = NormalEquations(np.eye(2), np.array([3.0, 4.0]), 2)
        np.testing.assert_allclose(solve_regularized(ne, 0.0), [3, 4])

    def test_scalar_closed_form(self):
        ne = NormalEquations.zeros(2)
        accumulate(ne, [1.0, 0.0], 2.0)
        np.testing.assert_allclose(solve_regularized(ne, 1.0), [1, 0], atol=1e-15)

    def test_matches_gaussian_elimination(self, rng):
        for _ in range(20):
            m = rng.standard_normal((8, 5))
            gram = m.T @ m + 0.1 * np.eye(5)
            b = rng.standard_normal(5)
            w = solve_regularized(NormalEquations(gram, b, 8), 0.5)
            np.testing.assert_allclose(w, naive_gauss(gram + 0.5 * np.eye(5), b), rtol=0, atol=1e-8)

    def test_singular_without_reg(self):
        ne = NormalEquations(np.zeros((3, 3)), np.ones(3), 0)
        with pytest.raises(SolverError):
            solve_regularized(ne, 0.0)

    def test_nonfinite(self):
        ne = NormalEquations(np.array([[np.inf, 0], [0, 1.0]]), np.ones(2), 1)
        with pytest.raises(SolverError):
            solve_regularized(ne, 1.0)

    def test_semidefinite_with_reg_ok(self):
        # rank deficient gram becomes SPD once regularized
        f = np.array([1.0, 1.0, 1.0])
        ne = NormalEquations(np.outer(f, f), 2 * f, 1)
        w = solve_regularized(ne, 1e-3)
        np.testing.assert_allclose((np.outer(f, f) + 1e-3 * np.eye(3)) @ w, 2 * f, rtol=1e-8)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 15), st.floats(1e-3, 100), st.randoms(use_true_random=False))
    def test_stationary_point(self, n, k, reg, rnd):
        gen = np.random.default_rng(rnd.randint(0, 2**32 - 1))
        feats = gen.standard_normal((k, n))
        targets = gen.standard_normal(k)
        ne = NormalEquations.zeros(n).add_block(feats, targets)
        w = solve_regularized(ne, reg)
        grad = 2 * (ne.gram + reg * np.eye(n)) @ w - 2 * ne.moment
        assert np.linalg.norm(grad) <= 1e-6 * (1 + np.linalg.norm(ne.moment))
        rel = np.linalg.norm((ne.gram + reg * np.eye(n)) @ w - ne.moment) / max(np.linalg.norm(ne.moment), 1e-300)
        assert rel <= 1e-8 or np.linalg.norm(ne.moment) == 0

    def test_brute_force_minimum_small(self, rng):
        # n <= 3: no perturbation on a grid around w lowers the objective
        feats = rng.standard_normal((6, 2))
        targets = rng.standard_normal(6)
        reg = 0.7
        ne = NormalEquations.zeros(2).add_block(feats, targets)
        w = solve_regularized(ne, reg)

        def obj(v):
            return float(np.sum((feats @ v - targets) ** 2) + reg * v @ v)

        best = obj(w)
        for dx in np.linspace(-0.05, 0.05, 11):
            for dy in np.linspace(-0.05, 0.05, 11):
                assert obj(w + [dx, dy]) >= best - 1e-12


class TestFlatten:
    def test_definition(self):
        np.testing.assert_array_equal(flatten_outer([1, 2], [3, 4]), [3, 4, 6, 8])

    def test_zero_row(self):
        np.testing.assert_array_equal(flatten_outer([1, 0], [5, 7]), [5, 7, 0, 0])

    def test_element_formula(self, rng):
        x, y = rng.standard_normal(3), rng.standard_normal(5)
        v = flatten_outer(x, y)
        for k in range(15):
            assert v[k] == x[k // 5] * y[k % 5]

    def test_bilinear_identity(self, rng):
        for _ in range(100):
            n, m = rng.integers(1, 7, size=2)
            x, y = rng.standard_normal(n), rng.standard_normal(m)
            M = rng.standard_normal((n, m))
            lhs = sum(x[a] * M[a, b] * y[b] for a in range(n) for b in range(m))
            assert abs(lhs - flatten(M) @ flatten_outer(x, y)) <= 1e-10

    @given(arrays(np.float64, st.integers(1, 6), elements=finite), arrays(np.float64, st.integers(1, 6), elements=finite), finite)
    def test_scaling(self, x, y, a):
        np.testing.assert_allclose(flatten_outer(a * x, y), a * flatten_outer(x, y), rtol=1e-12, atol=1e-12)

    def test_unflatten_examples(self):
        np.testing.assert_array_equal(unflatten([1, 2, 3, 4], 2, 2), [[1, 2], [3, 4]])
        np.testing.assert_array_equal(unflatten([0, 0, 0], 1, 3), [[0, 0, 0]])

    def test_unflatten_length_mismatch(self):
        with pytest.raises(ValueError):
            unflatten([1, 2, 3], 2, 2)

    @given(st.integers(1, 8), st.integers(1, 8), st.data())
    def test_round_trip(self, rows, cols, data):
        v = data.draw(arrays(np.float64, rows * cols, elements=finite))
        assert np.array_equal(flatten(unflatten(v, rows, cols)), v)
