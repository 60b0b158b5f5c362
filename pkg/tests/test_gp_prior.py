import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pacoh_lab.environments import TaskDataset
from pacoh_lab.gp_prior import (GpModel, gp_kernel, gp_mll, gp_mll_grad, gp_multi_task_mll_grad,
                                gp_posterior_predict, kernel_matrix)
from pacoh_lab.mlp import init_params
from pacoh_lab.numerics import DimensionMismatch, RngStream

SMALL = GpModel(input_dim=1, mean_hidden=(6,), feature_hidden=(6,), feature_dim=2, noise_var=0.1)


def random_prior(model, seed, scale=1.0):
    r = RngStream(seed)
    phi = np.concatenate([init_params(model.mean_arch, r), init_params(model.feature_arch, r)])
    return model.prior(scale * phi + 0.1 * r.normal(size=model.dim))


def zero_mean_prior(model, feature_scale=0.0, noise_var=None):
    phi = np.zeros(model.dim)
    k = model.mean_arch.n_params
    phi[k:] = feature_scale * RngStream(0).normal(size=model.dim - k)
    p = model.prior(phi)
    if noise_var is not None:
        p.noise_variance = noise_var
    return p


def dense_mll(prior, X, y):
    K = np.array([[gp_kernel(prior, a, b) for b in X] for a in X]) + prior.noise_variance * np.eye(len(y))
    from pacoh_lab.mlp import mlp_forward
    r = y - mlp_forward(prior.mean_arch, prior.mean_net, X)[:, 0]
    return -0.5 * r @ np.linalg.inv(K) @ r - 0.5 * np.log(np.linalg.det(K)) - 0.5 * len(y) * np.log(2 * np.pi)


class TestKernel:
    def test_diagonal_is_half(self):
        p = random_prior(SMALL, 0)
        assert gp_kernel(p, np.array([0.4]), np.array([0.4])) == 0.5

    def test_zero_feature_map_constant(self):
        p = zero_mean_prior(SMALL)
        K = kernel_matrix(p, np.linspace(-2, 2, 5)[:, None])
        np.testing.assert_allclose(K, 0.5)

    def test_direct_formula(self):
        p = random_prior(SMALL, 3)
        from pacoh_lab.mlp import mlp_forward
        a, b = np.array([0.2]), np.array([-1.1])
        d = mlp_forward(p.feature_arch, p.feature_net, a) - mlp_forward(p.feature_arch, p.feature_net, b)
        assert gp_kernel(p, a, b) == pytest.approx(0.5 * np.exp(-d @ d), rel=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_kernel_matrix_symmetric_psd(self, seed):
        p = random_prior(SMALL, seed, scale=3.0)
        X = RngStream(seed + 100).normal(size=(8, 1))
        K = kernel_matrix(p, X)
        np.testing.assert_allclose(K, K.T)
        assert np.linalg.eigvalsh(K).min() >= -1e-9


class TestMll:
    def test_unit_kernel_zero_residual(self):
        p = zero_mean_prior(SMALL, noise_var=0.5)
        assert gp_mll(p, np.zeros((1, 1)), np.zeros(1)) == pytest.approx(-0.9189385332046727, abs=1e-12)

    def test_unit_kernel_unit_residual(self):
        p = zero_mean_prior(SMALL, noise_var=0.5)
        assert gp_mll(p, np.zeros((1, 1)), np.ones(1)) == pytest.approx(-1.4189385332046727, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_formula(self, seed):
        p = random_prior(SMALL, seed)
        r = RngStream(seed + 7)
        X, y = r.normal(size=(3, 1)), r.normal(size=3)
        assert gp_mll(p, X, y) == pytest.approx(dense_mll(p, X, y), abs=1e-8)

    def test_permutation_invariance(self, rng):
        p = random_prior(SMALL, 1)
        X, y = rng.normal(size=(6, 1)), rng.normal(size=6)
        perm = rng.permutation(6)
        assert gp_mll(p, X[perm], y[perm]) == pytest.approx(gp_mll(p, X, y), abs=1e-12)
        _, g1 = gp_mll_grad(p, X, y)
        _, g2 = gp_mll_grad(p, X[perm], y[perm])
        np.testing.assert_allclose(g1, g2, atol=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            gp_mll(random_prior(SMALL, 0), np.zeros((3, 1)), np.zeros(2))


class TestMllGrad:
    def test_stationary_residual(self):
        # zero mean net predicts zero, targets zero, frozen kernel
        p = zero_mean_prior(SMALL)
        _, g = gp_mll_grad(p, np.array([[0.1], [0.5]]), np.zeros(2))
        np.testing.assert_allclose(g[:SMALL.mean_arch.n_params], 0.0, atol=1e-14)

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_differences(self, seed):
        p = random_prior(SMALL, seed)
        r = RngStream(seed + 50)
        X, y = r.normal(size=(4, 1)), r.normal(size=4)
        val, g = gp_mll_grad(p, X, y)
        assert val == pytest.approx(gp_mll(p, X, y), abs=1e-10)
        phi = p.phi
        eps = 1e-5
        fd = np.array([(gp_mll(SMALL.prior(phi + eps * e), X, y) - gp_mll(SMALL.prior(phi - eps * e), X, y))
                       / (2 * eps) for e in np.eye(phi.size)])
        assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4

    def test_multi_task_matches_sum(self, rng):
        p = random_prior(SMALL, 4)
        tasks = [TaskDataset(rng.normal(size=(m, 1)), rng.normal(size=m), i) for i, m in enumerate((2, 5, 3))]
        coeffs = np.array([0.5, 1.0, 2.0])
        vals, g = gp_multi_task_mll_grad(p, tasks, coeffs)
        single = [gp_mll_grad(p, t.inputs, t.targets) for t in tasks]
        np.testing.assert_allclose(vals, [s[0] for s in single], atol=1e-10)
        np.testing.assert_allclose(g, sum(c * s[1] for c, s in zip(coeffs, single)), atol=1e-10)


class TestPosterior:
    def test_empty_context_is_prior(self):
        p = random_prior(SMALL, 2)
        Xs = np.array([[0.0], [1.0]])
        pred = gp_posterior_predict(p, np.zeros((0, 1)), np.zeros(0), Xs)
        from pacoh_lab.mlp import mlp_forward
        np.testing.assert_allclose(pred.mean, mlp_forward(p.mean_arch, p.mean_net, Xs)[:, 0])
        np.testing.assert_allclose(pred.variance, 0.5 + SMALL.noise_var)

    def test_noiseless_interpolation(self):
        p = random_prior(SMALL, 2, scale=2.0)
        p.noise_variance = 1e-12
        X = np.array([[-1.0], [0.3], [1.2]])
        y = np.array([0.4, -0.2, 1.0])
        pred = gp_posterior_predict(p, X, y, X[1:2])
        assert pred.mean[0] == pytest.approx(-0.2, abs=1e-4)

    @pytest.mark.parametrize("seed", range(4))
    def test_dense_conditional(self, seed):
        p = random_prior(SMALL, seed)
        r = RngStream(seed + 9)
        X, y, Xs = r.normal(size=(2, 1)), r.normal(size=2), r.normal(size=(3, 1))
        from pacoh_lab.mlp import mlp_forward
        K = kernel_matrix(p, X) + p.noise_variance * np.eye(2)
        Ks = kernel_matrix(p, Xs, X)
        Kss = kernel_matrix(p, Xs)
        mX = mlp_forward(p.mean_arch, p.mean_net, X)[:, 0]
        ms = mlp_forward(p.mean_arch, p.mean_net, Xs)[:, 0]
        mean = ms + Ks @ np.linalg.solve(K, y - mX)
        var = np.diag(Kss - Ks @ np.linalg.solve(K, Ks.T)) + p.noise_variance
        pred = gp_posterior_predict(p, X, y, Xs)
        np.testing.assert_allclose(pred.mean, mean, atol=1e-8)
        np.testing.assert_allclose(pred.variance, var, atol=1e-8)

    @settings(max_examples=25)
    @given(st.integers(0, 10**6))
    def test_duplicate_point_never_increases_variance(self, seed):
        p = random_prior(SMALL, seed % 97)
        r = RngStream(seed)
        X, y, Xs = r.normal(size=(3, 1)), r.normal(size=3), r.normal(size=(4, 1))
        before = gp_posterior_predict(p, X, y, Xs).variance
        after = gp_posterior_predict(p, np.vstack([X, X[:1]]), np.append(y, y[0]), Xs).variance
        assert np.all(after <= before + 1e-10)

    def test_predictive_variance_positive(self, rng):
        p = random_prior(SMALL, 0)
        pred = gp_posterior_predict(p, rng.normal(size=(5, 1)), rng.normal(size=5), rng.normal(size=(7, 1)))
        assert np.all(pred.variance > 0)


def test_model_round_trip_and_checks():
    m = GpModel(2, (3,), (4, 4), 3, 0.2)
    assert GpModel.from_dict(m.to_dict()) == m
    with pytest.raises(DimensionMismatch):
        m.prior(np.zeros(m.dim + 1))
    with pytest.raises(ValueError):
        GpModel(noise_var=0.0)
