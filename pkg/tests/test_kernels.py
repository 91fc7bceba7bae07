import numpy as np
import pytest
import scipy.linalg

from spillgp.kernels import (
    InvalidHyperparameter,
    ProductKernelSpec,
    TemporalKernelSpec,
    UnsupportedFamily,
    build_joint_model,
    build_statespace,
    discretize,
    eval_product_kernel,
)

import gp_oracle

SPECS = [
    TemporalKernelSpec("matern12", lengthscale=0.8, variance=1.3),
    TemporalKernelSpec("matern32", lengthscale=1.7, variance=0.6),
    TemporalKernelSpec("matern52", lengthscale=2.5, variance=2.0),
    TemporalKernelSpec("quasiperiodic", lengthscale=1.1, variance=0.9, period=3.0, n_harmonics=6),
    TemporalKernelSpec(
        "sum",
        terms=(
            TemporalKernelSpec("quasiperiodic", lengthscale=1.0, variance=0.5, period=4.0,
                               n_harmonics=4),
            TemporalKernelSpec("matern32", lengthscale=5.0, variance=0.7),
        ),
    ),
]


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.family)
class TestStateSpaceForm:
    def test_lyapunov_residual(self, spec):
        k = build_statespace(spec)
        resid = k.F @ k.Pinf + k.Pinf @ k.F.T + k.L @ k.Qc @ k.L.T
        assert np.linalg.norm(resid) < 1e-8 * np.linalg.norm(k.Pinf)

    def test_stationary_variance_is_kernel_variance(self, spec):
        k = build_statespace(spec)
        var = spec.variance if spec.family != "sum" else sum(t.variance for t in spec.terms)
        assert k.stationary_variance == pytest.approx(var, rel=1e-10)

    def test_autocovariance_matches_closed_form(self, spec):
        k = build_statespace(spec)
        fn = gp_oracle.temporal_kernel_fn(spec)
        for tau in (0.0, 0.1, 1.0, 5.0):
            r = (k.H @ scipy.linalg.expm(k.F * tau) @ k.Pinf @ k.H.T).item()
            assert r == pytest.approx(float(fn(tau)), rel=1e-6, abs=1e-12)

    def test_gram_is_psd(self, spec):
        t = np.linspace(0.0, 10.0, 40)
        fn = gp_oracle.temporal_kernel_fn(spec)
        K = fn(t[:, None] - t[None, :])
        eig = np.linalg.eigvalsh(0.5 * (K + K.T))
        assert eig.min() >= -1e-8 * np.trace(K)


def test_matern12_textbook_matrices():
    ell, var = 2.0, 1.5
    k = build_statespace(TemporalKernelSpec("matern12", lengthscale=ell, variance=var))
    assert k.F == pytest.approx(np.array([[-1.0 / ell]]))
    assert k.L == pytest.approx(np.array([[1.0]]))
    assert k.Qc == pytest.approx(np.array([[2.0 * var / ell]]))
    assert k.H == pytest.approx(np.array([[1.0]]))
    assert k.Pinf == pytest.approx(np.array([[var]]))


def test_matern32_pinf_solves_lyapunov_numerically():
    k = build_statespace(TemporalKernelSpec("matern32", lengthscale=1.0, variance=1.0))
    # Independent route: solve F X + X Fᵀ = −L Qc Lᵀ numerically.
    X = scipy.linalg.solve_continuous_lyapunov(k.F, -k.L @ k.Qc @ k.L.T)
    assert X == pytest.approx(np.diag([1.0, 3.0]), abs=1e-10)
    assert k.Pinf == pytest.approx(X, abs=1e-10)
    assert k.F == pytest.approx(np.array([[0.0, 1.0], [-3.0, -2.0 * np.sqrt(3.0)]]))


class TestDiscretize:
    def test_zero_step_is_identity(self):
        k = build_statespace(TemporalKernelSpec("matern52"))
        A, Q = discretize(k, 0.0)
        assert A == pytest.approx(np.eye(3))
        assert Q == pytest.approx(np.zeros((3, 3)))

    def test_ou_closed_form(self):
        var = 1.7
        k = build_statespace(TemporalKernelSpec("matern12", lengthscale=1.0, variance=var))
        A, Q = discretize(k, 1.0)
        assert A == pytest.approx(np.array([[np.exp(-1.0)]]), rel=1e-12)
        assert Q == pytest.approx(np.array([[var * (1.0 - np.exp(-2.0))]]), rel=1e-12)

    def test_long_step_reaches_stationarity(self):
        k = build_statespace(TemporalKernelSpec("matern32", lengthscale=0.5))
        A, Q = discretize(k, 1e4)
        assert np.abs(A).max() < 1e-12
        assert Q == pytest.approx(k.Pinf, abs=1e-12)

    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.family)
    def test_process_noise_psd(self, spec):
        k = build_statespace(spec)
        _, Q = discretize(k, 0.37)
        assert np.linalg.eigvalsh(Q).min() >= -1e-10 * (np.trace(Q) + 1.0)


def test_sampled_trajectories_match_gram(rng):
    # Empirical covariance over many draws from the discrete model vs the
    # closed-form gram, within 5 standard errors.
    spec = TemporalKernelSpec("matern32", lengthscale=1.5, variance=1.0)
    k = build_statespace(spec)
    times = np.array([0.0, 0.4, 1.1, 2.0])
    n_draws = 10_000
    X = np.empty((n_draws, times.size))
    A_Q = [discretize(k, d) for d in np.diff(times)]
    L0 = np.linalg.cholesky(k.Pinf)
    for i in range(n_draws):
        x = L0 @ rng.standard_normal(k.d)
        X[i, 0] = (k.H @ x).item()
        for j, (A, Q) in enumerate(A_Q):
            w, V = np.linalg.eigh(Q)
            x = A @ x + (V * np.sqrt(np.clip(w, 0, None))) @ rng.standard_normal(k.d)
            X[i, j + 1] = (k.H @ x).item()
    emp = X.T @ X / n_draws
    fn = gp_oracle.temporal_kernel_fn(spec)
    K = fn(times[:, None] - times[None, :])
    se = (K[np.diag_indices_from(K)].max() + np.abs(K)) / np.sqrt(n_draws) * np.sqrt(2.0)
    assert np.all(np.abs(emp - K) < 5 * se)


class TestProductKernel:
    def test_independent_delta_identity(self):
        P = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]])
        spec = ProductKernelSpec("independent", variance=1.3)
        assert eval_product_kernel(spec, P) == pytest.approx(1.3 * np.eye(3))

    def test_independent_detects_exact_duplicates(self):
        P = np.array([[1.0, 2.0], [1.0, 2.0]])
        G = eval_product_kernel(ProductKernelSpec("independent"), P)
        assert G == pytest.approx(np.ones((2, 2)))

    def test_rbf_zero_distance_gives_variance(self):
        P = np.array([[0.5, -0.5], [0.5, -0.5]])
        G = eval_product_kernel(ProductKernelSpec("rbf", lengthscale=2.0, variance=0.7), P)
        assert G == pytest.approx(0.7 * np.ones((2, 2)))

    def test_rbf_unit_distance(self):
        P = np.array([[0.0], [1.0]])
        G = eval_product_kernel(ProductKernelSpec("rbf", lengthscale=1.0, variance=1.0), P)
        assert G[0, 1] == pytest.approx(np.exp(-1.0), rel=1e-12)

    def test_rbf_gram_positive_definite(self, rng):
        P = rng.standard_normal((8, 3))
        G = eval_product_kernel(ProductKernelSpec("rbf", lengthscale=1.0), P)
        assert np.linalg.eigvalsh(G).min() > 0

    def test_rejects_nonfinite_features(self):
        with pytest.raises(InvalidHyperparameter):
            eval_product_kernel(ProductKernelSpec("rbf"), np.array([[np.nan]]))


class TestJointModel:
    def test_single_product_reduces_to_temporal(self):
        spec = TemporalKernelSpec("matern32", lengthscale=1.2, variance=0.8)
        k = build_statespace(spec)
        times = np.array([0.0, 0.5, 1.5])
        model = build_joint_model(k, np.array([[1.0]]), times)
        A, Q = discretize(k, 0.5)
        a0, q0 = model.transition(1)
        assert a0 == pytest.approx(A)
        assert q0 == pytest.approx(Q)
        assert model.Pinf_joint == pytest.approx(k.Pinf)
        assert model.H_joint == pytest.approx(k.H)

    def test_kronecker_identities(self, rng):
        spec = TemporalKernelSpec("matern52", lengthscale=0.9, variance=1.1)
        k = build_statespace(spec)
        P = rng.standard_normal((3, 2))
        gram = eval_product_kernel(ProductKernelSpec("rbf", lengthscale=1.5), P)
        times = np.linspace(0, 2, 5)
        model = build_joint_model(k, gram, times)
        assert model.state_dim == 3 * k.d
        assert model.Pinf_joint == pytest.approx(np.kron(gram, k.Pinf), rel=1e-10)
        # prior covariance of f_n across products equals gram · σ²_t
        C = model.H_joint @ model.Pinf_joint @ model.H_joint.T
        assert C == pytest.approx(gram * spec.variance, rel=1e-10)

    def test_identity_gram_is_block_diagonal(self):
        k = build_statespace(TemporalKernelSpec("matern32"))
        model = build_joint_model(k, np.eye(2), np.array([0.0, 1.0]))
        A, _ = model.transition(1)
        assert A[: k.d, k.d :] == pytest.approx(0.0)
        Q = model.Q_unique[0]
        assert Q[: k.d, k.d :] == pytest.approx(0.0)

    def test_process_noise_psd(self, rng):
        k = build_statespace(TemporalKernelSpec("matern32"))
        P = rng.standard_normal((4, 2))
        gram = eval_product_kernel(ProductKernelSpec("rbf"), P)
        model = build_joint_model(k, gram, np.array([0.0, 0.3, 0.9]))
        for Q in model.Q_unique:
            assert np.linalg.eigvalsh(Q).min() >= -1e-10 * (np.trace(Q) + 1)
        ref = model.Pinf_joint - model.A_unique[0] @ model.Pinf_joint @ model.A_unique[0].T
        assert model.Q_unique[0] == pytest.approx(ref, abs=1e-10)

    def test_rejects_nonmonotone_grid(self):
        k = build_statespace(TemporalKernelSpec("matern12"))
        with pytest.raises(ValueError, match="strictly increasing"):
            build_joint_model(k, np.eye(1), np.array([0.0, 1.0, 0.5]))


class TestValidation:
    @pytest.mark.parametrize("bad", [0.0, -1.0, np.inf])
    def test_rejects_bad_lengthscale(self, bad):
        with pytest.raises(InvalidHyperparameter):
            TemporalKernelSpec("matern32", lengthscale=bad)

    def test_rejects_unknown_family(self):
        with pytest.raises(UnsupportedFamily):
            TemporalKernelSpec("brownian")

    def test_quasiperiodic_needs_period(self):
        with pytest.raises(InvalidHyperparameter):
            TemporalKernelSpec("quasiperiodic", period=None)

    def test_config_round_trip(self):
        for spec in SPECS:
            again = TemporalKernelSpec.from_dict(spec.to_dict())
            assert again == spec

    def test_log_param_round_trip(self):
        spec = SPECS[4]
        theta = spec.log_params()
        again = spec.with_log_params(theta)
        for name in theta:
            assert again.log_params()[name] == pytest.approx(theta[name], rel=1e-12)
        bumped = spec.with_log_params({k: v + 0.1 for k, v in theta.items()})
        assert bumped.terms[1].lengthscale == pytest.approx(5.0 * np.exp(0.1))
