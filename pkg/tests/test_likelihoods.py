import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from spillgp.diffusion import DiffusionConfig, build_graph
from spillgp.likelihoods import (
    LOG2PI,
    LikelihoodParams,
    QuadratureSpec,
    diffusion_tobit_logpdf,
    expected_loglik,
    expected_loglik_panel,
    tobit_logpdf,
)


def _mc_oracle_diffusion_tobit(mean, cov, y, u, c, sigma2, T, n_diff, n_samples, seed):
    """Monte Carlo estimate of E_q[log p] written independently of the
    package internals (own transfer loop and own Tobit terms)."""
    rng = np.random.default_rng(seed)
    n_p = mean.size
    L = np.linalg.cholesky(cov)
    F = mean + rng.standard_normal((n_samples, n_p)) @ L.T
    m = T.shape[0]
    X = np.concatenate([F, np.zeros((n_samples, m - n_p))], axis=1)
    up = np.concatenate([u, [np.inf] * (m - n_p)])
    for _ in range(n_diff):
        excess = np.clip(X - up, 0.0, None)
        X = X + excess @ (T - np.eye(m))
    D = np.clip(X[:, :n_p] - F, 0.0, None)
    mu = F + D
    sigma = np.sqrt(sigma2)
    dens = norm.logpdf(y, loc=mu, scale=sigma)
    surv = norm.logsf(y, loc=mu, scale=sigma)
    g = np.sum(np.where(c, surv, dens), axis=1)
    return g.mean(), g.std(ddof=1) / np.sqrt(n_samples)


class TestTobitLogpdf:
    def test_gaussian_mode(self):
        assert tobit_logpdf(0.3, 0.3, 1.0, False) == pytest.approx(-0.5 * LOG2PI)

    def test_censored_at_mean_is_log_half(self):
        assert tobit_logpdf(1.0, 1.0, 4.0, True) == pytest.approx(np.log(0.5))

    def test_censored_quantile(self):
        # y = f − 1.6449σ leaves 95% of the mass above y.
        sigma2 = 0.49
        y = 2.0 - 1.6449 * np.sqrt(sigma2)
        assert tobit_logpdf(y, 2.0, sigma2, True) == pytest.approx(np.log(0.95), abs=1e-4)

    def test_survival_matches_numerical_tail_integral(self):
        f, sigma2 = 0.4, 0.3
        for y in (-1.0, 0.4, 1.5, 3.0):
            tail, _ = integrate.quad(
                lambda x: np.exp(-0.5 * (x - f) ** 2 / sigma2) / np.sqrt(2 * np.pi * sigma2),
                y,
                np.inf,
            )
            assert tobit_logpdf(y, f, sigma2, True) == pytest.approx(np.log(tail), rel=1e-8)

    def test_stable_deep_tail(self):
        # 30σ censored residual: the naive 1−Φ underflows, the scaled form
        # must not.
        val = tobit_logpdf(30.0, 0.0, 1.0, True)
        assert np.isfinite(val)
        assert val == pytest.approx(norm.logsf(30.0), rel=1e-10)

    def test_vectorized_mixed_flags(self):
        y = np.array([0.0, 1.0])
        out = tobit_logpdf(y, 0.0, 1.0, np.array([False, True]))
        assert out[0] == pytest.approx(norm.logpdf(0.0))
        assert out[1] == pytest.approx(norm.logsf(1.0))


@pytest.fixture
def two_product_lik():
    feats = np.zeros((2, 1))
    cfg = DiffusionConfig(ell_diff=1.0, n_diff=1)
    graph = build_graph(feats, cfg)
    return LikelihoodParams("diffusion_tobit", 0.01, config=cfg, graph=graph)


class TestDiffusionTobitLogpdf:
    def test_reduces_to_tobit_without_censoring(self, two_product_lik, rng):
        y = rng.standard_normal(2)
        f = rng.standard_normal(2)
        u = np.full(2, np.inf)
        c = np.zeros(2, bool)
        got = diffusion_tobit_logpdf(y, f, u, c, two_product_lik)
        expect = tobit_logpdf(y, f, 0.01, c).sum()
        assert got == pytest.approx(expect, rel=1e-12)

    def test_worked_example(self, two_product_lik):
        # d = (0, 0.5); censored term at product 1, exact Gaussian at 2.
        f = np.array([1.5, 0.2])
        u = np.array([1.0, 10.0])
        y = np.array([1.0, 0.7])
        c = np.array([True, False])
        got = diffusion_tobit_logpdf(y, f, u, c, two_product_lik)
        expect = norm.logsf(1.0, loc=1.5, scale=0.1) + norm.logpdf(0.7, loc=0.7, scale=0.1)
        assert got == pytest.approx(expect, rel=1e-10)

    def test_permutation_invariance(self, rng):
        feats = rng.uniform(-1, 1, (3, 2))
        cfg = DiffusionConfig(ell_diff=0.8, pi_sink=0.2, n_diff=2)
        y = rng.uniform(0, 1, 3)
        f = rng.uniform(0, 2, 3)
        u = rng.uniform(0.2, 1.5, 3)
        c = f >= u
        y = np.minimum(y, u)
        lik = LikelihoodParams(
            "diffusion_tobit", 0.05, config=cfg, graph=build_graph(feats, cfg)
        )
        base = diffusion_tobit_logpdf(y, f, u, c, lik)
        perm = np.array([2, 0, 1])
        lik_p = LikelihoodParams(
            "diffusion_tobit", 0.05, config=cfg, graph=build_graph(feats[perm], cfg)
        )
        got = diffusion_tobit_logpdf(y[perm], f[perm], u[perm], c[perm], lik_p)
        assert got == pytest.approx(base, rel=1e-10)

    def test_gradient_matches_finite_differences(self, rng):
        feats = rng.uniform(-1, 1, (3, 2))
        cfg = DiffusionConfig(ell_diff=0.8, pi_sink=0.1, n_diff=2)
        graph = build_graph(feats, cfg)
        lik = LikelihoodParams("diffusion_tobit", 0.05, config=cfg, graph=graph)
        from spillgp.likelihoods import _loglik_terms

        y = np.array([0.8, 0.6, 0.4])
        u = np.array([1.0, 0.9, 2.0])
        c = np.array([False, False, False])
        w = np.ones(3)
        f = np.array([1.25, 0.31, 0.52])  # clear of the max kinks
        g0, grad = _loglik_terms(f[None], y[None], u[None], c[None], w[None], lik)
        h = 1e-5
        for j in range(3):
            up, dn = f.copy(), f.copy()
            up[j] += h
            dn[j] -= h
            gu, _ = _loglik_terms(up[None], y[None], u[None], c[None], w[None], lik, want_grad=False)
            gd, _ = _loglik_terms(dn[None], y[None], u[None], c[None], w[None], lik, want_grad=False)
            fd = (gu[0] - gd[0]) / (2 * h)
            assert grad[0, j] == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestExpectedLoglik:
    def test_gaussian_closed_form(self):
        lik = LikelihoodParams("gaussian", 0.3)
        m, v, y = 0.4, 0.7, 1.1
        val, (g1, g2) = expected_loglik(
            [m], [[v]], [y], [np.inf], [False], lik, QuadratureSpec("gauss_hermite", order=20)
        )
        expect = -0.5 * np.log(2 * np.pi * 0.3) - ((y - m) ** 2 + v) / (2 * 0.3)
        assert val == pytest.approx(expect, abs=1e-10)
        # mean-parameter gradients: dE/dμ1 = dE/dm − 2 (dE/dV) m
        dEdm = (y - m) / 0.3
        dEdV = -0.5 / 0.3
        assert g2[0, 0] == pytest.approx(dEdV, abs=1e-10)
        assert g1[0] == pytest.approx(dEdm - 2 * dEdV * m, abs=1e-10)

    def test_degenerate_cov_gives_pointwise_logpdf(self, two_product_lik):
        f = np.array([1.5, 0.2])
        y = np.array([1.0, 0.7])
        u = np.array([1.0, 10.0])
        c = np.array([True, False])
        val, _ = expected_loglik(
            f, np.zeros((2, 2)), y, u, c, two_product_lik, QuadratureSpec(order=10)
        )
        direct = diffusion_tobit_logpdf(y, f, u, c, two_product_lik)
        assert val == pytest.approx(direct, abs=1e-5)

    def test_monotone_in_cov_scale_for_gaussian(self):
        lik = LikelihoodParams("gaussian", 0.5)
        quad = QuadratureSpec(order=12)
        vals = [
            expected_loglik([0.0], [[v]], [0.3], [np.inf], [False], lik, quad)[0]
            for v in (1e-4, 0.1, 0.5, 2.0, 10.0)
        ]
        assert np.all(np.diff(vals) < 0)

    def test_tensor_quadrature_refused_beyond_six(self):
        lik = LikelihoodParams("gaussian", 1.0)
        n = 7
        with pytest.raises(ValueError, match="refused"):
            expected_loglik(
                np.zeros(n), np.eye(n), np.zeros(n), np.full(n, np.inf),
                np.zeros(n, bool), lik, QuadratureSpec("gauss_hermite", order=3),
            )

    @pytest.mark.parametrize("n_p", [2, 3])
    def test_diffusion_quadrature_vs_mc_oracle(self, n_p, rng):
        feats = rng.uniform(-1, 1, (n_p, 2))
        cfg = DiffusionConfig(ell_diff=1.0, pi_sink=0.2, n_diff=2)
        graph = build_graph(feats, cfg)
        lik = LikelihoodParams("diffusion_tobit", 0.05, config=cfg, graph=graph)
        mean = rng.uniform(0.2, 1.0, n_p)
        A = rng.standard_normal((n_p, n_p)) * 0.2
        cov = A @ A.T + 0.05 * np.eye(n_p)
        u = rng.uniform(0.5, 1.2, n_p)
        yt = rng.uniform(0.2, 1.0, n_p)
        c = yt >= u
        y = np.minimum(yt, u)
        val, _ = expected_loglik(
            mean, cov, y, u, c, lik, QuadratureSpec("gauss_hermite", order=20)
        )
        ref, se = _mc_oracle_diffusion_tobit(
            mean, cov, y, u, c, 0.05, graph.T, 2, n_samples=1_000_000, seed=99
        )
        assert abs(val - ref) < 3 * se

    def test_unscented_runs_in_high_dim(self, rng):
        n = 9
        lik = LikelihoodParams("gaussian", 0.4)
        mean = rng.standard_normal(n)
        cov = 0.2 * np.eye(n)
        val, (g1, g2) = expected_loglik(
            mean, cov, np.zeros(n), np.full(n, np.inf), np.zeros(n, bool), lik,
            QuadratureSpec("unscented"),
        )
        expect = np.sum(-0.5 * np.log(2 * np.pi * 0.4) - (mean**2 + 0.2) / 0.8)
        # quadratic integrand: the unscented rule is exact
        assert val == pytest.approx(expect, rel=1e-10)

    def test_monte_carlo_scheme_deterministic(self, two_product_lik):
        mean = np.array([0.9, 0.3])
        cov = 0.1 * np.eye(2)
        y = np.array([0.8, 0.4])
        u = np.array([0.85, np.inf])
        c = np.array([False, False])
        spec = QuadratureSpec("monte_carlo", n_samples=2000, seed=42)
        a, _ = expected_loglik(mean, cov, y, u, c, two_product_lik, spec)
        b, _ = expected_loglik(mean, cov, y, u, c, two_product_lik, spec)
        assert a == b


class TestMeanParamGradients:
    @pytest.mark.parametrize(
        "kind,scheme",
        [("gaussian", "gauss_hermite"), ("tobit", "gauss_hermite"),
         ("diffusion_tobit", "gauss_hermite"), ("diffusion_tobit", "unscented")],
    )
    def test_grads_match_fd_of_quadrature(self, kind, scheme, rng):
        n_p = 2
        feats = np.array([[0.0, 0.0], [0.7, 0.0]])
        cfg = DiffusionConfig(ell_diff=1.0, pi_sink=0.1, n_diff=1)
        graph = build_graph(feats, cfg)
        if kind == "diffusion_tobit":
            lik = LikelihoodParams(kind, 0.05, config=cfg, graph=graph)
        else:
            lik = LikelihoodParams(kind, 0.05)
        quad = QuadratureSpec(scheme, order=9)
        y = np.array([0.8, 0.5])
        u = np.array([0.8, 2.0])
        c = np.array([True, False])
        mean = np.array([1.13, 0.42])
        A = np.array([[0.3, 0.05], [0.05, 0.25]])
        cov = A @ A.T

        def value(m, V):
            vals, _, _ = expected_loglik_panel(
                m[None], V[None], y[None], u[None], c[None], np.ones((1, n_p)), lik, quad,
                observed=y[None], want_grad=False,
            )
            return vals[0]

        _, dm, dV = expected_loglik_panel(
            mean[None], cov[None], y[None], u[None], c[None], np.ones((1, n_p)), lik, quad,
            observed=y[None],
        )
        h = 1e-5
        for j in range(n_p):
            up, dn = mean.copy(), mean.copy()
            up[j] += h
            dn[j] -= h
            fd = (value(up, cov) - value(dn, cov)) / (2 * h)
            assert dm[0, j] == pytest.approx(fd, rel=1e-4, abs=1e-7)
        for i in range(n_p):
            for j in range(i + 1):
                E = np.zeros((n_p, n_p))
                E[i, j] = E[j, i] = 1.0
                fd = (value(mean, cov + h * E) - value(mean, cov - h * E)) / (2 * h)
                # a symmetric perturbation touches both (i,j) and (j,i)
                got = dV[0, i, j] + dV[0, j, i] if i != j else dV[0, i, i]
                assert got == pytest.approx(fd, rel=1e-4, abs=1e-7)
