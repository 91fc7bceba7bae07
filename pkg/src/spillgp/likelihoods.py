"""Observation models: Gaussian, Tobit, and the spillover-aware Tobit.

The Tobit density for right-censored data is

    p(y | f) = N(y | f, σ²)^(1−c) · (1 − Φ(y | f, σ²))^c,

with c the censoring flag.  The spillover-aware variant shifts the mean of
product k by the diffused demand d_k(f), the extra demand k receives when
similar products run out of supply, which couples the products within one
time index.

Expectations of the log density under a Gaussian q(f) = N(m, V) and their
gradients with respect to the mean parameters (m, m mᵀ + V) are computed by
quadrature: tensor Gauss-Hermite for small product counts, unscented cubature
for larger ones, and fixed-seed Monte Carlo as a testing scheme.  Gradients
are obtained by differentiating through the quadrature-point evaluations
(reparameterized through the Cholesky factor of V), so gradient checks by
finite differences of the quadrature value are exact up to floating point.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import erfcx

from .diffusion import DiffusionConfig, ProductGraph, _diffuse_batch, mask_graph

__all__ = [
    "LikelihoodParams",
    "QuadratureSpec",
    "tobit_logpdf",
    "diffusion_tobit_logpdf",
    "expected_loglik",
    "expected_loglik_panel",
]

LOG2PI = float(np.log(2.0 * np.pi))
_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))

LIKELIHOOD_KINDS = ("gaussian", "tobit", "diffusion_tobit")
QUAD_SCHEMES = ("gauss_hermite", "unscented", "monte_carlo")


@dataclass(frozen=True)
class QuadratureSpec:
    """Scheme and resolution for expected log-likelihood integrals."""

    scheme: str = "gauss_hermite"
    order: int = 10
    n_samples: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in QUAD_SCHEMES:
            raise ValueError(f"unknown quadrature scheme {self.scheme!r}")
        if self.order < 1:
            raise ValueError("quadrature order must be >= 1")
        if self.n_samples < 1:
            raise ValueError("monte carlo sample count must be >= 1")

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "order": self.order,
            "n_samples": self.n_samples,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuadratureSpec":
        return cls(
            scheme=d.get("scheme", "gauss_hermite"),
            order=int(d.get("order", 10)),
            n_samples=int(d.get("n_samples", 10_000)),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class LikelihoodParams:
    """Observation-model parameters.

    kind "gaussian" ignores censoring, "tobit" uses the censored Gaussian,
    and "diffusion_tobit" additionally shifts means by the diffused demand
    (requires a product graph and transfer configuration).
    """

    kind: str
    sigma2: float
    config: DiffusionConfig | None = None
    graph: ProductGraph | None = None

    def __post_init__(self):
        if self.kind not in LIKELIHOOD_KINDS:
            raise ValueError(f"unknown likelihood kind {self.kind!r}")
        if not (self.sigma2 > 0 and np.isfinite(self.sigma2)):
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if self.kind == "diffusion_tobit" and (self.config is None or self.graph is None):
            raise ValueError("diffusion_tobit needs a DiffusionConfig and a ProductGraph")

    def with_sigma2(self, sigma2: float) -> "LikelihoodParams":
        return replace(self, sigma2=float(sigma2))


def tobit_logpdf(y, f, sigma2, censored):
    """Censored-Gaussian log density, elementwise over broadcast inputs.

    Uncensored entries score log N(y | f, σ²); censored entries score the
    log survival mass log(1 − Φ(y | f, σ²)), computed through the scaled
    complementary error function so large standardized residuals do not
    underflow.
    """
    y = np.asarray(y, dtype=float)
    f = np.asarray(f, dtype=float)
    censored = np.asarray(censored, dtype=bool)
    sigma = np.sqrt(sigma2)
    z = (y - f) / sigma
    gauss = -0.5 * (LOG2PI + np.log(sigma2)) - 0.5 * z * z
    surv = np.log(0.5) + np.log(erfcx(z / np.sqrt(2.0))) - 0.5 * z * z
    return np.where(censored, surv, gauss)


def _tobit_grad_mean(y, mu, sigma2, censored):
    # d/dμ of tobit_logpdf(y, μ, σ², c).
    sigma = np.sqrt(sigma2)
    z = (y - mu) / sigma
    grad_gauss = (y - mu) / sigma2
    grad_surv = _SQRT_2_OVER_PI / (sigma * erfcx(z / np.sqrt(2.0)))
    return np.where(censored, grad_surv, grad_gauss)


def diffusion_tobit_logpdf(
    y: np.ndarray,
    f: np.ndarray,
    u: np.ndarray,
    censored: np.ndarray,
    params: LikelihoodParams,
    observed: np.ndarray | None = None,
) -> float:
    """Joint log density of one time index under the spillover-aware Tobit.

    Computes the diffused demand d(f) for the latent vector f and sums the
    per-product Tobit terms with shifted means f + d.  With no censoring
    anywhere, d = 0 and this reduces to the plain Tobit product.
    """
    if params.kind != "diffusion_tobit":
        raise ValueError("params.kind must be 'diffusion_tobit'")
    f = np.asarray(f, dtype=float)
    g, _ = _loglik_terms(
        f[None, :],
        np.asarray(y, float)[None, :],
        np.asarray(u, float)[None, :],
        np.asarray(censored, bool)[None, :],
        np.ones((1, f.size)),
        params,
        observed=None if observed is None else np.asarray(observed, float)[None, :],
        want_grad=False,
    )
    return float(g[0])


def _transition_for(params: LikelihoodParams, u_row, observed_row) -> np.ndarray:
    graph = params.graph
    if params.config.supply_aware:
        if observed_row is None:
            raise ValueError("supply-aware likelihood needs observed demand for masking")
        graph = mask_graph(graph, u_row, observed_row)
    return graph.T


def _loglik_terms(F, y, u, c, w, params, observed=None, want_grad=True):
    """Log density and gradient for a batch of latent rows.

    F: (B, N_p) latent demand; y/u/c/w: (B, N_p) observations, supplies,
    censoring flags and term weights (a zero weight drops the cell's term
    but the cell's latent value still participates in the transfer map).
    Returns g (B,) and dg/dF (B, N_p) (None when want_grad is False).
    """
    if params.kind == "gaussian":
        terms = -0.5 * (LOG2PI + np.log(params.sigma2)) - 0.5 * (y - F) ** 2 / params.sigma2
        g = np.sum(w * terms, axis=1)
        if not want_grad:
            return g, None
        return g, w * (y - F) / params.sigma2

    if params.kind == "tobit":
        terms = tobit_logpdf(y, F, params.sigma2, c)
        g = np.sum(w * terms, axis=1)
        if not want_grad:
            return g, None
        return g, w * _tobit_grad_mean(y, F, params.sigma2, c)

    # diffusion_tobit: every row in the batch must share one supply row so the
    # transfer map (and supply-aware masking) is common; callers group by
    # time index.
    u_row = u[0]
    obs_row = None if observed is None else observed[0]
    T = _transition_for(params, u_row, obs_row)
    D, dD = _diffuse_batch(F, u_row, T, F.shape[1], params.config.n_diff, want_grad)
    mu = F + D
    terms = tobit_logpdf(y, mu, params.sigma2, c)
    g = np.sum(w * terms, axis=1)
    if not want_grad:
        return g, None
    t = w * _tobit_grad_mean(y, mu, params.sigma2, c)
    return g, t + np.einsum("bk,bkj->bj", t, dD)


# -- quadrature point sets (standardized space: f = m + L ξ) --


def _gauss_hermite_points(dim: int, order: int):
    if dim > 6:
        raise ValueError(
            "tensor Gauss-Hermite is refused above 6 dimensions "
            "(exponential point count); use 'unscented' or 'monte_carlo'"
        )
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    weights = weights / weights.sum()
    grids = np.meshgrid(*([nodes] * dim), indexing="ij")
    xi = np.stack([g.ravel() for g in grids], axis=-1)
    wq = np.ones(xi.shape[0])
    for g in np.meshgrid(*([weights] * dim), indexing="ij"):
        wq = wq * g.ravel()
    return xi, wq


def _unscented_points(dim: int):
    # 2·dim+1 sigma points; κ = 3−dim for small dim, else the spherical rule
    # with a zero-weight center point.
    kappa = 3.0 - dim if dim <= 3 else 0.0
    scale = np.sqrt(dim + kappa)
    xi = np.zeros((2 * dim + 1, dim))
    xi[1 : dim + 1] = scale * np.eye(dim)
    xi[dim + 1 :] = -scale * np.eye(dim)
    wq = np.full(2 * dim + 1, 1.0 / (2.0 * (dim + kappa)))
    wq[0] = kappa / (dim + kappa)
    return xi, wq


def _monte_carlo_points(dim: int, n: int, seed: int):
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((n, dim))
    wq = np.full(n, 1.0 / n)
    return xi, wq


def quadrature_points(dim: int, spec: QuadratureSpec):
    if spec.scheme == "gauss_hermite":
        return _gauss_hermite_points(dim, spec.order)
    if spec.scheme == "unscented":
        return _unscented_points(dim)
    return _monte_carlo_points(dim, spec.n_samples, spec.seed)


def _chol_batch(covs: np.ndarray) -> np.ndarray:
    base = np.mean(np.trace(covs, axis1=-2, axis2=-1)) / covs.shape[-1] + 1.0
    eye = np.eye(covs.shape[-1])
    for jitter in (1e-14, 1e-12, 1e-10, 1e-8):
        try:
            return np.linalg.cholesky(covs + jitter * base * eye)
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("covariance not positive definite even with jitter")


def _phi_lower_half(M: np.ndarray) -> np.ndarray:
    # Lower triangle with halved diagonal (batched).
    out = np.tril(M).copy()
    idx = np.arange(M.shape[-1])
    out[..., idx, idx] *= 0.5
    return out


def expected_loglik_panel(
    means: np.ndarray,
    covs: np.ndarray,
    y: np.ndarray,
    u: np.ndarray,
    c: np.ndarray,
    w: np.ndarray,
    params: LikelihoodParams,
    quad: QuadratureSpec,
    observed: np.ndarray | None = None,
    want_grad: bool = True,
):
    """E_q[log p(Y_n | f_n)] and its (m, V) gradients for every time index.

    means (N, N_p) and covs (N, N_p, N_p) describe the marginals q(f_n);
    rows with no positively-weighted cell are skipped and return zeros.
    Returns (values (N,), dm (N, N_p), dV (N, N_p, N_p)).
    """
    N, n_p = means.shape
    vals = np.zeros(N)
    dm = np.zeros((N, n_p)) if want_grad else None
    dV = np.zeros((N, n_p, n_p)) if want_grad else None

    rows = np.nonzero(w.sum(axis=1) > 0)[0]
    if rows.size == 0:
        return vals, dm, dV

    xi, wq = quadrature_points(n_p, quad)
    Q = xi.shape[0]
    L = _chol_batch(covs[rows])
    # points[n, q] = m_n + L_n ξ_q
    pts = means[rows, None, :] + np.einsum("nij,qj->nqi", L, xi)

    per_step = params.kind == "diffusion_tobit"
    if per_step:
        g = np.empty((rows.size, Q))
        grad = np.empty((rows.size, Q, n_p)) if want_grad else None
        for i, n in enumerate(rows):
            obs_row = None if observed is None else np.broadcast_to(observed[n], (Q, n_p))
            gi, gr = _loglik_terms(
                pts[i],
                np.broadcast_to(y[n], (Q, n_p)),
                np.broadcast_to(u[n], (Q, n_p)),
                np.broadcast_to(c[n], (Q, n_p)),
                np.broadcast_to(w[n], (Q, n_p)),
                params,
                observed=obs_row,
                want_grad=want_grad,
            )
            g[i] = gi
            if want_grad:
                grad[i] = gr
    else:
        flat = pts.reshape(-1, n_p)
        rep = lambda a: np.repeat(a[rows], Q, axis=0)  # noqa: E731
        g, grad = _loglik_terms(
            flat, rep(y), rep(u), rep(c), rep(w), params, want_grad=want_grad
        )
        g = g.reshape(rows.size, Q)
        if want_grad:
            grad = grad.reshape(rows.size, Q, n_p)

    vals[rows] = g @ wq
    if not want_grad:
        return vals, dm, dV

    dm[rows] = np.einsum("nqk,q->nk", grad, wq)
    # dE/dL, then the Cholesky pullback to the symmetric dE/dV.
    S = np.einsum("nqk,q,qj->nkj", grad, wq, xi)
    M = np.einsum("nik,nij->nkj", L, S)  # Lᵀ S
    Z = _phi_lower_half(M)
    Z = 0.5 * (Z + np.transpose(Z, (0, 2, 1)))
    LT = np.transpose(L, (0, 2, 1))
    Y1 = np.linalg.solve(LT, Z)
    dv = np.transpose(np.linalg.solve(LT, np.transpose(Y1, (0, 2, 1))), (0, 2, 1))
    dV[rows] = 0.5 * (dv + np.transpose(dv, (0, 2, 1)))
    return vals, dm, dV


def expected_loglik(
    q_mean: np.ndarray,
    q_cov: np.ndarray,
    y: np.ndarray,
    u: np.ndarray,
    c: np.ndarray,
    params: LikelihoodParams,
    quad: QuadratureSpec,
    observed: np.ndarray | None = None,
    weights: np.ndarray | None = None,
):
    """Expected log likelihood for a single time index.

    Returns (value, (g1, g2)) where g1 and g2 are the gradients with respect
    to the mean parameters m and m mᵀ + V of q(f_n).
    """
    q_mean = np.atleast_1d(np.asarray(q_mean, dtype=float))
    n_p = q_mean.size
    q_cov = np.asarray(q_cov, dtype=float).reshape(n_p, n_p)
    w = np.ones(n_p) if weights is None else np.asarray(weights, dtype=float)
    vals, dm, dV = expected_loglik_panel(
        q_mean[None, :],
        q_cov[None, :, :],
        np.asarray(y, float).reshape(1, n_p),
        np.asarray(u, float).reshape(1, n_p),
        np.asarray(c, bool).reshape(1, n_p),
        w.reshape(1, n_p),
        params,
        quad,
        observed=None if observed is None else np.asarray(observed, float).reshape(1, n_p),
    )
    g2 = dV[0]
    g1 = dm[0] - 2.0 * g2 @ q_mean
    return float(vals[0]), (g1, g2)
