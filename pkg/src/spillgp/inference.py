"""State-space variational inference with natural-gradient site updates.

The non-Gaussian likelihood is replaced by per-time-step Gaussian sites
N(Ỹ_n | f_n, Ṽ_n), kept in natural form λ̃ = (λ1, λ2).  Filtering and
smoothing against the sites give the marginals q(f_n); the sites are then
moved by the natural-gradient rule

    λ̃ ← (1 − β) λ̃ + β ∂E_q[log p(Y_n | f_n)] / ∂μ,

where μ = (m, m mᵀ + V) are the mean parameters of q(f_n).  The training
objective is the three-term evidence lower bound

    L = Σ_n E_q[log p(Y_n | f_n)] − E_q[log Ñ(Ỹ | f, Ṽ)] + log E_p[Ñ(Ỹ | f, Ṽ)],

whose last two terms are computed in closed form from the filter and the
smoothed marginals (their site normalizers cancel, so the implementation
works with unnormalized sites and never inverts a rank-deficient λ2).
Hyperparameters (kernel, observation noise, and optionally the transfer
lengthscale and sink mass) are learned by type-II maximum likelihood:
Adam ascent on the ELBO over log/logit-transformed parameters, with
gradients from central finite differences of the objective.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import backend
from .backend import CorruptSites
from .diffusion import DiffusionConfig, build_graph
from .kernels import (
    JointStateModel,
    ProductKernelSpec,
    TemporalKernelSpec,
    build_joint_model,
    build_statespace,
    eval_product_kernel,
)
from .likelihoods import LikelihoodParams, QuadratureSpec, expected_loglik_panel
from .simdata import DemandPanel

__all__ = [
    "SiteParams",
    "PosteriorMarginals",
    "FitConfig",
    "FitDivergence",
    "FittedModel",
    "PredictionResult",
    "TrainData",
    "kalman_filter",
    "rts_smoother",
    "cvi_update",
    "elbo",
    "fit",
    "predict",
    "CorruptSites",
]

_EPS_PSD = 1e-8


class FitDivergence(RuntimeError):
    """The ELBO kept decreasing through the learning-rate halving schedule."""


@dataclass(frozen=True)
class TrainData:
    """Per-step training arrays aligned with a fit grid (all (N, N_p))."""

    y: np.ndarray
    u: np.ndarray
    c: np.ndarray
    w: np.ndarray  # term weights; 0 excludes a cell's likelihood term


@dataclass
class SiteParams:
    """Natural parameters of the Gaussian pseudo-likelihood per time step.

    Ṽ = (−2 λ2)⁻¹ and Ỹ = Ṽ λ1 on active steps.  Inactive steps carry no
    site (infinite variance) and are skipped by the filter.
    """

    lam1: np.ndarray  # (N, N_p)
    lam2: np.ndarray  # (N, N_p, N_p)
    active: np.ndarray  # (N,) bool

    @classmethod
    def initialize(cls, y: np.ndarray, w: np.ndarray, sigma2: float) -> "SiteParams":
        """Start sites at Ỹ = y, Ṽ = 10 σ² I on weighted cells; unweighted
        cells at an active step get a negligible precision."""
        N, n_p = y.shape
        v0 = 10.0 * sigma2
        has = w > 0
        lam1 = np.where(has, y / v0, 0.0)
        diag = np.where(has, 1.0 / v0, _EPS_PSD)
        lam2 = np.zeros((N, n_p, n_p))
        idx = np.arange(n_p)
        lam2[:, idx, idx] = -0.5 * diag
        active = has.any(axis=1)
        lam1[~active] = 0.0
        lam2[~active] = 0.0
        return cls(lam1=lam1, lam2=lam2, active=active)

    @property
    def n_steps(self) -> int:
        return self.lam1.shape[0]

    def precision(self) -> np.ndarray:
        return -2.0 * self.lam2

    def pseudo_observations(self):
        """(Ỹ, Ṽ) per step; NaN/inf on inactive steps."""
        n, n_p = self.lam1.shape
        Ytil = np.full((n, n_p), np.nan)
        Vtil = np.full((n, n_p, n_p), np.inf)
        for i in np.nonzero(self.active)[0]:
            V = np.linalg.inv(self.precision()[i])
            Vtil[i] = V
            Ytil[i] = V @ self.lam1[i]
        return Ytil, Vtil

    def embed(self, n_total: int, positions: np.ndarray) -> "SiteParams":
        """Place these sites at the given step positions of a larger grid."""
        n_p = self.lam1.shape[1]
        lam1 = np.zeros((n_total, n_p))
        lam2 = np.zeros((n_total, n_p, n_p))
        active = np.zeros(n_total, dtype=bool)
        lam1[positions] = self.lam1
        lam2[positions] = self.lam2
        active[positions] = self.active
        return SiteParams(lam1=lam1, lam2=lam2, active=active)


def _clip_psd(lam2: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Floor the eigenvalues of −2 λ2 at ε so the filter stays well posed."""
    out = lam2.copy()
    rows = np.nonzero(active)[0]
    prec = -(lam2[rows] + np.transpose(lam2[rows], (0, 2, 1)))  # −2 λ2, symmetrized
    vals, vecs = np.linalg.eigh(prec)
    vals = np.clip(vals, _EPS_PSD, None)
    out[rows] = -0.5 * np.einsum("nij,nj,nkj->nik", vecs, vals, vecs)
    return out


@dataclass
class PosteriorMarginals:
    """Filtered/smoothed joint-state moments and the projected q(f_n)."""

    times: np.ndarray
    filtered_means: np.ndarray  # (N, D)
    filtered_covs: np.ndarray  # (N, D, D)
    log_marginal: float  # surrogate-model log marginal (normalized sites)
    unnorm_log_weight: float  # same, without the site normalizers
    filtered_f_means: np.ndarray  # (N, N_p)
    filtered_f_covs: np.ndarray  # (N, N_p, N_p)
    smoothed_means: np.ndarray | None = None
    smoothed_covs: np.ndarray | None = None
    f_means: np.ndarray | None = None  # smoothed q(f_n) mean
    f_covs: np.ndarray | None = None


def _project(H: np.ndarray, means: np.ndarray, covs: np.ndarray):
    f_means = means @ H.T
    f_covs = H @ (covs @ H.T)
    return f_means, f_covs


def kalman_filter(model: JointStateModel, sites: SiteParams) -> PosteriorMarginals:
    """Forward filtering pass against the Gaussian sites.

    Steps without a site (inactive) are predict-only; the returned
    log_marginal accumulates the evidence of the pseudo-observations.
    """
    if sites.n_steps != model.n_steps:
        raise ValueError("sites and model are not aligned on the time grid")
    fm, fP, log_w, kappa = backend.filter_pass(
        model.A_unique,
        model.Q_unique,
        model.step_index,
        model.Pinf_joint,
        model.H_joint,
        sites.lam1,
        -2.0 * sites.lam2,
        sites.active.astype(np.uint8),
    )
    f_means, f_covs = _project(model.H_joint, fm, fP)
    return PosteriorMarginals(
        times=model.times,
        filtered_means=fm,
        filtered_covs=fP,
        log_marginal=log_w + kappa,
        unnorm_log_weight=log_w,
        filtered_f_means=f_means,
        filtered_f_covs=f_covs,
    )


def rts_smoother(model: JointStateModel, filtered: PosteriorMarginals) -> PosteriorMarginals:
    """Backward pass; fills the smoothed moments and the q(f_n) projection."""
    sm, sP = backend.smoother_pass(
        model.A_unique,
        model.Q_unique,
        model.step_index,
        filtered.filtered_means,
        filtered.filtered_covs,
    )
    f_means, f_covs = _project(model.H_joint, sm, sP)
    return replace(
        filtered, smoothed_means=sm, smoothed_covs=sP, f_means=f_means, f_covs=f_covs
    )


def cvi_update(
    sites: SiteParams,
    marginals: PosteriorMarginals,
    likelihood: LikelihoodParams,
    data: TrainData,
    beta: float,
    quad: QuadratureSpec = QuadratureSpec(),
) -> SiteParams:
    """One natural-gradient step on the site parameters."""
    if marginals.f_means is None:
        raise ValueError("cvi_update needs smoothed marginals")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if beta == 0.0:
        return sites
    m, V = marginals.f_means, marginals.f_covs
    _, dm, dV = expected_loglik_panel(
        m, V, data.y, data.u, data.c, data.w, likelihood, quad, observed=data.y
    )
    g1 = dm - 2.0 * np.einsum("nij,nj->ni", dV, m)
    lam1 = (1.0 - beta) * sites.lam1 + beta * g1
    lam2 = (1.0 - beta) * sites.lam2 + beta * dV
    lam1[~sites.active] = 0.0
    lam2[~sites.active] = 0.0
    lam2 = _clip_psd(lam2, sites.active)
    return SiteParams(lam1=lam1, lam2=lam2, active=sites.active.copy())


def elbo(
    model: JointStateModel,
    sites: SiteParams,
    marginals: PosteriorMarginals,
    likelihood: LikelihoodParams,
    data: TrainData,
    quad: QuadratureSpec = QuadratureSpec(),
) -> float:
    """Three-term evidence lower bound at the current sites and marginals."""
    if marginals.f_means is None:
        raise ValueError("elbo needs smoothed marginals")
    vals, _, _ = expected_loglik_panel(
        marginals.f_means,
        marginals.f_covs,
        data.y,
        data.u,
        data.c,
        data.w,
        likelihood,
        quad,
        observed=data.y,
        want_grad=False,
    )
    term1 = float(vals.sum())
    rows = np.nonzero(sites.active)[0]
    m = marginals.f_means[rows]
    V = marginals.f_covs[rows]
    lam1 = sites.lam1[rows]
    prec = -2.0 * sites.lam2[rows]
    # E_q[λ1ᵀ f − ½ fᵀ Λ f] per active step (site normalizers cancel with
    # the filter's unnormalized log weight).
    term2 = float(
        np.sum(lam1 * m)
        - 0.5 * np.einsum("ni,nij,nj->", m, prec, m)
        - 0.5 * np.einsum("nij,nji->", prec, V)
    )
    return term1 - term2 + marginals.unnorm_log_weight


# -- model assembly and type-II hyperparameter learning --


@dataclass(frozen=True)
class FitConfig:
    """Optimization settings for `fit`."""

    beta: float = 0.1
    n_iters: int = 100
    hyper_lr: float = 0.1
    hyper_every: int = 10
    learn_hypers: bool = True
    learn_ell_diff: bool = False
    learn_pi_sink: bool = False
    frozen: tuple = ()
    quadrature: QuadratureSpec = field(default_factory=QuadratureSpec)
    fd_step: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.hyper_every < 1:
            raise ValueError("hyper_every must be >= 1")
        if self.hyper_lr <= 0:
            raise ValueError("hyper_lr must be positive")
        object.__setattr__(self, "frozen", tuple(self.frozen))

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "n_iters": self.n_iters,
            "hyper_lr": self.hyper_lr,
            "hyper_every": self.hyper_every,
            "learn_hypers": self.learn_hypers,
            "learn_ell_diff": self.learn_ell_diff,
            "learn_pi_sink": self.learn_pi_sink,
            "frozen": list(self.frozen),
            "quadrature": self.quadrature.to_dict(),
            "fd_step": self.fd_step,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        if "quadrature" in d:
            d["quadrature"] = QuadratureSpec.from_dict(d["quadrature"])
        if "frozen" in d:
            d["frozen"] = tuple(d["frozen"])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _logit(p):
    p = min(max(p, 1e-6), 1.0 - 1e-6)
    return float(np.log(p / (1.0 - p)))


class ElboObjective:
    """ELBO as a function of transformed hyperparameters, at fixed sites.

    Kernel lengthscales/variances and σ² live in log space; the sink mass
    π lives in logit space.  Used both for the Adam ascent inside `fit` and
    for external gradient checks.
    """

    def __init__(self, times, data, features, temporal_spec, product_spec, likelihood, quad):
        self.times = times
        self.data = data
        self.features = features
        self.temporal_spec = temporal_spec
        self.product_spec = product_spec
        self.likelihood = likelihood
        self.quad = quad

    def initial_theta(self, config: FitConfig) -> dict[str, float]:
        theta = {}
        if config.learn_hypers:
            for k, v in self.temporal_spec.log_params().items():
                theta[f"kt.{k}"] = v
            for k, v in self.product_spec.log_params().items():
                theta[f"kp.{k}"] = v
            theta["lik.sigma2"] = float(np.log(self.likelihood.sigma2))
        if config.learn_ell_diff:
            theta["diff.ell"] = float(np.log(self.likelihood.config.ell_diff))
        if config.learn_pi_sink:
            theta["diff.pi"] = _logit(self.likelihood.config.pi_sink)
        return {k: v for k, v in theta.items() if k not in config.frozen}

    def build(self, theta: dict[str, float]):
        kt_spec = self.temporal_spec.with_log_params(
            {k[3:]: v for k, v in theta.items() if k.startswith("kt.")}
        )
        kp_spec = self.product_spec.with_log_params(
            {k[3:]: v for k, v in theta.items() if k.startswith("kp.")}
        )
        lik = self.likelihood
        if "lik.sigma2" in theta:
            lik = lik.with_sigma2(np.exp(theta["lik.sigma2"]))
        if lik.kind == "diffusion_tobit" and ("diff.ell" in theta or "diff.pi" in theta):
            cfg = lik.config
            cfg = DiffusionConfig(
                ell_diff=float(np.exp(theta["diff.ell"])) if "diff.ell" in theta else cfg.ell_diff,
                pi_sink=float(_sigmoid(theta["diff.pi"])) if "diff.pi" in theta else cfg.pi_sink,
                n_diff=cfg.n_diff,
                supply_aware=cfg.supply_aware,
            )
            lik = replace(lik, config=cfg, graph=build_graph(self.features, cfg))
        gram = eval_product_kernel(kp_spec, self.features)
        model = build_joint_model(build_statespace(kt_spec), gram, self.times)
        return model, lik, kt_spec, kp_spec

    def run(self, theta, sites):
        model, lik, _, _ = self.build(theta)
        marg = rts_smoother(model, kalman_filter(model, sites))
        return model, lik, marg

    def value(self, theta, sites) -> float:
        model, lik, marg = self.run(theta, sites)
        return elbo(model, sites, marg, lik, self.data, self.quad)

    def fd_gradient(self, theta, sites, h: float) -> dict[str, float]:
        """Central finite differences of the ELBO over the transformed
        hyperparameters (filter and smoother rerun per perturbation)."""
        grad = {}
        for name in theta:
            up = dict(theta)
            dn = dict(theta)
            up[name] += h
            dn[name] -= h
            grad[name] = (self.value(up, sites) - self.value(dn, sites)) / (2.0 * h)
        return grad


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, theta: dict, grad: dict) -> dict:
        self.t += 1
        out = dict(theta)
        for k, g in grad.items():
            self.m[k] = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            mhat = self.m[k] / (1 - self.beta1**self.t)
            vhat = self.v[k] / (1 - self.beta2**self.t)
            out[k] = theta[k] + self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


@dataclass
class FittedModel:
    """Result of `fit`: final sites, hyperparameters and the ELBO trace."""

    temporal_spec: TemporalKernelSpec
    product_spec: ProductKernelSpec
    likelihood: LikelihoodParams
    fit_config: FitConfig
    sites: SiteParams
    train_times: np.ndarray
    features: np.ndarray
    elbo_trace: list
    theta: dict
    panel_hash: str

    def to_dict(self) -> dict:
        lik = {
            "kind": self.likelihood.kind,
            "sigma2": self.likelihood.sigma2,
            "diffusion": None
            if self.likelihood.config is None
            else self.likelihood.config.to_dict(),
        }
        return {
            "schema_version": 1,
            "temporal": self.temporal_spec.to_dict(),
            "product": self.product_spec.to_dict(),
            "likelihood": lik,
            "fit_config": self.fit_config.to_dict(),
            "sites": {
                "lam1": self.sites.lam1.tolist(),
                "lam2": self.sites.lam2.tolist(),
                "active": self.sites.active.astype(int).tolist(),
            },
            "train_times": self.train_times.tolist(),
            "features": self.features.tolist(),
            "elbo_trace": self.elbo_trace,
            "theta": self.theta,
            "panel_hash": self.panel_hash,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        features = np.atleast_2d(np.asarray(d["features"], dtype=float))
        likd = d["likelihood"]
        cfg = None if likd["diffusion"] is None else DiffusionConfig.from_dict(likd["diffusion"])
        lik = LikelihoodParams(
            kind=likd["kind"],
            sigma2=float(likd["sigma2"]),
            config=cfg,
            graph=None if cfg is None else build_graph(features, cfg),
        )
        return cls(
            temporal_spec=TemporalKernelSpec.from_dict(d["temporal"]),
            product_spec=ProductKernelSpec.from_dict(d["product"]),
            likelihood=lik,
            fit_config=FitConfig.from_dict(d["fit_config"]),
            sites=SiteParams(
                lam1=np.asarray(d["sites"]["lam1"], dtype=float),
                lam2=np.asarray(d["sites"]["lam2"], dtype=float),
                active=np.asarray(d["sites"]["active"]).astype(bool),
            ),
            train_times=np.asarray(d["train_times"], dtype=float),
            features=features,
            elbo_trace=d["elbo_trace"],
            theta=d["theta"],
            panel_hash=d["panel_hash"],
        )

    @classmethod
    def load(cls, path) -> "FittedModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _train_view(panel: DemandPanel):
    w_full = (
        np.ones_like(panel.Y_obs)
        if panel.train_mask is None
        else panel.train_mask.astype(float)
    )
    steps = np.nonzero(w_full.any(axis=1))[0]
    data = TrainData(
        y=panel.Y_obs[steps],
        u=panel.U[steps],
        c=panel.C[steps],
        w=w_full[steps],
    )
    return panel.times[steps], data


def fit(
    panel: DemandPanel,
    temporal_spec: TemporalKernelSpec,
    product_spec: ProductKernelSpec,
    likelihood: LikelihoodParams,
    config: FitConfig,
) -> FittedModel:
    """Run CVI sweeps with interleaved hyperparameter ascent on a panel.

    The fit grid contains the time steps with at least one training cell;
    remaining cells simply contribute no likelihood term.  Raises
    FitDivergence when the ELBO keeps decreasing through three halvings of
    the hyper learning rate.
    """
    times, data = _train_view(panel)
    obj = ElboObjective(
        times, data, panel.features, temporal_spec, product_spec, likelihood, config.quadrature
    )
    theta = obj.initial_theta(config)
    learn = len(theta) > 0
    sites = SiteParams.initialize(data.y, data.w, likelihood.sigma2)

    adam = _Adam(config.hyper_lr)
    trace = []
    best = -np.inf
    decreasing = 0
    halvings = 0
    improved_since_halving = True

    model, lik, marg = obj.run(theta, sites)
    for it in range(config.n_iters):
        value = elbo(model, sites, marg, lik, data, config.quadrature)
        hyper_now = learn and (it + 1) % config.hyper_every == 0
        trace.append({"iter": it, "elbo": float(value), "hyper_step": bool(hyper_now)})
        sites = cvi_update(sites, marg, lik, data, config.beta, config.quadrature)

        if hyper_now:
            grad = obj.fd_gradient(theta, sites, config.fd_step)
            theta = adam.step(theta, grad)
            after = obj.value(theta, sites)
            if after < value:
                decreasing += 1
            else:
                decreasing = 0
            if after > best:
                best = after
                improved_since_halving = True
            if decreasing >= 25:
                adam.lr *= 0.5
                decreasing = 0
                if not improved_since_halving:
                    halvings += 1
                else:
                    halvings = 1
                improved_since_halving = False
                if halvings > 3:
                    raise FitDivergence(
                        "ELBO decreased for 25 consecutive hyperparameter steps "
                        "after 3 learning-rate halvings"
                    )
        model, lik, marg = obj.run(theta, sites)

    final = elbo(model, sites, marg, lik, data, config.quadrature)
    trace.append({"iter": config.n_iters, "elbo": float(final), "hyper_step": False})
    _, _, kt_spec, kp_spec = obj.build(theta)
    return FittedModel(
        temporal_spec=kt_spec,
        product_spec=kp_spec,
        likelihood=lik,
        fit_config=config,
        sites=sites,
        train_times=times,
        features=panel.features,
        elbo_trace=trace,
        theta=theta,
        panel_hash=panel.content_hash(),
    )


@dataclass
class PredictionResult:
    """Predictive marginals over the latent demand f at requested times."""

    times: np.ndarray
    mean: np.ndarray  # (N, N_p)
    var: np.ndarray  # (N, N_p) latent variance
    cov: np.ndarray  # (N, N_p, N_p)
    sigma2: float  # observation noise to add for predictive densities

    @property
    def var_y(self) -> np.ndarray:
        return self.var + self.sigma2


def predict(fitted: FittedModel, times) -> PredictionResult:
    """Smoothed q(f) on the union of the training grid and the given times.

    Test steps carry no sites, so their marginals are the GP's smoothed
    prediction; on training times this reproduces the fit marginals.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if times.size and not np.all(np.isfinite(times)):
        raise ValueError("test times must be finite")
    merged = np.union1d(fitted.train_times, times)
    pos = np.searchsorted(merged, fitted.train_times)
    sites = fitted.sites.embed(merged.size, pos)
    gram = eval_product_kernel(fitted.product_spec, fitted.features)
    model = build_joint_model(build_statespace(fitted.temporal_spec), gram, merged)
    marg = rts_smoother(model, kalman_filter(model, sites))
    take = np.searchsorted(merged, times)
    cov = marg.f_covs[take]
    idx = np.arange(cov.shape[-1])
    return PredictionResult(
        times=times,
        mean=marg.f_means[take],
        var=cov[:, idx, idx],
        cov=cov,
        sigma2=fitted.likelihood.sigma2,
    )
