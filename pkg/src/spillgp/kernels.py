"""Covariance functions over time and product features, and their state-space forms.

Markovian temporal kernels admit an exact representation as a linear
time-invariant SDE,

    dx(t) = F x(t) dt + L dw(t),      f(t) = H x(t),

where w(t) is white noise with spectral density Qc and the stationary state
covariance Pinf solves the continuous Lyapunov equation
F Pinf + Pinf Fᵀ + L Qc Lᵀ = 0.  Discretizing on a time grid gives the linear
model x(t_{n+1}) = A_n x(t_n) + q_n with A_n = expm(F Δ_n) and
q_n ~ N(0, Pinf − A_n Pinf A_nᵀ).

A separable space-time prior over N_p products with feature gram matrix G is
composed by Kronecker products: A = I ⊗ A_t, Pinf = G ⊗ Pinf_t, H = I ⊗ H_t.
Only separable priors are supported; the inference scheme relies on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm
from scipy.special import ive

__all__ = [
    "InvalidHyperparameter",
    "UnsupportedFamily",
    "TemporalKernelSpec",
    "ProductKernelSpec",
    "StateSpaceKernel",
    "JointStateModel",
    "build_statespace",
    "discretize",
    "eval_product_kernel",
    "build_joint_model",
]

TEMPORAL_FAMILIES = ("matern12", "matern32", "matern52", "quasiperiodic", "sum")
PRODUCT_FAMILIES = ("rbf", "matern32", "independent")


class InvalidHyperparameter(ValueError):
    """A kernel hyperparameter is outside its valid domain."""


class UnsupportedFamily(ValueError):
    """The requested kernel family is not implemented."""


@dataclass(frozen=True)
class TemporalKernelSpec:
    """Specification of a Markovian temporal kernel.

    family: one of matern12 | matern32 | matern52 | quasiperiodic | sum.
    For "sum", `terms` holds the component specs and the scalar fields are
    ignored.  The quasi-periodic family is the cosine (harmonic) expansion of
    the exponentiated-cosine periodic kernel, truncated at `n_harmonics`
    oscillators (including the constant j=0 block) and normalized so that the
    lag-0 variance is exactly `variance`.
    """

    family: str
    lengthscale: float = 1.0
    variance: float = 1.0
    period: float | None = None
    n_harmonics: int | None = None
    terms: tuple["TemporalKernelSpec", ...] | None = None

    def __post_init__(self):
        if self.family not in TEMPORAL_FAMILIES:
            raise UnsupportedFamily(f"unknown temporal kernel family {self.family!r}")
        if self.family == "sum":
            if not self.terms:
                raise InvalidHyperparameter("sum kernel needs at least one term")
            object.__setattr__(self, "terms", tuple(self.terms))
            for t in self.terms:
                if t.family == "sum":
                    raise InvalidHyperparameter("nested sum kernels are not supported")
            return
        if not (self.lengthscale > 0 and np.isfinite(self.lengthscale)):
            raise InvalidHyperparameter(f"lengthscale must be positive, got {self.lengthscale}")
        if not (self.variance > 0 and np.isfinite(self.variance)):
            raise InvalidHyperparameter(f"variance must be positive, got {self.variance}")
        if self.family == "quasiperiodic":
            if self.period is None or not (self.period > 0 and np.isfinite(self.period)):
                raise InvalidHyperparameter(f"period must be positive, got {self.period}")
            n = self.n_harmonics if self.n_harmonics is not None else 6
            if n < 1 or int(n) != n:
                raise InvalidHyperparameter(f"n_harmonics must be a positive integer, got {n}")
            object.__setattr__(self, "n_harmonics", int(n))

    # -- log-space hyperparameter interface (used for type-II learning) --

    def log_param_names(self) -> list[str]:
        if self.family == "sum":
            return [f"t{i}.{n}" for i, t in enumerate(self.terms) for n in t.log_param_names()]
        names = ["lengthscale", "variance"]
        if self.family == "quasiperiodic":
            names.append("period")
        return names

    def log_params(self) -> dict[str, float]:
        if self.family == "sum":
            out = {}
            for i, t in enumerate(self.terms):
                out.update({f"t{i}.{k}": v for k, v in t.log_params().items()})
            return out
        out = {"lengthscale": np.log(self.lengthscale), "variance": np.log(self.variance)}
        if self.family == "quasiperiodic":
            out["period"] = np.log(self.period)
        return out

    def with_log_params(self, values: dict[str, float]) -> "TemporalKernelSpec":
        if self.family == "sum":
            terms = []
            for i, t in enumerate(self.terms):
                pre = f"t{i}."
                sub = {k[len(pre):]: v for k, v in values.items() if k.startswith(pre)}
                terms.append(t.with_log_params(sub))
            return replace(self, terms=tuple(terms))
        kw = {}
        if "lengthscale" in values:
            kw["lengthscale"] = float(np.exp(values["lengthscale"]))
        if "variance" in values:
            kw["variance"] = float(np.exp(values["variance"]))
        if "period" in values and self.family == "quasiperiodic":
            kw["period"] = float(np.exp(values["period"]))
        return replace(self, **kw)

    # -- configuration (de)serialization --

    def to_dict(self) -> dict:
        if self.family == "sum":
            return {"family": "sum", "terms": [t.to_dict() for t in self.terms]}
        d = {"family": self.family, "lengthscale": self.lengthscale, "variance": self.variance}
        if self.family == "quasiperiodic":
            d["period"] = self.period
            d["n_harmonics"] = self.n_harmonics
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TemporalKernelSpec":
        if d["family"] == "sum":
            return cls(family="sum", terms=tuple(cls.from_dict(t) for t in d["terms"]))
        return cls(
            family=d["family"],
            lengthscale=float(d.get("lengthscale", 1.0)),
            variance=float(d.get("variance", 1.0)),
            period=float(d["period"]) if "period" in d else None,
            n_harmonics=int(d["n_harmonics"]) if "n_harmonics" in d else None,
        )


@dataclass(frozen=True)
class ProductKernelSpec:
    """Covariance over product features: rbf | matern32 | independent.

    The rbf form is exp(−‖p−p′‖²/ℓ²); "independent" is the exact delta
    kernel 𝟙(p = p′), giving independent GPs per product.
    """

    family: str
    lengthscale: float = 1.0
    variance: float = 1.0

    def __post_init__(self):
        if self.family not in PRODUCT_FAMILIES:
            raise UnsupportedFamily(f"unknown product kernel family {self.family!r}")
        if self.family != "independent" and not (
            self.lengthscale > 0 and np.isfinite(self.lengthscale)
        ):
            raise InvalidHyperparameter(f"lengthscale must be positive, got {self.lengthscale}")
        if not (self.variance > 0 and np.isfinite(self.variance)):
            raise InvalidHyperparameter(f"variance must be positive, got {self.variance}")

    def log_param_names(self) -> list[str]:
        if self.family == "independent":
            return ["variance"]
        return ["lengthscale", "variance"]

    def log_params(self) -> dict[str, float]:
        out = {"variance": np.log(self.variance)}
        if self.family != "independent":
            out["lengthscale"] = np.log(self.lengthscale)
        return out

    def with_log_params(self, values: dict[str, float]) -> "ProductKernelSpec":
        kw = {}
        if "variance" in values:
            kw["variance"] = float(np.exp(values["variance"]))
        if "lengthscale" in values and self.family != "independent":
            kw["lengthscale"] = float(np.exp(values["lengthscale"]))
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {"family": self.family, "lengthscale": self.lengthscale, "variance": self.variance}

    @classmethod
    def from_dict(cls, d: dict) -> "ProductKernelSpec":
        return cls(
            family=d["family"],
            lengthscale=float(d.get("lengthscale", 1.0)),
            variance=float(d.get("variance", 1.0)),
        )


@dataclass(frozen=True)
class StateSpaceKernel:
    """SDE form of a temporal kernel: feedback F, noise effect L, white-noise
    spectral density Qc, measurement row H and stationary covariance Pinf."""

    F: np.ndarray
    L: np.ndarray
    Qc: np.ndarray
    H: np.ndarray
    Pinf: np.ndarray

    @property
    def d(self) -> int:
        return self.F.shape[0]

    @property
    def stationary_variance(self) -> float:
        return (self.H @ self.Pinf @ self.H.T).item()


def _statespace_matern12(ell, var):
    F = np.array([[-1.0 / ell]])
    L = np.array([[1.0]])
    Qc = np.array([[2.0 * var / ell]])
    H = np.array([[1.0]])
    Pinf = np.array([[var]])
    return F, L, Qc, H, Pinf


def _statespace_matern32(ell, var):
    lam = np.sqrt(3.0) / ell
    F = np.array([[0.0, 1.0], [-lam**2, -2.0 * lam]])
    L = np.array([[0.0], [1.0]])
    Qc = np.array([[4.0 * lam**3 * var]])
    H = np.array([[1.0, 0.0]])
    Pinf = np.diag([var, lam**2 * var])
    return F, L, Qc, H, Pinf


def _statespace_matern52(ell, var):
    lam = np.sqrt(5.0) / ell
    kappa = lam**2 * var / 3.0
    F = np.array(
        [
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [-(lam**3), -3.0 * lam**2, -3.0 * lam],
        ]
    )
    L = np.array([[0.0], [0.0], [1.0]])
    Qc = np.array([[var * 16.0 / 3.0 * lam**5]])
    H = np.array([[1.0, 0.0, 0.0]])
    Pinf = np.array(
        [
            [var, 0.0, -kappa],
            [0.0, kappa, 0.0],
            [-kappa, 0.0, lam**4 * var],
        ]
    )
    return F, L, Qc, H, Pinf


def _statespace_quasiperiodic(ell, var, period, n_harmonics):
    # Harmonic expansion of exp((cos(ωτ) − 1)/ℓ²): coefficient of cos(jωτ) is
    # (2 − 𝟙(j=0))·I_j(ℓ⁻²)·e^{−ℓ⁻²}; normalized so the truncation keeps the
    # lag-0 variance exactly equal to `var`.
    j = np.arange(n_harmonics)
    q2 = (2.0 - (j == 0)) * ive(j, 1.0 / ell**2)
    q2 = q2 / q2.sum() * var
    omega = 2.0 * np.pi / period
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    F = np.kron(np.diag(j * omega), rot)
    L = np.eye(2 * n_harmonics)
    Qc = np.zeros((2 * n_harmonics, 2 * n_harmonics))
    H = np.kron(np.ones((1, n_harmonics)), np.array([[1.0, 0.0]]))
    Pinf = np.kron(np.diag(q2), np.eye(2))
    return F, L, Qc, H, Pinf


def build_statespace(spec: TemporalKernelSpec) -> StateSpaceKernel:
    """Convert a temporal kernel specification into its SDE representation.

    State dimensions: 1, 2, 3 for Matérn-1/2, 3/2, 5/2; 2·n_harmonics for the
    quasi-periodic cosine expansion; sums concatenate blocks diagonally.
    """
    if spec.family == "matern12":
        parts = [_statespace_matern12(spec.lengthscale, spec.variance)]
    elif spec.family == "matern32":
        parts = [_statespace_matern32(spec.lengthscale, spec.variance)]
    elif spec.family == "matern52":
        parts = [_statespace_matern52(spec.lengthscale, spec.variance)]
    elif spec.family == "quasiperiodic":
        parts = [
            _statespace_quasiperiodic(
                spec.lengthscale, spec.variance, spec.period, spec.n_harmonics
            )
        ]
    elif spec.family == "sum":
        parts = [
            (k.F, k.L, k.Qc, k.H, k.Pinf) for k in (build_statespace(t) for t in spec.terms)
        ]
    else:  # pragma: no cover - guarded in __post_init__
        raise UnsupportedFamily(spec.family)

    if len(parts) == 1:
        F, L, Qc, H, Pinf = parts[0]
    else:
        from scipy.linalg import block_diag

        F = block_diag(*[p[0] for p in parts])
        L = block_diag(*[p[1] for p in parts])
        Qc = block_diag(*[p[2] for p in parts])
        H = np.hstack([p[3] for p in parts])
        Pinf = block_diag(*[p[4] for p in parts])
    return StateSpaceKernel(F=F, L=L, Qc=Qc, H=H, Pinf=Pinf)


def discretize(kernel: StateSpaceKernel, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact discretization over a step of size `delta`.

    Returns A = expm(F·delta) and the process noise Q = Pinf − A Pinf Aᵀ,
    which is exact for stationary priors (cheaper than quadrature of the
    noise integral).
    """
    if delta < 0:
        raise ValueError(f"delta must be nonnegative, got {delta}")
    if delta == 0:
        d = kernel.d
        return np.eye(d), np.zeros((d, d))
    A = expm(kernel.F * delta)
    Q = kernel.Pinf - A @ kernel.Pinf @ A.T
    Q = 0.5 * (Q + Q.T)
    return A, Q


def eval_product_kernel(spec: ProductKernelSpec, P: np.ndarray) -> np.ndarray:
    """Gram matrix of the product kernel on feature rows P (N_p × D_p)."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if not np.all(np.isfinite(P)):
        raise InvalidHyperparameter("product features must be finite")
    if spec.family == "independent":
        eq = np.all(P[:, None, :] == P[None, :, :], axis=-1)
        return spec.variance * eq.astype(float)
    d2 = np.sum((P[:, None, :] - P[None, :, :]) ** 2, axis=-1)
    if spec.family == "rbf":
        G = spec.variance * np.exp(-d2 / spec.lengthscale**2)
    else:  # matern32
        r = np.sqrt(3.0 * d2) / spec.lengthscale
        G = spec.variance * (1.0 + r) * np.exp(-r)
    return 0.5 * (G + G.T)


@dataclass(frozen=True)
class JointStateModel:
    """Discrete joint state-space model over N_p products on a fixed time grid.

    Transitions are stored per unique step size; `step_index[n]` selects the
    transition from step n−1 into step n (step 0 starts from the stationary
    prior).  A_n = I ⊗ A_t(Δ_n), Q_n = G ⊗ Q_t(Δ_n), Pinf = G ⊗ Pinf_t and
    H = I ⊗ H_t, with G the product gram matrix.
    """

    times: np.ndarray
    n_products: int
    temporal: StateSpaceKernel
    gram_p: np.ndarray
    A_unique: np.ndarray  # (K, D, D)
    Q_unique: np.ndarray  # (K, D, D)
    step_index: np.ndarray  # (N,) int; step_index[0] == -1
    H_joint: np.ndarray  # (N_p, D)
    Pinf_joint: np.ndarray  # (D, D)

    @property
    def state_dim(self) -> int:
        return self.Pinf_joint.shape[0]

    @property
    def n_steps(self) -> int:
        return self.times.shape[0]

    def transition(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """(A_n, Q_n) for the step into time index n ≥ 1."""
        k = self.step_index[n]
        if k < 0:
            raise IndexError("step 0 starts from the stationary prior")
        return self.A_unique[k], self.Q_unique[k]


def build_joint_model(
    kernel_t: StateSpaceKernel, gram_p: np.ndarray, time_grid: np.ndarray
) -> JointStateModel:
    """Compose the temporal SDE with a product gram matrix on a time grid."""
    times = np.asarray(time_grid, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("time grid must be a nonempty 1-d array")
    deltas = np.diff(times)
    if times.size > 1 and not np.all(deltas > 0):
        raise ValueError("time grid must be strictly increasing")
    gram_p = np.asarray(gram_p, dtype=float)
    n_p = gram_p.shape[0]
    eye_p = np.eye(n_p)

    uniq, inverse = np.unique(deltas, return_inverse=True)
    A_u = np.empty((uniq.size, n_p * kernel_t.d, n_p * kernel_t.d))
    Q_u = np.empty_like(A_u)
    for k, dt in enumerate(uniq):
        A_t, Q_t = discretize(kernel_t, float(dt))
        A_u[k] = np.kron(eye_p, A_t)
        Q_u[k] = np.kron(gram_p, Q_t)
    step_index = np.concatenate([[-1], inverse]).astype(np.int64)

    return JointStateModel(
        times=times,
        n_products=n_p,
        temporal=kernel_t,
        gram_p=gram_p,
        A_unique=A_u,
        Q_unique=Q_u,
        step_index=step_index,
        H_joint=np.kron(eye_p, kernel_t.H),
        Pinf_joint=np.kron(gram_p, kernel_t.Pinf),
    )
