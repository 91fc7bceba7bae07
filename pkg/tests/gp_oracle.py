"""Independent dense GP regression oracle for cross-checking inference.

Everything here is written directly from the closed-form kernel and the
textbook O(N³) GP regression equations, without using the package's
state-space machinery, so it can serve as an independent reference.
Cell ordering is time-major: cell (n, k) has flat index n * N_p + k.
"""

import numpy as np
from scipy.special import ive


def matern12(tau, ell, var):
    return var * np.exp(-np.abs(tau) / ell)


def matern32(tau, ell, var):
    a = np.sqrt(3.0) * np.abs(tau) / ell
    return var * (1.0 + a) * np.exp(-a)


def matern52(tau, ell, var):
    a = np.sqrt(5.0) * np.abs(tau) / ell
    return var * (1.0 + a + a**2 / 3.0) * np.exp(-a)


def quasiperiodic(tau, ell, var, period, n_harmonics):
    """Truncated, renormalized harmonic expansion of the periodic kernel."""
    j = np.arange(n_harmonics)
    q2 = (2.0 - (j == 0)) * ive(j, 1.0 / ell**2)
    q2 = q2 / q2.sum()
    omega = 2.0 * np.pi / period
    tau = np.asarray(tau, dtype=float)
    return var * np.sum(q2 * np.cos(np.multiply.outer(tau, j * omega)), axis=-1)


def temporal_kernel_fn(spec):
    """Closed-form r(τ) for a TemporalKernelSpec-like object."""
    if spec.family == "sum":
        fns = [temporal_kernel_fn(t) for t in spec.terms]
        return lambda tau: sum(f(tau) for f in fns)
    if spec.family == "matern12":
        return lambda tau: matern12(tau, spec.lengthscale, spec.variance)
    if spec.family == "matern32":
        return lambda tau: matern32(tau, spec.lengthscale, spec.variance)
    if spec.family == "matern52":
        return lambda tau: matern52(tau, spec.lengthscale, spec.variance)
    if spec.family == "quasiperiodic":
        return lambda tau: quasiperiodic(
            tau, spec.lengthscale, spec.variance, spec.period, spec.n_harmonics
        )
    raise ValueError(spec.family)


def product_gram(spec, P):
    P = np.atleast_2d(P)
    if spec.family == "independent":
        eq = np.all(P[:, None, :] == P[None, :, :], axis=-1)
        return spec.variance * eq.astype(float)
    d2 = np.sum((P[:, None, :] - P[None, :, :]) ** 2, axis=-1)
    if spec.family == "rbf":
        return spec.variance * np.exp(-d2 / spec.lengthscale**2)
    if spec.family == "matern32":
        a = np.sqrt(3.0 * d2) / spec.lengthscale
        return spec.variance * (1.0 + a) * np.exp(-a)
    raise ValueError(spec.family)


def joint_gram(temporal_spec, product_spec, times, features):
    kt = temporal_kernel_fn(temporal_spec)
    Kt = kt(times[:, None] - times[None, :])
    Gp = product_gram(product_spec, features)
    return np.kron(Kt, Gp)


def dense_gp_posterior(K, y_flat, noise_var_flat, observed_flat):
    """Posterior mean/cov at every cell plus the log marginal likelihood.

    K: full gram over all cells; observations are the cells flagged in
    observed_flat, with heteroscedastic noise variances noise_var_flat.
    """
    obs = np.nonzero(observed_flat)[0]
    Koo = K[np.ix_(obs, obs)] + np.diag(noise_var_flat[obs])
    Kxo = K[:, obs]
    yo = y_flat[obs]
    sol = np.linalg.solve(Koo, yo)
    mean = Kxo @ sol
    cov = K - Kxo @ np.linalg.solve(Koo, Kxo.T)
    sign, logdet = np.linalg.slogdet(Koo)
    log_ml = -0.5 * (yo @ sol) - 0.5 * logdet - 0.5 * obs.size * np.log(2.0 * np.pi)
    return mean, cov, float(log_ml)
