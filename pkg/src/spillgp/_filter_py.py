"""Pure-NumPy Kalman filter and RTS smoother cores.

Reference implementation of the array-level contract shared with the
compiled extension (see `backend`).  Sites enter in natural form
(λ1, Λ = −2λ2) so rank-deficient sites (missing cells, held-out steps) need
no special casing: Λ = 0 reduces the update to a pure predict.

Per active step with predictive f-moments μ0 = H m⁻, C = H P⁻ Hᵀ and
B = I + Λ C, the update is

    s = B⁻¹ (λ1 − Λ μ0),   m = m⁻ + P⁻Hᵀ s,   P = P⁻ − P⁻Hᵀ (B⁻¹Λ)ᵀ H P⁻,

and the step contributes log ∫ N(f; μ0, C) exp(λ1ᵀf − ½ fᵀΛf) df
 = −½ log|B| + ½ (μ0ᵀ s + λ1ᵀ r), r = μ0 + C s, to the unnormalized log
weight.  Adding the site normalizer κ = −½(N_p log 2π − log|Λ| + λ1ᵀΛ⁻¹λ1)
per step recovers the surrogate-model log marginal likelihood.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla


class CorruptSites(ValueError):
    """Site parameters produced a non-positive-definite update."""


def _solve_psd(M: np.ndarray, B: np.ndarray, what: str) -> np.ndarray:
    """Solve M X = B for symmetric PSD M with a jittered retry."""
    try:
        cf = sla.cho_factor(M, lower=True, check_finite=False)
        return sla.cho_solve(cf, B, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-8 * (np.trace(M) / M.shape[0] + 1.0)
    try:
        cf = sla.cho_factor(M + jitter * np.eye(M.shape[0]), lower=True, check_finite=False)
        return sla.cho_solve(cf, B, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"{what} is singular even with jitter") from exc


def filter_pass(A_u, Q_u, idx, Pinf, H, lam1, Lam, active):
    """Forward pass.  Returns (fm, fP, log_weight_unnorm, kappa_sum).

    A_u/Q_u: (K, D, D) unique transitions; idx: (N,) table index per step
    (idx[0] = −1 starts from the stationary prior); H: (N_p, D);
    lam1: (N, N_p); Lam: (N, N_p, N_p) PSD; active: (N,) bool.
    """
    N = idx.shape[0]
    D = Pinf.shape[0]
    n_p = H.shape[0]
    eye_p = np.eye(n_p)

    fm = np.zeros((N, D))
    fP = np.zeros((N, D, D))
    m = np.zeros(D)
    P = Pinf.copy()
    log_w = 0.0
    kappa = 0.0

    for n in range(N):
        k = idx[n]
        if k >= 0:
            A = A_u[k]
            m = A @ m
            P = A @ P @ A.T + Q_u[k]
            P = 0.5 * (P + P.T)
        if active[n]:
            l1 = lam1[n]
            Lm = Lam[n]
            W = P @ H.T
            mu0 = H @ m
            C = H @ W
            B = eye_p + Lm @ C
            try:
                lu, piv = sla.lu_factor(B, check_finite=False)
            except ValueError as exc:  # pragma: no cover - non-finite input
                raise CorruptSites(str(exc)) from exc
            s = sla.lu_solve((lu, piv), l1 - Lm @ mu0, check_finite=False)
            r = mu0 + C @ s
            G = sla.lu_solve((lu, piv), Lm, check_finite=False).T  # Λ B⁻ᵀ, symmetric
            G = 0.5 * (G + G.T)
            m = m + W @ s
            P = P - W @ G @ W.T
            P = 0.5 * (P + P.T)

            ld = np.log(np.abs(np.diag(lu))).sum()
            log_w += -0.5 * ld + 0.5 * (mu0 @ s + l1 @ r)
            try:
                cf = sla.cho_factor(Lm, lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise CorruptSites("site precision is not positive definite") from exc
            kappa += -0.5 * (
                n_p * np.log(2.0 * np.pi)
                - 2.0 * np.log(np.diag(cf[0])).sum()
                + l1 @ sla.cho_solve(cf, l1, check_finite=False)
            )
        fm[n] = m
        fP[n] = P
    return fm, fP, log_w, kappa


def smoother_pass(A_u, Q_u, idx, fm, fP):
    """Backward Rauch-Tung-Striebel pass over filtered moments."""
    N = fm.shape[0]
    sm = np.empty_like(fm)
    sP = np.empty_like(fP)
    sm[N - 1] = fm[N - 1]
    sP[N - 1] = fP[N - 1]
    for n in range(N - 2, -1, -1):
        k = idx[n + 1]
        A = A_u[k]
        AP = A @ fP[n]
        Pp = AP @ A.T + Q_u[k]
        Pp = 0.5 * (Pp + Pp.T)
        G = _solve_psd(Pp, AP, "predicted covariance").T
        sm[n] = fm[n] + G @ (sm[n + 1] - A @ fm[n])
        sP[n] = fP[n] + G @ (sP[n + 1] - Pp) @ G.T
        sP[n] = 0.5 * (sP[n] + sP[n].T)
    return sm, sP
