# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Kalman filter and RTS smoother cores.

Same array-level contract as `_filter_py`; removes the per-step Python
overhead that dominates at small state dimensions.  All matrices are
C-contiguous; BLAS/LAPACK calls use the transposed (column-major) view,
with symmetric operands exploited where possible.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport log, fabs, M_PI
from scipy.linalg.cython_blas cimport dgemm, dgemv
from scipy.linalg.cython_lapack cimport dgetrf, dgetrs, dpotrf, dpotrs

cnp.import_array()


class CorruptSites(ValueError):
    """Site parameters produced a non-positive-definite update."""


cdef inline void _mm(double* C, double* A, double* B,
                     int m, int n, int k,
                     double alpha, double beta,
                     char ta, char tb,
                     int lda, int ldb) noexcept:
    # Row-major C (m,n) = alpha*op(A)(m,k) @ op(B)(k,n) + beta*C via the
    # column-major identity C^T = op(B)^T op(A)^T.
    dgemm(&tb, &ta, &n, &m, &k, &alpha, B, &ldb, A, &lda, &beta, C, &n)


cdef inline void _mv(double* y, double* A, double* x, int m, int n,
                     double alpha, double beta) noexcept:
    # y (m,) = alpha * A (m,n) @ x + beta*y for row-major A.
    cdef char t = b'T'
    cdef int one = 1
    dgemv(&t, &n, &m, &alpha, A, &n, x, &one, &beta, y, &one)


cdef inline void _symmetrize(double* M, int n) noexcept:
    cdef int i, j
    cdef double v
    for i in range(n):
        for j in range(i):
            v = 0.5 * (M[i * n + j] + M[j * n + i])
            M[i * n + j] = v
            M[j * n + i] = v


cdef inline double _dot(double* a, double* b, int n) noexcept:
    cdef int i
    cdef double s = 0.0
    for i in range(n):
        s += a[i] * b[i]
    return s


cdef int _potrf_jitter(double* M, double* work, int n) noexcept:
    # Cholesky with one jittered retry; factor left in `work`.
    # Returns 0 on success.
    cdef int info, i
    cdef char lo = b'L'
    cdef double tr = 0.0
    for i in range(n * n):
        work[i] = M[i]
    dpotrf(&lo, &n, work, &n, &info)
    if info == 0:
        return 0
    for i in range(n):
        tr += M[i * n + i]
    tr = 1e-8 * (tr / n + 1.0)
    for i in range(n * n):
        work[i] = M[i]
    for i in range(n):
        work[i * n + i] += tr
    dpotrf(&lo, &n, work, &n, &info)
    return info


def filter_pass(double[:, :, ::1] A_u, double[:, :, ::1] Q_u,
                cnp.int64_t[::1] idx,
                double[:, ::1] Pinf, double[:, ::1] H,
                double[:, ::1] lam1, double[:, :, ::1] Lam,
                unsigned char[::1] active):
    """Forward pass.  Returns (fm, fP, log_weight_unnorm, kappa_sum)."""
    cdef int N = idx.shape[0]
    cdef int D = Pinf.shape[0]
    cdef int P_ = H.shape[0]
    cdef int n, i, j, k, info, nrhs
    cdef char lo = b'L', tr = b'T'
    cdef double log_w = 0.0, kappa = 0.0, ld

    fm_arr = np.zeros((N, D))
    fP_arr = np.zeros((N, D, D))
    cdef double[:, ::1] fm = fm_arr
    cdef double[:, :, ::1] fP = fP_arr

    m_arr = np.zeros(D)
    P_arr = np.array(Pinf, copy=True)
    tmpD_arr = np.zeros((D, D))
    W_arr = np.zeros((D, P_))
    WG_arr = np.zeros((D, P_))
    C_arr = np.zeros((P_, P_))
    B_arr = np.zeros((P_, P_))
    G_arr = np.zeros((P_, P_))
    Lw_arr = np.zeros((P_, P_))
    mu0_arr = np.zeros(P_)
    s_arr = np.zeros(P_)
    r_arr = np.zeros(P_)
    x_arr = np.zeros(P_)
    mtmp_arr = np.zeros(D)
    ipiv_arr = np.zeros(P_, dtype=np.int32)

    cdef double[::1] m = m_arr, mu0 = mu0_arr, s = s_arr, r = r_arr, x = x_arr, mtmp = mtmp_arr
    cdef double[:, ::1] P = P_arr, tmpD = tmpD_arr, W = W_arr, WG = WG_arr
    cdef double[:, ::1] C = C_arr, B = B_arr, G = G_arr, Lw = Lw_arr
    cdef int[::1] ipiv = ipiv_arr

    for n in range(N):
        k = idx[n]
        if k >= 0:
            # predict: m = A m, P = A P Aᵀ + Q
            _mv(&mtmp[0], &A_u[k, 0, 0], &m[0], D, D, 1.0, 0.0)
            m[:] = mtmp
            _mm(&tmpD[0, 0], &A_u[k, 0, 0], &P[0, 0], D, D, D, 1.0, 0.0, b'N', b'N', D, D)
            P[:, :] = Q_u[k]
            _mm(&P[0, 0], &tmpD[0, 0], &A_u[k, 0, 0], D, D, D, 1.0, 1.0, b'N', b'T', D, D)
            _symmetrize(&P[0, 0], D)
        if active[n]:
            # W = P Hᵀ, μ0 = H m, C = H W, B = I + Λ C
            _mm(&W[0, 0], &P[0, 0], &H[0, 0], D, P_, D, 1.0, 0.0, b'N', b'T', D, D)
            _mv(&mu0[0], &H[0, 0], &m[0], P_, D, 1.0, 0.0)
            _mm(&C[0, 0], &H[0, 0], &W[0, 0], P_, P_, D, 1.0, 0.0, b'N', b'N', D, P_)
            for i in range(P_):
                for j in range(P_):
                    B[i, j] = 1.0 if i == j else 0.0
            _mm(&B[0, 0], &Lam[n, 0, 0], &C[0, 0], P_, P_, P_, 1.0, 1.0, b'N', b'N', P_, P_)
            dgetrf(&P_, &P_, &B[0, 0], &P_, &ipiv[0], &info)
            if info != 0:
                raise CorruptSites("singular site update matrix")
            # s = B⁻¹(λ1 − Λ μ0)
            _mv(&s[0], &Lam[n, 0, 0], &mu0[0], P_, P_, -1.0, 0.0)
            for i in range(P_):
                s[i] += lam1[n, i]
            nrhs = 1
            dgetrs(&tr, &P_, &nrhs, &B[0, 0], &P_, &ipiv[0], &s[0], &P_, &info)
            # r = μ0 + C s
            r[:] = mu0
            _mv(&r[0], &C[0, 0], &s[0], P_, P_, 1.0, 1.0)
            # G = Λ B⁻ᵀ (symmetric): rows of the solved buffer are B⁻¹ Λ[:,j]
            G[:, :] = Lam[n]
            dgetrs(&tr, &P_, &P_, &B[0, 0], &P_, &ipiv[0], &G[0, 0], &P_, &info)
            _symmetrize(&G[0, 0], P_)
            # m += W s;  P −= (W G) Wᵀ
            _mv(&m[0], &W[0, 0], &s[0], D, P_, 1.0, 1.0)
            _mm(&WG[0, 0], &W[0, 0], &G[0, 0], D, P_, P_, 1.0, 0.0, b'N', b'N', P_, P_)
            _mm(&P[0, 0], &WG[0, 0], &W[0, 0], D, D, P_, -1.0, 1.0, b'N', b'T', P_, P_)
            _symmetrize(&P[0, 0], D)

            ld = 0.0
            for i in range(P_):
                ld += log(fabs(B[i, i]))
            log_w += -0.5 * ld + 0.5 * (_dot(&mu0[0], &s[0], P_) + _dot(&lam1[n, 0], &r[0], P_))

            # site normalizer: −½(N_p log 2π − log|Λ| + λ1ᵀΛ⁻¹λ1)
            Lw[:, :] = Lam[n]
            dpotrf(&lo, &P_, &Lw[0, 0], &P_, &info)
            if info != 0:
                raise CorruptSites("site precision is not positive definite")
            ld = 0.0
            for i in range(P_):
                ld += log(Lw[i, i])
            for i in range(P_):
                x[i] = lam1[n, i]
            nrhs = 1
            dpotrs(&lo, &P_, &nrhs, &Lw[0, 0], &P_, &x[0], &P_, &info)
            kappa += -0.5 * (P_ * log(2.0 * M_PI) - 2.0 * ld + _dot(&lam1[n, 0], &x[0], P_))
        fm[n, :] = m
        fP[n, :, :] = P
    return fm_arr, fP_arr, log_w, kappa


def smoother_pass(double[:, :, ::1] A_u, double[:, :, ::1] Q_u,
                  cnp.int64_t[::1] idx,
                  double[:, ::1] fm, double[:, :, ::1] fP):
    """Backward Rauch-Tung-Striebel pass over filtered moments."""
    cdef int N = fm.shape[0]
    cdef int D = fm.shape[1]
    cdef int n, i, k, info, nrhs
    cdef char lo = b'L'

    sm_arr = np.empty((N, D))
    sP_arr = np.empty((N, D, D))
    cdef double[:, ::1] sm = sm_arr
    cdef double[:, :, ::1] sP = sP_arr

    PA_arr = np.zeros((D, D))
    Pp_arr = np.zeros((D, D))
    Ch_arr = np.zeros((D, D))
    G_arr = np.zeros((D, D))
    dP_arr = np.zeros((D, D))
    GdP_arr = np.zeros((D, D))
    v_arr = np.zeros(D)
    av_arr = np.zeros(D)
    cdef double[:, ::1] PA = PA_arr, Pp = Pp_arr, Ch = Ch_arr, G = G_arr, dP = dP_arr, GdP = GdP_arr
    cdef double[::1] v = v_arr, av = av_arr

    sm[N - 1, :] = fm[N - 1]
    sP[N - 1, :, :] = fP[N - 1]
    for n in range(N - 2, -1, -1):
        k = idx[n + 1]
        # PA = fP[n] Aᵀ, Pp = A PA + Q
        _mm(&PA[0, 0], &fP[n, 0, 0], &A_u[k, 0, 0], D, D, D, 1.0, 0.0, b'N', b'T', D, D)
        Pp[:, :] = Q_u[k]
        _mm(&Pp[0, 0], &A_u[k, 0, 0], &PA[0, 0], D, D, D, 1.0, 1.0, b'N', b'N', D, D)
        _symmetrize(&Pp[0, 0], D)
        # G = PA Pp⁻¹: rows of PA become Pp⁻¹ PA[j,:] (Pp symmetric)
        info = _potrf_jitter(&Pp[0, 0], &Ch[0, 0], D)
        if info != 0:
            raise np.linalg.LinAlgError("predicted covariance is singular even with jitter")
        G[:, :] = PA
        nrhs = D
        dpotrs(&lo, &D, &nrhs, &Ch[0, 0], &D, &G[0, 0], &D, &info)
        # v = sm[n+1] − A fm[n]
        _mv(&av[0], &A_u[k, 0, 0], &fm[n, 0], D, D, 1.0, 0.0)
        for i in range(D):
            v[i] = sm[n + 1, i] - av[i]
        sm[n, :] = fm[n]
        _mv(&sm[n, 0], &G[0, 0], &v[0], D, D, 1.0, 1.0)
        # sP[n] = fP[n] + G (sP[n+1] − Pp) Gᵀ
        for i in range(D * D):
            (&dP[0, 0])[i] = (&sP[n + 1, 0, 0])[i] - (&Pp[0, 0])[i]
        _mm(&GdP[0, 0], &G[0, 0], &dP[0, 0], D, D, D, 1.0, 0.0, b'N', b'N', D, D)
        sP[n, :, :] = fP[n]
        _mm(&sP[n, 0, 0], &GdP[0, 0], &G[0, 0], D, D, D, 1.0, 1.0, b'N', b'T', D, D)
        _symmetrize(&sP[n, 0, 0], D)
    return sm_arr, sP_arr
