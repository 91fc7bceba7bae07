"""Parity between the compiled and pure-Python filter/smoother cores."""

import numpy as np
import pytest

from spillgp import backend
from spillgp._filter_py import filter_pass as filter_py
from spillgp._filter_py import smoother_pass as smoother_py

pytestmark = pytest.mark.skipif(
    not backend.HAVE_COMPILED, reason="compiled extension not built"
)


def _random_problem(rng, D, n_p, N, n_tables=3):
    A_u = np.empty((n_tables, D, D))
    Q_u = np.empty((n_tables, D, D))
    for k in range(n_tables):
        A_u[k] = np.eye(D) * 0.9 + 0.05 * rng.standard_normal((D, D))
        S = rng.standard_normal((D, D))
        Q_u[k] = 0.01 * (S @ S.T + np.eye(D))
    idx = np.concatenate([[-1], rng.integers(0, n_tables, N - 1)]).astype(np.int64)
    S = rng.standard_normal((D, D))
    Pinf = S @ S.T + np.eye(D)
    H = rng.standard_normal((n_p, D))
    lam1 = rng.standard_normal((N, n_p))
    Lam = np.empty((N, n_p, n_p))
    for n in range(N):
        S = rng.standard_normal((n_p, n_p))
        Lam[n] = S @ S.T + 0.1 * np.eye(n_p)
    active = (rng.uniform(size=N) < 0.8).astype(np.uint8)
    active[0] = 1
    return A_u, Q_u, idx, Pinf, H, lam1, Lam, active


@pytest.mark.parametrize("D,n_p,N", [(2, 1, 60), (6, 2, 40), (20, 4, 25)])
def test_filter_cores_agree(rng, D, n_p, N):
    from spillgp._filter_cy import filter_pass as filter_cy

    prob = _random_problem(rng, D, n_p, N)
    fm1, fP1, lw1, ka1 = filter_py(*prob)
    fm2, fP2, lw2, ka2 = filter_cy(*prob)
    scale = np.abs(fm1).max() + 1.0
    assert np.abs(fm1 - fm2).max() < 1e-10 * scale
    assert np.abs(fP1 - fP2).max() < 1e-10 * scale
    assert lw1 == pytest.approx(lw2, rel=1e-12, abs=1e-9)
    assert ka1 == pytest.approx(ka2, rel=1e-12, abs=1e-9)


@pytest.mark.parametrize("D,n_p,N", [(2, 1, 60), (6, 2, 40), (20, 4, 25)])
def test_smoother_cores_agree(rng, D, n_p, N):
    from spillgp._filter_cy import filter_pass as filter_cy
    from spillgp._filter_cy import smoother_pass as smoother_cy

    prob = _random_problem(rng, D, n_p, N)
    A_u, Q_u, idx = prob[0], prob[1], prob[2]
    fm, fP, _, _ = filter_cy(*prob)
    sm1, sP1 = smoother_py(A_u, Q_u, idx, fm, fP)
    sm2, sP2 = smoother_cy(A_u, Q_u, idx, fm, fP)
    scale = np.abs(sm1).max() + 1.0
    assert np.abs(sm1 - sm2).max() < 1e-10 * scale
    assert np.abs(sP1 - sP2).max() < 1e-10 * scale


def test_corrupt_sites_raise_in_both_cores(rng):
    from spillgp import _filter_cy

    prob = list(_random_problem(rng, 4, 2, 10))
    prob[6] = prob[6].copy()
    prob[6][3] = np.array([[1.0, 0.0], [0.0, -2.0]])  # indefinite site precision
    with pytest.raises(backend.CorruptSites):
        filter_py(*prob)
    with pytest.raises(_filter_cy.CorruptSites):
        _filter_cy.filter_pass(*prob)


def test_backend_selection_roundtrip():
    initial = backend.active_backend()
    try:
        assert backend.use_backend("python") == "python"
        assert backend.active_backend() == "python"
        assert backend.use_backend("auto") in ("compiled", "python")
        with pytest.raises(ValueError, match="unavailable"):
            backend.use_backend("fortran")
    finally:
        backend.use_backend(initial)


def test_end_to_end_fit_identical_across_backends(rng):
    from spillgp.inference import FitConfig, fit, predict
    from spillgp.kernels import ProductKernelSpec, TemporalKernelSpec
    from spillgp.likelihoods import LikelihoodParams
    from spillgp.simdata import gen_sinusoid_panel, split

    panel = gen_sinusoid_panel(
        [[1, 0, 0, 0.5, 1], [1, 1, 0, 0.4, 2]], 50, 10.0, 0.1, seed=5
    )
    panel = split(panel, "evenly_spaced", n_train=25, n_test=25)
    spec = TemporalKernelSpec("matern32")
    pspec = ProductKernelSpec("independent")
    lik = LikelihoodParams("tobit", 0.1)
    cfg = FitConfig(beta=0.5, n_iters=5, learn_hypers=False)
    initial = backend.active_backend()
    try:
        backend.use_backend("python")
        a = predict(fit(panel, spec, pspec, lik, cfg), panel.times)
        backend.use_backend("compiled")
        b = predict(fit(panel, spec, pspec, lik, cfg), panel.times)
    finally:
        backend.use_backend(initial)
    assert np.abs(a.mean - b.mean).max() < 1e-9
    assert np.abs(a.var - b.var).max() < 1e-9
