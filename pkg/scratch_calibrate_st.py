"""Calibration for the spatio-temporal datasets ST-1 / ST-2."""
import sys
import time

import numpy as np

from spillgp.harness import ExperimentConfig, run_experiment


def st_doc(
    seed=287,
    n_diff=1,
    n_iters=120,
    beta=0.5,
    noise_sd=0.2,
    cap=0.3,
    period=50.0,
    qp_ell=1.0,
    qp_var=0.6,
    m_ell=25.0,
    m_var=0.4,
    s_ell=2.0,
    harmonics=6,
    variants=None,
    hyper_every=10,
):
    temporal = {
        "family": "sum",
        "terms": [
            {
                "family": "quasiperiodic",
                "lengthscale": qp_ell,
                "variance": qp_var,
                "period": period,
                "n_harmonics": harmonics,
            },
            {"family": "matern32", "lengthscale": m_ell, "variance": m_var},
        ],
    }
    return {
        "experiment": {
            "name": f"st{n_diff}",
            "seed": seed,
            "variants": variants or ["oracle", "ncgp", "cgp", "dcgp_f", "dcgp_l"],
        },
        "dataset": {
            "kind": "gp",
            "n_products": 10,
            "n_times": 400,
            "noise_sd": noise_sd,
            "feature_range": [-2.0, 2.0],
            "gp_temporal": temporal,
            "gp_product": {"family": "matern32", "lengthscale": s_ell, "variance": 1.0},
            "censoring": {"kind": "markov", "p_out": 0.03, "p_in": 0.10, "cap_value": cap},
            "transfer": {"ell_diff": 0.1, "pi_sink": 0.2, "n_diff": n_diff},
            "split": {"strategy": "evenly_spaced", "n_train": 130, "n_test": 270},
        },
        "model": {
            "temporal": temporal,
            "product": {"family": "matern32", "lengthscale": s_ell, "variance": 1.0},
            "diffusion": {"ell_diff": 0.1, "pi_sink": 0.2, "n_diff": n_diff},
        },
        "likelihood": {"sigma2_init": 0.1},
        "quadrature": {"scheme": "unscented"},
        "fit": {
            "beta": beta,
            "n_iters": n_iters,
            "hyper_lr": 0.1,
            "hyper_every": hyper_every,
            "frozen": ["kt.t0.period", "kp.variance"],
        },
    }


def report(res):
    print(f"censored cells: {res.panel.C.mean():.3f} per-series {res.panel.C.mean(axis=0).round(2)}")
    print(f"F_true std: {res.panel.F_true.std():.3f}")
    for row in res.table.rows:
        if row["split"] == "test" and row.get("status") == "ok":
            print(
                f"  {row['variant']:14s} test nlpd {row['nlpd']:+.3f} rmse {row['rmse']:.3f} "
                f"r2 {row['r2']:.3f} rmse_funct {row['rmse_funct']:.3f}"
            )


if __name__ == "__main__":
    n_iters = int(sys.argv[1]) if len(sys.argv) > 1 else 80
    kw = {}
    for arg in sys.argv[2:]:
        k, v = arg.split("=")
        kw[k] = float(v) if "." in v or "e" in v else int(v)
    doc = st_doc(n_iters=n_iters, **kw)
    t0 = time.time()
    res = run_experiment(ExperimentConfig.from_dict(doc))
    print(f"{time.time() - t0:.0f}s")
    report(res)
