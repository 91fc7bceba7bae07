"""Calibration runs for the independent-series datasets (not shipped)."""
import sys
import time

import numpy as np

from spillgp.harness import ExperimentConfig, run_experiment


def datasetA_doc(seed=101, thetas=None, threshold=(0.65, 0.6), n_iters=300, beta=0.1):
    thetas = thetas or [[0.5, 0.0, 0.0, 1.5, 0.8], [0.45, 0.7, 0.0, 1.3, 2.1]]
    return {
        "experiment": {
            "name": "datasetA",
            "seed": seed,
            "variants": ["oracle", "ncgp", "cgp", "dcgp_f", "dcgp_l"],
        },
        "dataset": {
            "kind": "sinusoid",
            "n_times": 1400,
            "t_max": 28.0,
            "noise_sd": 0.1,
            "thetas": thetas,
            "features": [[-1.0, -1.0], [1.0, 1.0]],
            "censoring": {"kind": "constant", "threshold": list(threshold)},
            "transfer": {"ell_diff": 1.0, "pi_sink": 0.0, "n_diff": 1},
            "split": {"strategy": "evenly_spaced", "n_train": 400, "n_test": 1000},
        },
        "model": {
            "temporal": {"family": "matern32", "lengthscale": 1.0, "variance": 1.0},
            "product": {"family": "independent", "variance": 1.0},
            "diffusion": {"ell_diff": 1.0, "pi_sink": 0.0, "n_diff": 1},
        },
        "likelihood": {"sigma2_init": 0.1},
        "quadrature": {"scheme": "gauss_hermite", "order": 10},
        "fit": {"beta": beta, "n_iters": n_iters, "hyper_lr": 0.1, "hyper_every": 10},
    }


if __name__ == "__main__":
    n_iters = int(sys.argv[1]) if len(sys.argv) > 1 else 100
    doc = datasetA_doc(n_iters=n_iters)
    cfg = ExperimentConfig.from_dict(doc)
    t0 = time.time()
    res = run_experiment(cfg)
    print(f"{time.time() - t0:.1f}s  censored frac: {res.panel.C.mean(axis=0)}")
    print(res.table.render())
    targets = {"ncgp": 0.163, "cgp": 0.130, "dcgp_f": 0.051}
    for v, ref in targets.items():
        for s in ("train", "test"):
            got = res.table.get(v, s)["rmse_funct"]
            ok = abs(got - ref) <= 0.3 * ref
            print(f"{v:8s} {s:5s} rmse_funct {got:.3f} target {ref:.3f} {'OK' if ok else 'MISS'}")
