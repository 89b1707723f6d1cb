#!/usr/bin/env python3
"""Regenerate the frozen constants pinned in the test suite.

A handful of tests pin the outcome of a seeded run (a selected grid index, a
recovered bandwidth, a variance ratio) as a regression guard. This script
recomputes each of those values from the same seeds so the pins can be
audited or refreshed after an intentional behavior change. Output is one
line per constant: where it is pinned, the seed, and the regenerated value.
"""

import math
import sys

import numpy as np

from kmint.ensemble import EnsembleConfig, RBF_ENSEMBLE_LIBRARY, cvek
from kmint.kernels import KernelSpec, center_kernel, kernel_matrix, trace_standardize
from kmint.ridge import (
    default_lambda_grid,
    reml_fit,
    reml_tune_rbf,
    tune_lambda,
)
from kmint.simulate import RBF_MLE_SIGMA_GRID, sample_rkhs_function


def std_rbf(Z, sigma=1.0):
    return trace_standardize(kernel_matrix(KernelSpec("rbf", sigma=sigma), Z))


def main() -> int:
    # tests/test_ridge.py::test_tune_lambda_noise_avoids_least_shrinkage
    rng = np.random.default_rng(314)
    K = std_rbf(rng.standard_normal((40, 2)))
    y = np.random.default_rng(99).standard_normal(40)
    grid = default_lambda_grid()
    lam, _ = tune_lambda(K, y, grid)
    idx = int(np.flatnonzero(grid == lam)[0])
    print(f"tune_lambda grid index (K seed 314, y seed 99): {idx} "
          f"(lambda={lam:.6g}); pinned as 11 in tests/test_ridge.py")

    # tests/test_ridge.py::test_reml_pure_noise_keeps_variance_ratio_small
    rng = np.random.default_rng(555)
    K = std_rbf(rng.standard_normal((200, 3)))
    fit = reml_fit(K, np.ones((200, 1)), rng.standard_normal(200))
    print(f"REML pure-noise tau/sigma2 (seed 555): {fit.tau / fit.sigma2:.6g}; "
          f"bounded by 0.2 in tests/test_ridge.py")

    # tests/test_ridge.py::test_reml_tune_rbf_recovers_generating_bandwidth
    # tests/test_ensemble.py::test_cvek_recovers_generating_bandwidth
    rng = np.random.default_rng(42)
    Z1 = rng.standard_normal((200, 3))
    Z2 = rng.standard_normal((200, 3))
    gen = KernelSpec("rbf", sigma=1.0)
    h1 = sample_rkhs_function(center_kernel(kernel_matrix(gen, Z1)).values, rng)
    h2 = sample_rkhs_function(center_kernel(kernel_matrix(gen, Z2)).values, rng)
    y = h1 + h2 + 0.5 * rng.standard_normal(200)
    spec = reml_tune_rbf({"z1": Z1, "z2": Z2}, np.ones((200, 1)), y,
                         RBF_MLE_SIGMA_GRID)
    print(f"REML-selected bandwidth (seed 42): sigma={spec.sigma:.6g} "
          f"(|log sigma|={abs(math.log(spec.sigma)):.3f}); bounded by one "
          f"grid step (0.5) in tests/test_ridge.py")
    ens = cvek(RBF_ENSEMBLE_LIBRARY, {"z1": Z1, "z2": Z2}, y, EnsembleConfig())
    top = ens.library[int(np.argmax(ens.weights))]["z1"]
    print(f"Ensemble-winning bandwidth (seed 42): sigma={top.sigma:.6g} "
          f"weights={np.round(ens.weights, 4).tolist()}; bounded by one "
          f"library step (1.0) in tests/test_ensemble.py")
    return 0


if __name__ == "__main__":
    sys.exit(main())
