#!/usr/bin/env python3
"""Regenerate configs/example_data.csv, the dataset behind the example configs.

Two correlated exposure groups, one fixed effect, and an outcome built from
smooth main effects plus a product interaction between the leading columns
of the two groups, strong enough for the test to detect at n = 120.
"""

import os
import sys

import numpy as np

from kmint.data import write_dataset_csv

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, os.pardir, "configs", "example_data.csv")


def main() -> int:
    rng = np.random.default_rng(2024)
    n = 120
    A = rng.standard_normal((n, 3)) @ np.array([[1.0, 0.4, 0.0],
                                                [0.0, 1.0, 0.3],
                                                [0.0, 0.0, 1.0]])
    B = rng.standard_normal((n, 2)) @ np.array([[1.0, 0.5],
                                                [0.0, 1.0]])
    age = rng.uniform(30.0, 70.0, n)
    y = (np.sin(A[:, 0]) + 0.5 * A[:, 1] + B[:, 0]
         + 0.8 * A[:, 0] * B[:, 0]
         + 0.02 * (age - 50.0)
         + 0.5 * rng.standard_normal(n))
    cols = write_dataset_csv(OUT, y, {"exposure_a": A, "exposure_b": B},
                             X=age[:, None], fixed_names=["age"])
    print(f"wrote {os.path.normpath(OUT)} with groups {cols}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
