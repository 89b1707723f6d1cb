"""Synthetic data generation and Monte Carlo rejection-rate experiments.

Ground truth lives in a reproducing-kernel space: two covariate groups are
drawn i.i.d. normal with spread ``input_scale``, main effects are sampled
from the centered truth kernel on those draws, the interaction surface from
the product of the two centered kernels (so it carries no additive part),
each scaled to unit empirical norm, and mixed as

    y = h1 + h2 + delta * h12 + noise_sd * eps.

``input_scale`` and ``noise_sd`` defaults were calibrated once against the
reference rejection-rate tables (see scripts/calibration_pilot.py); together
they set where the fixed-bandwidth model kernels sit on the underfit-overfit
axis and how visible the interaction is at a given delta.

Replicates use independent RNG substreams keyed by (seed, rep_index), so any
replicate can be regenerated in isolation and parallel runs aggregate to the
same result as sequential ones.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

import numpy as np
from joblib import Parallel, delayed

from .data import atomic_write_text
from .ensemble import NN_ENSEMBLE_LIBRARY, RBF_ENSEMBLE_LIBRARY
from .interaction import TestConfig, test_interaction
from .kernels import KernelSpec, center_kernel, kernel_matrix, median_bandwidth
from .ridge import reml_tune_rbf

__all__ = [
    "SimulationScenario",
    "RejectionResult",
    "MODEL_NAMES",
    "truth_kernel",
    "sample_rkhs_function",
    "generate_dataset",
    "model_test_config",
    "run_scenario",
    "reproduce_tables",
]

# Row order of the rate tables.
MODEL_NAMES = (
    "linear",
    "quadratic",
    "rbf_mle",
    "rbf_median",
    "matern_12",
    "matern_32",
    "matern_52",
    "nn_0.1",
    "nn_1",
    "nn_10",
    "cvek_rbf",
    "cvek_nn",
)

DEFAULT_DELTAS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0)

RBF_MLE_SIGMA_GRID = tuple(math.exp(t) for t in np.linspace(-2.0, 2.0, 9))

# Calibrated generation defaults (scripts/calibration_pilot.py). The input
# spread controls pairwise distances and hence effective kernel smoothness;
# the noise level controls how visible a unit-norm interaction is.
DEFAULT_INPUT_SCALE = 0.25
DEFAULT_NOISE_SD = 0.25


def truth_kernel(nu, sigma: float) -> KernelSpec:
    """Truth-kernel spec for a (nu, sigma) cell of the scenario grid.

    nu is 1.5, 2.5, or "inf"; sigma multiplies distance, so larger sigma
    means a rougher function. The nu = inf limit of the Matern family is the
    Gaussian kernel exp(-sigma^2 r^2 / 2); our rbf family is parameterized as
    exp(-r^2 / s^2), hence s = sqrt(2) / sigma.
    """
    sigma = float(sigma)
    if sigma <= 0:
        raise ValueError(f"truth sigma must be positive, got {sigma}")
    if nu in ("inf", math.inf):
        return KernelSpec("rbf", sigma=math.sqrt(2.0) / sigma)
    nu = float(nu)
    return KernelSpec("matern", nu=nu, sigma=sigma)


@dataclass(frozen=True)
class SimulationScenario:
    """One cell of the experiment grid."""

    n: int = 200
    p1: int = 3
    p2: int = 3
    k_true: KernelSpec = KernelSpec("matern", nu=1.5, sigma=1.0)
    delta: float = 0.0
    noise_sd: float = DEFAULT_NOISE_SD
    input_scale: float = DEFAULT_INPUT_SCALE
    reps: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.n < 10:
            raise ValueError(f"n must be at least 10, got {self.n}")
        if self.p1 < 1 or self.p2 < 1:
            raise ValueError("group dimensions must be positive")
        if self.delta < 0:
            raise ValueError(f"delta must be nonnegative, got {self.delta}")
        if self.noise_sd <= 0:
            raise ValueError(f"noise_sd must be positive, got {self.noise_sd}")
        if self.input_scale <= 0:
            raise ValueError(f"input_scale must be positive, got {self.input_scale}")
        if self.reps < 1:
            raise ValueError(f"reps must be at least 1, got {self.reps}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")


def sample_rkhs_function(K, rng, norm: str = "rms") -> np.ndarray:
    """Draw h ~ N(0, K) via the spectral square root, standardized to unit norm.

    With eigendecomposition K = V diag(w) V', the draw is h = V sqrt(w) alpha
    for alpha ~ N(0, I), so h carries energy proportional to w_k along the
    k-th eigendirection. Squashing through K itself (h = K alpha) would weight
    directions by w_k^2 instead, concentrating nearly all energy on the top
    few components; functions drawn that way are fittable by any reasonable
    kernel and produce none of the misfit behavior the rate experiments are
    about. Spectrum-faithful draws keep the tail content that separates the
    model kernels.

    ``norm="rms"`` scales so that sqrt(mean(h_i^2)) = 1 on the design points;
    ``norm="rkhs"`` scales by the function-space norm of the draw, which for
    this construction is ||alpha||. ``rng`` is a numpy Generator or a seed
    for one.
    """
    K = K.values if hasattr(K, "values") else np.asarray(K, dtype=float)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    alpha = rng.standard_normal(K.shape[0])
    w, V = np.linalg.eigh(K)
    w = np.clip(w, 0.0, None)
    h = V @ (np.sqrt(w) * alpha)
    if norm == "rms":
        scale = math.sqrt(float(np.mean(h * h)))
    elif norm == "rkhs":
        scale = math.sqrt(float(alpha[w > 0] @ alpha[w > 0]))
    else:
        raise ValueError(f"norm must be 'rms' or 'rkhs', got {norm!r}")
    if scale <= 0 or not np.isfinite(scale):
        raise ValueError("sampled function is identically zero; kernel matrix degenerate")
    return h / scale


def _rep_rng(scenario: SimulationScenario, rep_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((scenario.seed, rep_index)))


def generate_dataset(scenario: SimulationScenario, rep_index: int,
                     return_parts: bool = False):
    """Generate one replicate (Z1, Z2, y) from the scenario's substream.

    The draw order is fixed (Z1, Z2, alpha1, alpha2, alpha12, eps), so the
    same (scenario, rep_index) always produces the same dataset, and two
    scenarios differing only in delta share everything except the h12 mix-in.
    """
    if rep_index < 0:
        raise ValueError(f"rep_index must be nonnegative, got {rep_index}")
    rng = _rep_rng(scenario, rep_index)
    Z1 = scenario.input_scale * rng.standard_normal((scenario.n, scenario.p1))
    Z2 = scenario.input_scale * rng.standard_normal((scenario.n, scenario.p2))
    # Centered truth kernels: main effects are mean-zero functions of one
    # group, and their product kernel spans pure interaction content only, so
    # delta scales interaction strength and nothing else.
    K1 = center_kernel(kernel_matrix(scenario.k_true, Z1)).values
    K2 = center_kernel(kernel_matrix(scenario.k_true, Z2)).values
    h1 = sample_rkhs_function(K1, rng)
    h2 = sample_rkhs_function(K2, rng)
    h12 = sample_rkhs_function(K1 * K2, rng)
    eps = rng.standard_normal(scenario.n)
    y = h1 + h2 + scenario.delta * h12 + scenario.noise_sd * eps
    if return_parts:
        return Z1, Z2, y, {"h1": h1, "h2": h2, "h12": h12, "eps": eps}
    return Z1, Z2, y


def model_test_config(model: str, groups: Mapping[str, np.ndarray], y,
                      X: Optional[np.ndarray] = None) -> TestConfig:
    """TestConfig for one of the named model kernels.

    Data-adaptive models need the dataset: rbf_median picks one bandwidth per
    group from the median pairwise distance, rbf_mle picks a shared bandwidth
    by restricted-likelihood profiling over a fixed grid.
    """
    if model == "linear":
        library = (KernelSpec("linear"),)
    elif model == "quadratic":
        library = (KernelSpec("polynomial", degree=2),)
    elif model == "rbf_mle":
        if X is None:
            X = np.ones((np.asarray(y).shape[0], 1))
        library = (reml_tune_rbf(groups, X, y, RBF_MLE_SIGMA_GRID),)
    elif model == "rbf_median":
        library = ({g: KernelSpec("rbf", sigma=median_bandwidth(Z))
                    for g, Z in groups.items()},)
    elif model == "matern_12":
        library = (KernelSpec("matern", nu=0.5, sigma=1.0),)
    elif model == "matern_32":
        library = (KernelSpec("matern", nu=1.5, sigma=1.0),)
    elif model == "matern_52":
        library = (KernelSpec("matern", nu=2.5, sigma=1.0),)
    elif model == "nn_0.1":
        library = (KernelSpec("nn", sigma=0.1),)
    elif model == "nn_1":
        library = (KernelSpec("nn", sigma=1.0),)
    elif model == "nn_10":
        library = (KernelSpec("nn", sigma=10.0),)
    elif model == "cvek_rbf":
        library = RBF_ENSEMBLE_LIBRARY
    elif model == "cvek_nn":
        library = NN_ENSEMBLE_LIBRARY
    else:
        raise ValueError(f"unknown model {model!r}; expected one of {MODEL_NAMES}")
    return TestConfig(library=library)


def _replicate(scenario: SimulationScenario, model: str, rep_index: int) -> tuple:
    # Returns (p_value, degenerate, error message or None).
    try:
        Z1, Z2, y = generate_dataset(scenario, rep_index)
        groups = {"z1": Z1, "z2": Z2}
        config = model_test_config(model, groups, y)
        res = test_interaction(groups, y, config=config)
        return res.p_value, res.degenerate, None
    except Exception as e:  # noqa: BLE001 - per-replicate failures are data
        return math.nan, False, f"rep {rep_index}: {type(e).__name__}: {e}"


@dataclass
class RejectionResult:
    """Monte Carlo rejection rate for one (scenario, model) pair."""

    rate: float
    reps: int
    n_rejected: int
    n_valid: int
    n_failed: int
    n_degenerate: int
    p_values: np.ndarray
    errors: List[str]


def run_scenario(scenario: SimulationScenario, model: str,
                 n_jobs: int = 1, alpha: float = 0.05) -> RejectionResult:
    """Estimate P(p <= alpha) for one model under one scenario.

    Replicates run as independent jobs; results are reduced in replicate
    order, so the estimate does not depend on n_jobs. Failed replicates and
    degenerate test results are counted and left out of the rate.
    """
    rows = Parallel(n_jobs=n_jobs)(
        delayed(_replicate)(scenario, model, i) for i in range(scenario.reps)
    )
    p_values = np.array([r[0] for r in rows])
    errors = [r[2] for r in rows if r[2] is not None]
    degenerate = np.array([r[1] for r in rows], dtype=bool)
    failed = np.isnan(p_values) & ~degenerate
    valid = ~failed & ~degenerate
    n_valid = int(valid.sum())
    n_rejected = int((p_values[valid] <= alpha).sum())
    rate = n_rejected / n_valid if n_valid else math.nan
    return RejectionResult(
        rate=rate,
        reps=scenario.reps,
        n_rejected=n_rejected,
        n_valid=n_valid,
        n_failed=int(failed.sum()),
        n_degenerate=int(degenerate.sum()),
        p_values=p_values,
        errors=errors,
    )


SIMULATE_KEYS = {"n", "p1", "p2", "truth", "deltas", "noise_sd", "input_scale",
                 "reps", "seed", "models", "alpha"}


def _truth_cells(truth) -> List[dict]:
    cells = truth if isinstance(truth, list) else [truth]
    out = []
    for cell in cells:
        if not isinstance(cell, dict) or set(cell) != {"nu", "sigma"}:
            raise ValueError(f"each truth cell needs exactly keys nu and sigma, got {cell!r}")
        out.append(cell)
    if not out:
        raise ValueError("'truth' must define at least one (nu, sigma) cell")
    return out


def _cell_tag(cell: dict) -> str:
    nu = cell["nu"]
    nu_tag = "inf" if nu in ("inf", math.inf) else f"{float(nu):g}"
    return f"nu{nu_tag}_sigma{float(cell['sigma']):g}"


def reproduce_tables(sim_cfg: Mapping, out_dir: str, n_jobs: int = 1,
                     seed: Optional[int] = None) -> List[str]:
    """Run the configured grid and write one rate-table CSV per truth cell.

    Tables have rows = models and columns = delta values, with the header
    "model,delta_0,delta_0.1,...". A JSON sidecar per cell records the run
    metadata. Returns the CSV paths.
    """
    unknown = set(sim_cfg) - SIMULATE_KEYS
    if unknown:
        raise ValueError(f"unknown keys in config section 'simulate': {sorted(unknown)}")
    if "truth" not in sim_cfg:
        raise ValueError("config section 'simulate' needs a 'truth' cell list")
    cells = _truth_cells(sim_cfg["truth"])
    deltas = [float(d) for d in sim_cfg.get("deltas", DEFAULT_DELTAS)]
    models = list(sim_cfg.get("models", MODEL_NAMES))
    bad = [m for m in models if m not in MODEL_NAMES]
    if bad:
        raise ValueError(f"unknown model name(s) {bad}; expected among {MODEL_NAMES}")
    reps = int(sim_cfg.get("reps", 500))
    alpha = float(sim_cfg.get("alpha", 0.05))
    base_seed = int(sim_cfg.get("seed", 0) if seed is None else seed)

    os.makedirs(out_dir, exist_ok=True)
    header = "model," + ",".join(f"delta_{d:g}" for d in deltas)
    paths = []
    for cell in cells:
        k_true = truth_kernel(cell["nu"], cell["sigma"])
        t0 = time.perf_counter()
        lines = [header]
        counts: Dict[str, Dict[str, int]] = {}
        for model in models:
            rates = []
            counts[model] = {"failed": 0, "degenerate": 0}
            for delta in deltas:
                scenario = SimulationScenario(
                    n=int(sim_cfg.get("n", 200)),
                    p1=int(sim_cfg.get("p1", 3)),
                    p2=int(sim_cfg.get("p2", 3)),
                    k_true=k_true,
                    delta=delta,
                    noise_sd=float(sim_cfg.get("noise_sd", DEFAULT_NOISE_SD)),
                    input_scale=float(sim_cfg.get("input_scale", DEFAULT_INPUT_SCALE)),
                    reps=reps,
                    seed=base_seed,
                )
                res = run_scenario(scenario, model, n_jobs=n_jobs, alpha=alpha)
                counts[model]["failed"] += res.n_failed
                counts[model]["degenerate"] += res.n_degenerate
                rates.append(str(float(res.rate)))
            lines.append(model + "," + ",".join(rates))
        tag = _cell_tag(cell)
        csv_path = os.path.join(out_dir, f"rates_{tag}.csv")
        atomic_write_text(csv_path, "\n".join(lines) + "\n")
        meta = {
            "truth": cell,
            "seed": base_seed,
            "reps": reps,
            "alpha": alpha,
            "n": int(sim_cfg.get("n", 200)),
            "p1": int(sim_cfg.get("p1", 3)),
            "p2": int(sim_cfg.get("p2", 3)),
            "noise_sd": float(sim_cfg.get("noise_sd", DEFAULT_NOISE_SD)),
            "input_scale": float(sim_cfg.get("input_scale", DEFAULT_INPUT_SCALE)),
            "deltas": deltas,
            "models": models,
            "n_jobs": n_jobs,
            "wall_time_s": round(time.perf_counter() - t0, 3),
            "replicate_counts": counts,
        }
        atomic_write_text(os.path.join(out_dir, f"rates_{tag}_meta.json"),
                          json.dumps(meta, indent=2) + "\n")
        paths.append(csv_path)
    return paths
