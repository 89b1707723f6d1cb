"""Cross-validated ensembles of kernel ridge smoothers.

Three stages: tune each base kernel's ridge penalty by cross-validation,
weight the base smoothers on the simplex to minimize the joint held-out
residual, then invert the ensemble hat matrix spectrally to recover the
implied ensemble kernel matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .kernels import (
    KernelMatrix,
    KernelSpec,
    kernel_matrix,
    null_and_interaction_structure,
    trace_standardize,
)
from .ridge import KernelEig, default_lambda_grid, fit_krr, kernel_eig, loo_residuals, tune_lambda

__all__ = [
    "EnsembleConfig",
    "Stage1Fit",
    "EnsembleFit",
    "stage1_candidates",
    "stage2_weights",
    "project_simplex",
    "stage3_ensemble_kernel",
    "cvek",
    "RBF_ENSEMBLE_LIBRARY",
    "NN_ENSEMBLE_LIBRARY",
]

# Default base-kernel libraries for the two stock ensembles: rbf bandwidths on
# a log grid, and neural-network prior variances on a coarse positive grid.
RBF_ENSEMBLE_LIBRARY = tuple(KernelSpec("rbf", sigma=math.exp(j)) for j in (-2, -1, 0, 1, 2))
NN_ENSEMBLE_LIBRARY = tuple(KernelSpec("nn", sigma=s) for s in (0.1, 1.0, 10.0, 50.0))

LibraryEntry = Union[KernelSpec, Mapping[str, KernelSpec]]


@dataclass
class EnsembleConfig:
    """Knobs for the ensemble fit; the defaults are the ones used throughout."""

    lambda_grid: np.ndarray = field(default_factory=default_lambda_grid)
    cv: str = "loo"              # 'loo' (closed form) or 'kfold'
    kfold_k: int = 5
    cv_seed: int = 0
    weight_mode: str = "vector"  # 'vector' (per-observation residuals) or 'scalar'
    weight_constraint: str = "simplex"  # 'simplex' (sum 1) or 'l2_sphere'
    # Multiplier applied to every evaluated kernel matrix before any
    # standardization. The fitted model and the downstream p-value must not
    # depend on it; it exists so that guarantee can be exercised end to end.
    kernel_scale: float = 1.0


@dataclass
class Stage1Fit:
    """Tuned ridge fit for one base kernel on the null structure."""

    specs: Dict[str, KernelSpec]   # per-group kernel specs for this entry
    K0: KernelMatrix               # trace-standardized null-structure matrix
    lam: float
    cv_error: float
    resid: np.ndarray              # leave-one-out residual vector at lam
    hat: np.ndarray
    alpha: np.ndarray
    group_matrices: Dict[str, KernelMatrix]  # per-group trace-standardized matrices
    group_traces: Dict[str, float]           # traces of the raw per-group matrices


@dataclass
class EnsembleFit:
    """Output of the full ensemble: per-kernel tuning plus the combined kernel."""

    library: List[Dict[str, KernelSpec]]
    lambdas: np.ndarray
    cv_errors: np.ndarray
    weights: np.ndarray
    hat: np.ndarray
    K_ens: KernelMatrix
    lambda_K: float
    stage1: List[Stage1Fit]


def _normalize_entry(entry: LibraryEntry, group_names: Sequence[str]) -> Dict[str, KernelSpec]:
    if isinstance(entry, KernelSpec):
        return {g: entry for g in group_names}
    entry = dict(entry)
    missing = [g for g in group_names if g not in entry]
    if missing:
        raise ValueError(f"library entry missing specs for groups {missing}")
    return {g: entry[g] for g in group_names}


def stage1_candidates(
    library: Sequence[LibraryEntry],
    groups: Mapping[str, np.ndarray],
    y,
    config: Optional[EnsembleConfig] = None,
    pair: Optional[tuple] = None,
    policy: str = "two_group",
) -> List[Stage1Fit]:
    """Tune each base kernel's ridge penalty on the null kernel structure.

    For every library entry the null matrix is composed from the per-group
    trace-standardized matrices (see kernels.null_and_interaction_structure),
    trace-standardized again, and tuned over the lambda grid. The matrices
    are used as evaluated, without empirical centering: closed-form
    cross-validation on a double-centered Gram matrix would credit even a
    diagonal kernel with the mean-coupling its off-diagonal -1/n entries
    provide at vanishing ridge, letting a pure memorizer win the ensemble.
    """
    if len(library) == 0:
        raise ValueError("empty kernel library")
    config = config or EnsembleConfig()
    names = list(groups)
    if pair is None:
        if len(names) != 2:
            raise ValueError("pair must be given when the design has more than two groups")
        pair = (names[0], names[1])
    y = np.asarray(y, dtype=float)

    fits = []
    for entry in library:
        specs = _normalize_entry(entry, names)
        gmats, gtraces = {}, {}
        for g in names:
            raw = kernel_matrix(specs[g], groups[g])
            if config.kernel_scale != 1.0:
                raw = KernelMatrix(values=config.kernel_scale * raw.values,
                                   source=raw.source, standardized=False)
            gtraces[g] = float(np.trace(raw.values))
            gmats[g] = trace_standardize(raw)
        K0, _ = null_and_interaction_structure(gmats, pair, policy)
        if float(np.max(np.abs(K0.values))) == 0.0:
            raise ValueError(f"base kernel {specs} produced a zero null matrix")
        eig = kernel_eig(K0)
        lam, err = tune_lambda(K0, y, config.lambda_grid, cv=config.cv,
                               k=config.kfold_k, seed=config.cv_seed, eig=eig)
        fit = fit_krr(K0, y, lam, eig=eig)
        fits.append(Stage1Fit(
            specs=specs,
            K0=K0,
            lam=lam,
            cv_error=err,
            resid=loo_residuals(fit, y),
            hat=fit.hat,
            alpha=fit.alpha,
            group_matrices=gmats,
            group_traces=gtraces,
        ))
    return fits


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {u : u >= 0, sum(u) = 1} (sort-based)."""
    v = np.asarray(v, dtype=float)
    a = -np.sort(-v)
    cum = (np.cumsum(a) - 1.0) / np.arange(1, v.size + 1)
    k = np.nonzero(a > cum)[0][-1]
    return np.maximum(v - cum[k], 0.0)


def _pgd_weights(E: np.ndarray, constraint: str, tol: float, max_iter: int) -> np.ndarray:
    # Minimize ||E u||^2 under the chosen constraint by projected gradient
    # with a fixed 1/L step, from the equal-weight start.
    D = E.shape[1]
    G = E.T @ E
    L = 2.0 * float(np.linalg.eigvalsh(G)[-1])
    if L <= 0:
        return np.full(D, 1.0 / D)
    step = 1.0 / L
    if constraint == "simplex":
        proj = project_simplex
        u = np.full(D, 1.0 / D)
    elif constraint == "l2_sphere":
        def proj(v):
            v = np.maximum(v, 0.0)
            nrm = float(np.linalg.norm(v))
            return v / nrm if nrm > 0 else np.full(D, 1.0 / math.sqrt(D))
        u = np.full(D, 1.0 / math.sqrt(D))
    else:
        raise ValueError(f"unknown weight constraint {constraint!r}")
    for _ in range(max_iter):
        u_new = proj(u - step * 2.0 * (G @ u))
        if float(np.max(np.abs(u_new - u))) <= tol:
            return u_new
        u = u_new
    return u


def stage2_weights(errors, mode: Optional[str] = None, constraint: str = "simplex",
                   tol: float = 1e-10, max_iter: int = 200000) -> np.ndarray:
    """Ensemble weights minimizing the combined cross-validation error.

    With scalar per-kernel errors (1-d input) the objective (sum_d u_d e_d)^2
    is minimized on the simplex by concentrating on the smallest error, split
    equally across exact ties. With per-observation residual vectors (n-by-D
    input) the simplex-constrained least squares ||E u||^2 is solved by
    projected gradient from the equal-weight start.
    """
    E = np.asarray(errors, dtype=float)
    if mode is None:
        mode = "scalar" if E.ndim == 1 else "vector"
    if mode == "scalar":
        if E.ndim != 1:
            raise ValueError("scalar mode expects a 1-d error vector")
        if np.any(E < 0):
            raise ValueError("cross-validation errors must be nonnegative")
        if constraint == "l2_sphere":
            u = np.where(E == E.min(), 1.0, 0.0)
            return u / np.linalg.norm(u)
        ties = E == E.min()
        return ties / float(ties.sum())
    if mode == "vector":
        if E.ndim != 2:
            raise ValueError("vector mode expects an n-by-D residual matrix")
        if E.shape[1] == 1:
            return np.ones(1)
        return _pgd_weights(E, constraint, tol, max_iter)
    raise ValueError(f"mode must be 'scalar' or 'vector', got {mode!r}")


# Hat-matrix eigenvalues are clamped into [0, 1 - HAT_EIG_CLAMP] before the
# delta / (1 - delta) inversion.
HAT_EIG_CLAMP = 1e-10


def stage3_ensemble_kernel(hat_ens: np.ndarray, lambdas) -> tuple:
    """Recover the ensemble kernel matrix from the ensemble hat matrix.

    With hat eigendecomposition U diag(delta) U', the implied kernel is
    K = lambda_K U diag(delta / (1 - delta)) U' where

        lambda_K = min(1, (sum_k delta_k / (1 - delta_k))^-1, min_d lambda_d).

    Returns (K_ens, lambda_K).
    """
    A = np.asarray(hat_ens, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"hat matrix must be square, got shape {A.shape}")
    asym = float(np.max(np.abs(A - A.T)))
    if asym > 1e-10:
        raise ValueError(f"hat matrix asymmetric beyond tolerance ({asym:.3e})")
    lambdas = np.asarray(list(np.atleast_1d(lambdas)), dtype=float)
    if lambdas.size == 0 or np.any(lambdas <= 0):
        raise ValueError("per-kernel lambdas must be a nonempty positive list")
    delta, U = np.linalg.eigh((A + A.T) / 2.0)
    if float(np.max(delta, initial=0.0)) >= 1.0 + HAT_EIG_CLAMP:
        raise ValueError("hat matrix has an eigenvalue >= 1 beyond clamp tolerance")
    delta = np.clip(delta, 0.0, 1.0 - HAT_EIG_CLAMP)
    ratios = delta / (1.0 - delta)
    total = float(ratios.sum())
    lam_K = min(1.0, (1.0 / total) if total > 0 else np.inf, float(lambdas.min()))
    K = (U * (lam_K * ratios)) @ U.T
    K = np.triu(K) + np.triu(K, 1).T
    return KernelMatrix(values=K, source="ensemble"), float(lam_K)


def cvek(
    library: Sequence[LibraryEntry],
    groups: Mapping[str, np.ndarray],
    y,
    config: Optional[EnsembleConfig] = None,
    pair: Optional[tuple] = None,
    policy: str = "two_group",
) -> EnsembleFit:
    """Run the three ensemble stages and assemble the result."""
    config = config or EnsembleConfig()
    fits = stage1_candidates(library, groups, y, config, pair=pair, policy=policy)
    if config.weight_mode == "vector":
        E = np.column_stack([f.resid for f in fits])
        u = stage2_weights(E, mode="vector", constraint=config.weight_constraint)
    else:
        u = stage2_weights(np.array([f.cv_error for f in fits]), mode="scalar",
                           constraint=config.weight_constraint)
    hat = np.zeros_like(fits[0].hat)
    for w, f in zip(u, fits):
        hat += w * f.hat
    lambdas = np.array([f.lam for f in fits])
    K_ens, lam_K = stage3_ensemble_kernel(hat, lambdas)
    return EnsembleFit(
        library=[f.specs for f in fits],
        lambdas=lambdas,
        cv_errors=np.array([f.cv_error for f in fits]),
        weights=np.asarray(u, dtype=float),
        hat=hat,
        K_ens=K_ens,
        lambda_K=lam_K,
        stage1=fits,
    )
