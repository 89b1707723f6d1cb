"""Kernel ridge regression, cross-validation error, and REML variance components.

The ridge solve goes through one symmetric eigendecomposition of the kernel
matrix, reused across the whole regularization grid. The linear mixed model

    y = X beta + h + eps,   h ~ N(0, tau K0),   eps ~ N(0, sigma2 I)

is fit by restricted maximum likelihood with the total-scale/ratio
parameterization phi = tau + sigma2, rho = tau / phi, profiling phi in closed
form and searching rho on [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .kernels import KernelMatrix, KernelSpec, PSD_RTOL, _values, kernel_matrix, trace_standardize

__all__ = [
    "KrrFit",
    "NullModelFit",
    "kernel_eig",
    "fit_krr",
    "loo_residuals",
    "loo_error",
    "kfold_error",
    "tune_lambda",
    "default_lambda_grid",
    "reml_fit",
    "restricted_loglik",
    "reml_tune_rbf",
]

# Hat-matrix diagonal entries at or above this are treated as interpolation,
# where the leave-one-out residual is undefined.
INTERPOLATION_TOL = 1e-10


class KernelEig(NamedTuple):
    """Eigendecomposition of a PSD kernel matrix, reusable across lambda values."""

    vals: np.ndarray
    vecs: np.ndarray


def kernel_eig(K) -> KernelEig:
    V = _values(K)
    w, U = np.linalg.eigh(V)
    top = float(np.max(np.abs(w))) if w.size else 0.0
    if top > 0 and float(np.min(w)) < -PSD_RTOL * top:
        raise np.linalg.LinAlgError(
            f"kernel matrix is not PSD within tolerance (min eig ratio {np.min(w) / top:.3e})"
        )
    return KernelEig(vals=np.maximum(w, 0.0), vecs=U)


@dataclass
class KrrFit:
    """A kernel ridge fit at a fixed regularization strength.

    alpha are the dual coefficients (K + lam I)^-1 y and hat is the smoother
    matrix K (K + lam I)^-1, whose eigenvalues lie in [0, 1).
    """

    alpha: np.ndarray
    hat: np.ndarray
    lam: float
    cv_error: Optional[float] = None


def fit_krr(K, y, lam: float, eig: Optional[KernelEig] = None) -> KrrFit:
    """Solve kernel ridge regression via the spectral decomposition of K.

    Args:
        K: PSD kernel matrix (KernelMatrix or ndarray).
        y: response vector.
        lam: regularization strength, > 0.
        eig: optional precomputed decomposition of K, reused across a grid.
    """
    if not (np.isfinite(lam) and lam > 0):
        raise ValueError(f"lambda must be positive and finite, got {lam}")
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite entries")
    if eig is None:
        eig = kernel_eig(K)
    w, U = eig
    if y.shape != (w.size,):
        raise ValueError(f"y has shape {y.shape}, expected ({w.size},)")
    shrink = w / (w + lam)
    alpha = U @ ((U.T @ y) / (w + lam))
    hat = (U * shrink) @ U.T
    return KrrFit(alpha=alpha, hat=hat, lam=float(lam))


def loo_residuals(fit: KrrFit, y) -> np.ndarray:
    """Per-observation leave-one-out residuals of a linear smoother.

    For hat matrix A the held-out residual at i is (y_i - yhat_i) / (1 - A_ii),
    exact for ridge smoothers.
    """
    y = np.asarray(y, dtype=float)
    diag = np.diag(fit.hat)
    if np.any(diag >= 1.0 - INTERPOLATION_TOL):
        raise ValueError("hat diagonal reaches 1: interpolating fit, leave-one-out undefined")
    return (y - fit.hat @ y) / (1.0 - diag)


def loo_error(fit: KrrFit, y) -> float:
    """Root mean squared leave-one-out residual."""
    r = loo_residuals(fit, y)
    return float(np.sqrt(np.mean(r * r)))


def kfold_error(K, y, lam: float, k: int, seed: int) -> float:
    """k-fold cross-validation error (root mean squared held-out residual).

    Indices are shuffled once with the given seed and split into k near-equal
    folds; each fold is predicted from a ridge fit on its complement.
    """
    V = _values(K)
    y = np.asarray(y, dtype=float)
    n = y.size
    if not (2 <= k <= n):
        raise ValueError(f"k must be in [2, n={n}], got {k}")
    if not (np.isfinite(lam) and lam > 0):
        raise ValueError(f"lambda must be positive and finite, got {lam}")
    perm = np.random.default_rng(seed).permutation(n)
    sse = 0.0
    for fold in np.array_split(perm, k):
        train = np.setdiff1d(perm, fold)
        Ktr = V[np.ix_(train, train)]
        alpha = np.linalg.solve(Ktr + lam * np.eye(train.size), y[train])
        pred = V[np.ix_(fold, train)] @ alpha
        sse += float(np.sum((y[fold] - pred) ** 2))
    return math.sqrt(sse / n)


def default_lambda_grid(num: int = 30, lo: float = 1e-5, hi: float = 1e2) -> np.ndarray:
    return np.logspace(math.log10(lo), math.log10(hi), num)


def tune_lambda(K, y, grid: Sequence[float], cv: str = "loo", k: int = 5, seed: int = 0,
                eig: Optional[KernelEig] = None):
    """Pick the grid lambda minimizing CV error; ties go to the larger lambda.

    Returns (lambda_hat, eps_hat).
    """
    grid = np.asarray(list(grid), dtype=float)
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    if np.any(grid <= 0):
        raise ValueError("lambda grid must be positive")
    order = np.argsort(grid)
    best_lam, best_err = None, np.inf
    if cv == "loo":
        if eig is None:
            eig = kernel_eig(K)
        for lam in grid[order]:
            err = loo_error(fit_krr(K, y, lam, eig=eig), y)
            if err <= best_err:  # ascending grid, so <= prefers larger lambda on ties
                best_lam, best_err = lam, err
    elif cv == "kfold":
        for lam in grid[order]:
            err = kfold_error(K, y, lam, k=k, seed=seed)
            if err <= best_err:
                best_lam, best_err = lam, err
    else:
        raise ValueError(f"cv must be 'loo' or 'kfold', got {cv!r}")
    return float(best_lam), float(best_err)


@dataclass
class NullModelFit:
    """REML fit of the null linear mixed model.

    V0 = sigma2 I + tau K0 and P0 is the REML projection
    V0^-1 - V0^-1 X (X' V0^-1 X)^-1 X' V0^-1, which annihilates X.
    """

    beta: np.ndarray
    tau: float
    sigma2: float
    V0: np.ndarray
    P0: np.ndarray
    reml_loglik: float


def _validate_fixed_effects(X, n):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != n:
        raise ValueError(f"X must be n-by-p with n={n}, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite entries")
    p = X.shape[1]
    if n <= p:
        raise ValueError(f"need n > p, got n={n}, p={p}")
    if np.linalg.matrix_rank(X) < p:
        raise ValueError("X is rank deficient")
    return X, p


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_max(f, lo: float, hi: float, tol: float = 1e-8) -> float:
    # Golden-section search for a maximum on [lo, hi]; never evaluates endpoints.
    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 < f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _GOLDEN * (hi - lo)
            f2 = f(x2)
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _GOLDEN * (hi - lo)
            f1 = f(x1)
    return x1 if f1 >= f2 else x2


def reml_fit(K0, X, y) -> NullModelFit:
    """Restricted maximum likelihood fit of (beta, tau, sigma2).

    Profiles the total scale phi = tau + sigma2 analytically and maximizes the
    restricted likelihood over the ratio rho = tau / phi on [0, 1] (coarse
    scan to bracket, then golden-section to 1e-8). A zero K0 collapses to
    ordinary least squares with tau = 0 and the REML residual variance
    RSS / (n - p).
    """
    V = _values(K0)
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite entries")
    n = y.size
    X, p = _validate_fixed_effects(X, n)
    if np.var(y) == 0:
        raise ValueError("y has zero variance; the null model is undefined")
    dof = n - p

    if float(np.max(np.abs(V))) == 0.0:
        # No random-effect structure: plain linear regression.
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ beta
        sigma2 = float(resid @ resid) / dof
        V0 = sigma2 * np.eye(n)
        XtX = X.T @ X
        P0 = (np.eye(n) - X @ np.linalg.solve(XtX, X.T)) / sigma2
        loglik = -0.5 * (
            dof * math.log(sigma2)
            + float(np.linalg.slogdet(XtX)[1])
            + dof
            + dof * math.log(2.0 * math.pi)
        )
        return NullModelFit(beta=beta, tau=0.0, sigma2=sigma2, V0=V0, P0=P0,
                            reml_loglik=loglik)

    xi, Q = np.linalg.eigh(V)
    top = float(np.max(np.abs(xi)))
    if float(np.min(xi)) < -PSD_RTOL * top:
        raise np.linalg.LinAlgError("K0 is not PSD within tolerance")
    xi = np.maximum(xi, 0.0)
    Xt = Q.T @ X
    yt = Q.T @ y

    def profile(rho: float):
        # Restricted log-likelihood with phi profiled out at this ratio.
        w = rho * xi + (1.0 - rho)
        if np.min(w) <= 0.0:
            return -np.inf, np.nan
        Xw = Xt / w[:, None]
        G = Xt.T @ Xw
        cy = Xw.T @ yt
        sign, logdetG = np.linalg.slogdet(G)
        if sign <= 0:
            return -np.inf, np.nan
        quad = float(yt @ (yt / w) - cy @ np.linalg.solve(G, cy))
        if quad <= 0 or not np.isfinite(quad):
            return -np.inf, np.nan
        phi = quad / dof
        ll = -0.5 * (
            dof * (math.log(phi) + 1.0)
            + float(np.sum(np.log(w)))
            + logdetG
            + dof * math.log(2.0 * math.pi)
        )
        return ll, phi

    # Bracket the optimum with a deterministic scan, then refine. The profile
    # can have shallow local structure, so golden-section alone is not trusted
    # from the full interval.
    scan = np.linspace(0.0, 1.0, 41)
    lls = np.array([profile(r)[0] for r in scan])
    if not np.any(np.isfinite(lls)):
        raise np.linalg.LinAlgError("restricted likelihood is non-finite everywhere on the scan")
    best = int(np.argmax(lls))
    lo = scan[max(best - 1, 0)]
    hi = scan[min(best + 1, scan.size - 1)]
    rho = _golden_max(lambda r: profile(r)[0], lo, hi, tol=1e-8)
    ll, phi = profile(rho)

    tau = float(rho * phi)
    sigma2 = float((1.0 - rho) * phi)
    v = tau * xi + sigma2
    # Assemble V0 and its inverse from the same (clipped) spectrum so that V0,
    # V0^-1 and P0 are mutually consistent and V0's smallest eigenvalue is
    # exactly sigma2.
    V0 = (Q * v) @ Q.T
    V0 = np.triu(V0) + np.triu(V0, 1).T
    V0i = (Q / v) @ Q.T
    V0iX = V0i @ X
    Gv = X.T @ V0iX
    beta = np.linalg.solve(Gv, V0iX.T @ y)
    P0 = V0i - V0iX @ np.linalg.solve(Gv, V0iX.T)
    P0 = np.triu(P0) + np.triu(P0, 1).T
    return NullModelFit(beta=beta, tau=tau, sigma2=sigma2, V0=V0, P0=P0, reml_loglik=float(ll))


def restricted_loglik(K0, X, y, tau: float, sigma2: float) -> float:
    """Restricted log-likelihood at an arbitrary (tau, sigma2); audit/tuning helper."""
    V = _values(K0)
    y = np.asarray(y, dtype=float)
    n = y.size
    X, p = _validate_fixed_effects(X, n)
    if sigma2 <= 0 or tau < 0:
        return -np.inf
    Vfull = tau * V + sigma2 * np.eye(n)
    sign, logdetV = np.linalg.slogdet(Vfull)
    if sign <= 0:
        return -np.inf
    ViX = np.linalg.solve(Vfull, X)
    Viy = np.linalg.solve(Vfull, y)
    G = X.T @ ViX
    signG, logdetG = np.linalg.slogdet(G)
    if signG <= 0:
        return -np.inf
    quad = float(y @ Viy - (X.T @ Viy) @ np.linalg.solve(G, X.T @ Viy))
    return -0.5 * (logdetV + logdetG + quad + (n - p) * math.log(2.0 * math.pi))


def reml_tune_rbf(groups, X, y, sigma_grid: Sequence[float]) -> KernelSpec:
    """Select an rbf bandwidth by maximized restricted likelihood.

    For each sigma, the null kernel is the trace-standardized sum of the
    per-group trace-standardized rbf matrices (matching the structure the
    test itself fits); ties go to the larger sigma.
    """
    sigma_grid = np.asarray(list(sigma_grid), dtype=float)
    if sigma_grid.size == 0:
        raise ValueError("empty sigma grid")
    mats = groups.values() if hasattr(groups, "values") else groups
    mats = [np.asarray(Z, dtype=float) for Z in mats]
    best_sigma, best_ll = None, -np.inf
    for sigma in np.sort(sigma_grid):
        parts = [trace_standardize(kernel_matrix(KernelSpec("rbf", sigma=float(sigma)), Z)).values
                 for Z in mats]
        K0 = trace_standardize(KernelMatrix(values=sum(parts), source=f"rbf-null sigma={sigma:g}"))
        ll = reml_fit(K0, X, y).reml_loglik
        if ll >= best_ll:  # ascending grid, so >= prefers larger sigma on ties
            best_sigma, best_ll = float(sigma), ll
    return KernelSpec("rbf", sigma=best_sigma)
