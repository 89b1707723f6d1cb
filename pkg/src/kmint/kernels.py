"""Kernel functions, kernel matrices, and their compositions.

Kernel families are described by :class:`KernelSpec` records and evaluated
either pointwise (:func:`eval_kernel`) or as full Gram matrices
(:func:`kernel_matrix`). Matrices carry a small amount of metadata in
:class:`KernelMatrix` so that downstream code can tell standardized matrices
from raw ones.

    >>> spec = KernelSpec("rbf", sigma=1.0)
    >>> eval_kernel(spec, np.array([0.0]), np.array([1.0]))
    0.36787944117144233

Main-effect and interaction spaces for grouped covariates are built from
per-group matrices by sums and element-wise (Hadamard) products; see
:func:`null_and_interaction_structure`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

__all__ = [
    "KernelSpec",
    "KernelMatrix",
    "eval_kernel",
    "kernel_matrix",
    "cross_kernel_matrix",
    "center_kernel",
    "center_cross_kernel",
    "trace_standardize",
    "hadamard",
    "median_bandwidth",
    "structure_parts",
    "null_and_interaction_structure",
    "spec_from_config",
    "min_eigenvalue_ratio",
]

FAMILIES = ("linear", "polynomial", "rbf", "matern", "nn")

MATERN_NUS = (0.5, 1.5, 2.5)

# Relative tolerance for treating a floating-point eigenvalue as nonnegative:
# a matrix counts as PSD when min(eig) >= -PSD_RTOL * max(eig).
PSD_RTOL = 1e-8


@dataclass(frozen=True)
class KernelSpec:
    """A parameterized kernel family instance.

    Fields beyond ``family`` are family specific: ``degree`` for polynomial
    kernels, ``sigma`` for rbf/matern/nn bandwidth or prior variance, ``nu``
    for Matern smoothness (one of 1/2, 3/2, 5/2).
    """

    family: str
    degree: Optional[int] = None
    sigma: Optional[float] = None
    nu: Optional[float] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if self.family == "polynomial":
            if self.degree is None or int(self.degree) != self.degree or self.degree < 1:
                raise ValueError("polynomial kernel needs an integer degree >= 1")
        if self.family in ("rbf", "matern", "nn"):
            if self.sigma is None or not np.isfinite(self.sigma) or self.sigma <= 0:
                raise ValueError(f"{self.family} kernel needs sigma > 0")
        if self.family == "matern":
            if self.nu not in MATERN_NUS:
                raise ValueError(f"matern nu must be one of {MATERN_NUS}, got {self.nu}")

    def to_config(self) -> dict:
        """Serialize to a plain config entry {family, degree?, sigma?, nu?}."""
        entry = {"family": self.family}
        if self.degree is not None:
            entry["degree"] = int(self.degree)
        if self.sigma is not None:
            entry["sigma"] = float(self.sigma)
        if self.nu is not None:
            entry["nu"] = float(self.nu)
        return entry

    def label(self) -> str:
        bits = [self.family]
        if self.degree is not None:
            bits.append(f"d={self.degree}")
        if self.nu is not None:
            bits.append(f"nu={self.nu}")
        if self.sigma is not None:
            bits.append(f"sigma={self.sigma:g}")
        return "(" + ", ".join(bits) + ")"


def spec_from_config(entry: Mapping) -> KernelSpec:
    """Inverse of KernelSpec.to_config."""
    known = {"family", "degree", "sigma", "nu"}
    extra = set(entry) - known
    if extra:
        raise ValueError(f"unknown kernel config keys: {sorted(extra)}")
    if "family" not in entry:
        raise ValueError("kernel config entry needs a 'family' key")
    return KernelSpec(
        family=entry["family"],
        degree=entry.get("degree"),
        sigma=entry.get("sigma"),
        nu=entry.get("nu"),
    )


@dataclass
class KernelMatrix:
    """An n-by-n symmetric PSD kernel matrix plus provenance metadata."""

    values: np.ndarray
    source: str = ""
    standardized: bool = False

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _values(K) -> np.ndarray:
    return K.values if isinstance(K, KernelMatrix) else np.asarray(K, dtype=float)


def _check_vector(x, name) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"{name} must be a 1-d vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def _matern_from_scaled(a: np.ndarray, nu: float) -> np.ndarray:
    # Closed forms for the half-integer cases; a = sqrt(2 nu) * sigma * ||r||.
    if nu == 0.5:
        return np.exp(-a)
    if nu == 1.5:
        return (1.0 + a) * np.exp(-a)
    if nu == 2.5:
        return (1.0 + a + a * a / 3.0) * np.exp(-a)
    raise ValueError(f"matern nu must be one of {MATERN_NUS}, got {nu}")


def _nn_augment(x: np.ndarray) -> np.ndarray:
    return np.concatenate([[1.0], x])


def eval_kernel(spec: KernelSpec, x, xp) -> float:
    """Evaluate k(x, x') for a single pair of points.

    Args:
        spec: kernel family instance.
        x, xp: 1-d vectors of equal dimension.

    Returns:
        The scalar kernel value. Exchangeable in (x, x') by construction.
    """
    x = _check_vector(x, "x")
    xp = _check_vector(xp, "xp")
    if x.shape != xp.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {xp.shape}")

    if spec.family == "linear":
        return float(x @ xp)
    if spec.family == "polynomial":
        return float((1.0 + x @ xp) ** spec.degree)
    if spec.family == "rbf":
        r2 = float(np.sum((x - xp) ** 2))
        return float(np.exp(-r2 / spec.sigma**2))
    if spec.family == "matern":
        d = float(np.sqrt(np.sum((x - xp) ** 2)))
        a = np.sqrt(2.0 * spec.nu) * spec.sigma * d
        return float(_matern_from_scaled(np.asarray(a), spec.nu))
    if spec.family == "nn":
        # One-layer arcsine kernel on inputs augmented with a leading 1.
        xt, xpt = _nn_augment(x), _nn_augment(xp)
        s = 2.0 * spec.sigma
        arg = s * (xt @ xpt) / np.sqrt((1.0 + s * (xt @ xt)) * (1.0 + s * (xpt @ xpt)))
        return float(2.0 / np.pi * np.arcsin(np.clip(arg, -1.0, 1.0)))
    raise ValueError(f"unknown kernel family {spec.family!r}")


def _mirror(K: np.ndarray) -> np.ndarray:
    # Compute once, mirror: exact symmetry regardless of BLAS rounding.
    return np.triu(K) + np.triu(K, 1).T


def kernel_matrix(spec: KernelSpec, Z) -> KernelMatrix:
    """Build the n-by-n Gram matrix K_ij = k(z_i, z_j).

    Vectorized per family; entries match the pointwise evaluator. The result
    is exactly symmetric (upper triangle mirrored).
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ValueError(f"Z must be an n-by-q matrix with n >= 2, got shape {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("Z contains non-finite entries")

    if spec.family == "linear":
        K = Z @ Z.T
    elif spec.family == "polynomial":
        K = (1.0 + Z @ Z.T) ** spec.degree
    elif spec.family == "rbf":
        sq = squareform(pdist(Z, "sqeuclidean"))
        K = np.exp(-sq / spec.sigma**2)
    elif spec.family == "matern":
        d = squareform(pdist(Z, "euclidean"))
        K = _matern_from_scaled(np.sqrt(2.0 * spec.nu) * spec.sigma * d, spec.nu)
    elif spec.family == "nn":
        Zt = np.hstack([np.ones((Z.shape[0], 1)), Z])
        s = 2.0 * spec.sigma
        S = s * (Zt @ Zt.T)
        norm = np.sqrt(1.0 + np.diag(S))
        K = 2.0 / np.pi * np.arcsin(np.clip(S / np.outer(norm, norm), -1.0, 1.0))
    else:
        raise ValueError(f"unknown kernel family {spec.family!r}")
    return KernelMatrix(values=_mirror(K), source=spec.label())


def cross_kernel_matrix(spec: KernelSpec, Za, Zb) -> np.ndarray:
    """Rectangular kernel matrix K_ij = k(za_i, zb_j) between two point sets.

    Za is m-by-q, Zb is n-by-q; the result is m-by-n. Same families and
    parameterizations as :func:`kernel_matrix`.
    """
    Za = np.atleast_2d(np.asarray(Za, dtype=float))
    Zb = np.atleast_2d(np.asarray(Zb, dtype=float))
    if Za.shape[1] != Zb.shape[1]:
        raise ValueError(f"dimension mismatch: {Za.shape[1]} vs {Zb.shape[1]} columns")
    if not (np.all(np.isfinite(Za)) and np.all(np.isfinite(Zb))):
        raise ValueError("inputs contain non-finite entries")

    if spec.family == "linear":
        return Za @ Zb.T
    if spec.family == "polynomial":
        return (1.0 + Za @ Zb.T) ** spec.degree
    if spec.family == "rbf":
        return np.exp(-cdist(Za, Zb, "sqeuclidean") / spec.sigma**2)
    if spec.family == "matern":
        d = cdist(Za, Zb, "euclidean")
        return _matern_from_scaled(np.sqrt(2.0 * spec.nu) * spec.sigma * d, spec.nu)
    if spec.family == "nn":
        Zat = np.hstack([np.ones((Za.shape[0], 1)), Za])
        Zbt = np.hstack([np.ones((Zb.shape[0], 1)), Zb])
        s = 2.0 * spec.sigma
        na = np.sqrt(1.0 + s * np.sum(Zat * Zat, axis=1))
        nb = np.sqrt(1.0 + s * np.sum(Zbt * Zbt, axis=1))
        arg = s * (Zat @ Zbt.T) / np.outer(na, nb)
        return 2.0 / np.pi * np.arcsin(np.clip(arg, -1.0, 1.0))
    raise ValueError(f"unknown kernel family {spec.family!r}")


def center_kernel(K) -> KernelMatrix:
    """Double-center a Gram matrix: K -> H K H with H = I - 11'/n.

    The centered matrix is the Gram matrix of the same kernel's feature map
    with the empirical mean feature subtracted, so its span contains only
    mean-zero functions of that covariate group. Sums of centered matrices
    give a purely additive (main effect) space, and element-wise products
    give a pure interaction space with no main-effect or constant component.
    The constant direction itself is carried by the fixed-effect intercept.
    """
    V = _values(K)
    rm = V.mean(axis=0)
    C = V - rm[:, None] - rm[None, :] + rm.mean()
    src = K.source if isinstance(K, KernelMatrix) else ""
    return KernelMatrix(values=_mirror(C), source=f"centered {src}".strip())


def center_cross_kernel(C, K_train) -> np.ndarray:
    """Center a rectangular new-by-train kernel block consistently with center_kernel.

    ``C`` holds k(z*_s, z_j) for new points against the n training points and
    ``K_train`` is the raw (uncentered) training Gram matrix. The result is
    the cross block of the centered feature map,

        C~[s, j] = C[s, j] - mean_j' C[s, j'] - mean_i K[i, j] + mean_ij K,

    which is what evaluating a function from the centered span at a new point
    requires.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    V = _values(K_train)
    if C.shape[1] != V.shape[0]:
        raise ValueError(f"cross block has {C.shape[1]} columns but training kernel is {V.shape[0]}-by-{V.shape[0]}")
    col = V.mean(axis=0)
    return C - C.mean(axis=1, keepdims=True) - col[None, :] + col.mean()


def trace_standardize(K) -> KernelMatrix:
    """Divide a kernel matrix by its trace so that trace(result) = 1."""
    V = _values(K)
    tr = float(np.trace(V))
    if tr <= 0:
        raise ValueError(f"cannot trace-standardize: trace = {tr} <= 0 (degenerate kernel matrix)")
    src = K.source if isinstance(K, KernelMatrix) else ""
    return KernelMatrix(values=V / tr, source=src, standardized=True)


def hadamard(Ka, Kb) -> KernelMatrix:
    """Element-wise product of two kernel matrices (PSD by the Schur product theorem)."""
    A, B = _values(Ka), _values(Kb)
    if A.shape != B.shape:
        raise ValueError(f"dimension mismatch: {A.shape} vs {B.shape}")
    sa = Ka.source if isinstance(Ka, KernelMatrix) else "?"
    sb = Kb.source if isinstance(Kb, KernelMatrix) else "?"
    return KernelMatrix(values=A * B, source=f"{sa}*{sb}")


def median_bandwidth(Z) -> float:
    """Median of the n(n-1)/2 pairwise Euclidean distances (i < j).

    numpy's median of an even-length sample is the mean of the two central
    order statistics, which is the convention wanted here.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] < 2:
        raise ValueError("median bandwidth needs at least two points")
    med = float(np.median(pdist(Z, "euclidean")))
    if med <= 0:
        raise ValueError("all points identical: median pairwise distance is 0, invalid bandwidth")
    return med


def min_eigenvalue_ratio(K) -> float:
    """min(eig) / max(|eig|), the quantity bounded below by -PSD_RTOL for PSD input."""
    w = np.linalg.eigvalsh(_values(K))
    top = float(np.max(np.abs(w)))
    if top == 0.0:
        return 0.0
    return float(np.min(w)) / top


def structure_parts(
    group_kernels: Mapping,
    pair: tuple,
    policy: str = "two_group",
) -> tuple:
    """Raw (unstandardized) additive and interaction parts as plain arrays.

    The composition is element-wise, so the inputs may equally be square Gram
    matrices or rectangular cross-kernel matrices between new and training
    points, as long as all shapes agree. See
    :func:`null_and_interaction_structure` for the formulas.
    """
    a, b = pair
    if a == b:
        raise ValueError(f"tested pair must name two distinct groups, got {pair!r}")
    for name in (a, b):
        if name not in group_kernels:
            raise ValueError(f"missing group {name!r}; have {sorted(group_kernels)}")
    others = [g for g in group_kernels if g not in (a, b)]

    K1 = _values(group_kernels[a])
    K2 = _values(group_kernels[b])
    K12 = K1 * K2

    if policy == "two_group":
        if others:
            raise ValueError(
                f"policy 'two_group' but design has extra groups {others}; "
                "use 'multi_group_with_nuisance'"
            )
        K0 = K1 + K2
    elif policy == "multi_group_with_nuisance":
        if others:
            K3 = np.zeros_like(K1)
            for g in others:
                K3 = K3 + _values(group_kernels[g])
            K0 = K1 + K2 + K3 + K1 * K3 + K2 * K3
            K12 = K12 + K12 * K3
        else:
            K0 = K1 + K2
    else:
        raise ValueError(
            f"unknown nuisance policy {policy!r}; "
            "expected 'two_group' or 'multi_group_with_nuisance'"
        )
    return K0, K12


def null_and_interaction_structure(
    group_kernels: Mapping[str, KernelMatrix],
    pair: tuple,
    policy: str = "two_group",
) -> tuple:
    """Compose per-group kernel matrices into (K0, K12) for an interaction test.

    ``group_kernels`` maps group name to that group's trace-standardized
    matrix. For ``policy="two_group"`` the null space is additive in the two
    tested groups, K0 = K1 + K2, and the interaction space is their Hadamard
    product, K12 = K1 * K2. For ``policy="multi_group_with_nuisance"`` every
    non-tested group contributes main effects and its pairwise interactions
    with each tested group to the null,

        K0 = K1 + K2 + K3 + K1*K3 + K2*K3,
        K12 = K1*K2 + K1*K2*K3,

    where K3 is the sum of the standardized nuisance-group matrices (several
    nuisance groups enter additively). K0 is returned trace-standardized;
    K12 is returned as composed.
    """
    a, b = pair
    K0, K12 = structure_parts(group_kernels, pair, policy)
    K0m = trace_standardize(KernelMatrix(values=K0, source=f"null[{a}+{b}]"))
    return K0m, KernelMatrix(values=K12, source=f"interaction[{a}*{b}]")
