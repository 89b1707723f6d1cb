"""Variance-component score test for a kernel interaction effect.

The null model is a kernel machine for the additive (main-effect) structure,
estimated by the cross-validated ensemble and refit as a mixed model; the
interaction enters as an extra variance component along the Hadamard product
of the group kernels, switched on through a garrote coefficient. The score
statistic for that coefficient at zero is quadratic in the null-model
residuals and its null distribution is approximated by a scaled chi-square
matched to the first two moments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import chi2

from .ensemble import (
    EnsembleConfig,
    EnsembleFit,
    LibraryEntry,
    RBF_ENSEMBLE_LIBRARY,
    cvek,
)
from .kernels import (
    KernelMatrix,
    center_kernel,
    null_and_interaction_structure,
    trace_standardize,
)
from .ridge import NullModelFit, reml_fit

__all__ = [
    "TestConfig",
    "Satterthwaite",
    "InteractionTest",
    "interaction_kernel",
    "score_statistic",
    "satterthwaite",
    "test_interaction",
]


@dataclass
class TestConfig:
    """Configuration of the interaction test."""

    library: Sequence[LibraryEntry] = RBF_ENSEMBLE_LIBRARY
    policy: str = "two_group"
    pair: Optional[Tuple[str, str]] = None
    # How the interaction matrix aggregates over the ensemble: one product
    # per base kernel, weighted ('ensemble_of_products'), or the product of
    # the weighted per-group averages ('product_of_ensembles').
    composition: str = "ensemble_of_products"
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)


@dataclass
class Satterthwaite:
    """Two-moment chi-square match for the score statistic."""

    kappa: float
    nu: float
    p_value: float
    degenerate: bool = False


def _pure_group(M: KernelMatrix) -> KernelMatrix:
    """Center a per-group matrix and rescale it to unit trace.

    Products of centered matrices span only genuinely joint variation: the
    empirical centering removes the constant direction from each factor, so
    the Hadamard product carries no additive component of either group. The
    tested pair goes through this before composing the interaction matrix;
    otherwise the overlap with the null structure is projected away by the
    information correction and the test loses its power.
    """
    return trace_standardize(center_kernel(M))


def interaction_kernel(ensemble: EnsembleFit, pair: Tuple[str, str], policy: str,
                       composition: str = "ensemble_of_products") -> KernelMatrix:
    """Interaction-structure matrix aggregated across the ensemble.

    Matrices of the two tested groups are centered (see _pure_group) before
    entering any product; nuisance groups are used as fitted.
    """

    def purified(gmats):
        return {g: (_pure_group(m) if g in pair else m) for g, m in gmats.items()}

    if composition == "ensemble_of_products":
        K12 = None
        for w, f in zip(ensemble.weights, ensemble.stage1):
            _, part = null_and_interaction_structure(purified(f.group_matrices), pair, policy)
            K12 = w * part.values if K12 is None else K12 + w * part.values
    elif composition == "product_of_ensembles":
        names = list(ensemble.stage1[0].group_matrices)
        avg = {}
        for g in names:
            mats = [_pure_group(f.group_matrices[g]) if g in pair else f.group_matrices[g]
                    for f in ensemble.stage1]
            M = sum(w * m.values for w, m in zip(ensemble.weights, mats))
            avg[g] = KernelMatrix(values=M, source=f"ensemble:{g}", standardized=True)
        _, part = null_and_interaction_structure(avg, pair, policy)
        K12 = part.values
    else:
        raise ValueError(f"unknown composition {composition!r}")
    return KernelMatrix(values=K12, source="interaction", standardized=False)


def score_statistic(fit: NullModelFit, K12, y) -> float:
    """Score statistic tau_hat * y' P0 K12 P0 y for the garrote coefficient."""
    K12 = K12.values if isinstance(K12, KernelMatrix) else np.asarray(K12, dtype=float)
    y = np.asarray(y, dtype=float)
    Py = fit.P0 @ y
    return float(fit.tau * (Py @ K12 @ Py))


def satterthwaite(fit: NullModelFit, K0, K12, statistic: float) -> Satterthwaite:
    """Scaled chi-square calibration of the score statistic.

    The statistic's null mean m and the efficient information I_tilde for the
    garrote coefficient (profiling out the two null variance parameters) give
    kappa = 2 I_tilde / m and nu = m^2 / (2 I_tilde), so that kappa * chi2(nu)
    matches mean m and variance 4 I_tilde. Nonpositive m or I_tilde marks the
    result degenerate with p = 1.
    """
    K0 = K0.values if isinstance(K0, KernelMatrix) else np.asarray(K0, dtype=float)
    K12 = K12.values if isinstance(K12, KernelMatrix) else np.asarray(K12, dtype=float)
    P0, tau = fit.P0, fit.tau
    M12 = P0 @ K12
    M0 = P0 @ K0

    # Information blocks: entries are (1/2) tr(P0 D_a P0 D_b) with D_delta =
    # tau K12, D_tau = K0 and D_sigma2 = I. tr(AB) = sum(A * B').
    i_dd = 0.5 * tau * tau * float((M12 * M12.T).sum())
    i_dt = 0.5 * tau * float((M12 * M0.T).sum())
    i_ds = 0.5 * tau * float((M12 * P0).sum())
    i_tt = 0.5 * float((M0 * M0.T).sum())
    i_ts = 0.5 * float((M0 * P0).sum())
    i_ss = 0.5 * float((P0 * P0).sum())

    Itt = np.array([[i_tt, i_ts], [i_ts, i_ss]])
    b = np.array([i_dt, i_ds])
    try:
        sol = np.linalg.solve(Itt, b)
    except np.linalg.LinAlgError:
        sol = np.linalg.pinv(Itt, hermitian=True) @ b
    info = i_dd - float(b @ sol)

    m = tau * float(np.trace(M12))
    if m <= 0.0 or info <= 0.0 or not np.isfinite(m) or not np.isfinite(info):
        return Satterthwaite(kappa=float("nan"), nu=float("nan"),
                             p_value=1.0, degenerate=True)
    kappa = 2.0 * info / m
    nu = m * m / (2.0 * info)
    p = float(chi2.sf(statistic / kappa, nu))
    return Satterthwaite(kappa=kappa, nu=nu, p_value=p)


@dataclass
class InteractionTest:
    """Full output of one interaction test."""

    statistic: float
    kappa: float
    nu: float
    p_value: float
    degenerate: bool
    pair: Tuple[str, str]
    group_names: List[str]
    ensemble: EnsembleFit
    null_fit: NullModelFit
    K12: KernelMatrix
    config: TestConfig
    # design references, kept so downstream consumers (surface grids, audits)
    # can evaluate kernel sections on new points
    groups: Dict[str, np.ndarray] = field(default_factory=dict)
    X: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None

    def to_record(self) -> Dict:
        return {
            "statistic": self.statistic,
            "kappa": self.kappa,
            "nu": self.nu,
            "p_value": self.p_value,
            "degenerate": self.degenerate,
            "tested_pair": list(self.pair),
            "group_names": list(self.group_names),
            "tau": self.null_fit.tau,
            "sigma2": self.null_fit.sigma2,
            "lambda_K": self.ensemble.lambda_K,
            "weights": [float(w) for w in self.ensemble.weights],
            "lambdas": [float(v) for v in self.ensemble.lambdas],
            "cv_errors": [float(e) for e in self.ensemble.cv_errors],
            "kernels": [
                {g: s.to_config() for g, s in entry.items()}
                for entry in self.ensemble.library
            ],
        }


def _ols_residuals(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return y - X @ coef


def test_interaction(
    groups: Mapping[str, np.ndarray],
    y,
    X: Optional[np.ndarray] = None,
    config: Optional[TestConfig] = None,
) -> InteractionTest:
    """Test whether the paired groups interact beyond their additive effects.

    The ensemble is fit to the fixed-effect residuals of y; the selected
    ensemble kernel then defines the null mixed model for the original y,
    and the score test evaluates the interaction direction at zero.
    """
    config = config or TestConfig()
    names = list(groups)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if X is None:
        X = np.ones((n, 1))
    X = np.asarray(X, dtype=float)
    pair = config.pair
    if pair is None:
        if len(names) != 2:
            raise ValueError("pair must be set when the design has more than two groups")
        pair = (names[0], names[1])

    y_resid = _ols_residuals(X, y)
    ens = cvek(config.library, groups, y_resid, config.ensemble,
               pair=pair, policy=config.policy)
    fit = reml_fit(ens.K_ens, X, y)
    K12 = interaction_kernel(ens, pair, config.policy, config.composition)
    stat = score_statistic(fit, K12, y)
    sat = satterthwaite(fit, ens.K_ens, K12, stat)
    return InteractionTest(
        statistic=stat,
        kappa=sat.kappa,
        nu=sat.nu,
        p_value=sat.p_value,
        degenerate=sat.degenerate,
        pair=tuple(pair),
        group_names=names,
        ensemble=ens,
        null_fit=fit,
        K12=K12,
        config=config,
        groups={g: np.asarray(groups[g], dtype=float) for g in names},
        X=X,
        y=y,
    )
