"""Dataset ingestion, config handling, PCA, and surface-grid prediction.

CSV files come in with a header row; a config assigns each used column a role
(outcome, fixed effect, or member of a named covariate group). Loaded group
columns are standardized, and the raw values plus per-column moments are kept
so files written by the simulator round-trip exactly.

The surface utilities project a fitted interaction model onto a grid in
principal-component coordinates of two groups, for external plotting.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
import warnings
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .ensemble import (
    EnsembleConfig,
    NN_ENSEMBLE_LIBRARY,
    RBF_ENSEMBLE_LIBRARY,
)
from .interaction import InteractionTest, TestConfig, _ols_residuals
from .kernels import (
    center_cross_kernel,
    center_kernel,
    cross_kernel_matrix,
    kernel_matrix,
    spec_from_config,
    structure_parts,
)
from .ridge import fit_krr

__all__ = [
    "GroupedDesign",
    "PcaResult",
    "SurfaceGrid",
    "load_dataset",
    "write_dataset_csv",
    "pca",
    "surface_grid",
    "write_surface_csv",
    "load_config",
    "library_from_config",
    "test_config_from",
    "atomic_write_text",
]

MISSING_TOKENS = ("", "NA")


def atomic_write_text(path: str, text: str) -> None:
    """Write text to path via a temp file in the same directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class GroupedDesign:
    """A design split into fixed effects and named covariate groups.

    ``groups`` holds the standardized matrices actually used for kernels;
    ``raw_groups`` holds the values as parsed, and ``moments`` the per-column
    (mean, sd) applied, so the original data can be recovered.
    """

    X: np.ndarray
    groups: Dict[str, np.ndarray]
    group_columns: Dict[str, List[str]]
    fixed_columns: List[str]
    raw_groups: Dict[str, np.ndarray]
    moments: Dict[str, Tuple[float, float]]
    dropped: int = 0

    @property
    def n(self) -> int:
        return self.X.shape[0]


def _parse_cell(text: str, column: str, row: int) -> float:
    s = text.strip()
    if s in MISSING_TOKENS:
        return math.nan
    try:
        return float(s)
    except ValueError:
        raise ValueError(
            f"non-numeric value {text!r} in column {column!r}, data row {row}"
        ) from None


def _standardize_columns(M: np.ndarray, names: Sequence[str], moments: Dict) -> np.ndarray:
    out = np.empty_like(M)
    for j, name in enumerate(names):
        mu = float(np.mean(M[:, j]))
        sd = float(np.std(M[:, j], ddof=1))
        if sd == 0.0 or not np.isfinite(sd):
            raise ValueError(f"column {name!r} is constant; cannot standardize")
        moments[name] = (mu, sd)
        out[:, j] = (M[:, j] - mu) / sd
    return out


def load_dataset(csv_path: str, data_cfg: Mapping, groups_cfg: Mapping) -> tuple:
    """Read a CSV and assemble (GroupedDesign, y).

    ``data_cfg`` holds {"outcome": column, "fixed_effects": [columns]} and
    ``groups_cfg`` maps group name to its column list. Rows with a missing
    value ("" or "NA") in any used column are dropped and counted. Group and
    fixed-effect columns are standardized to mean 0, sd 1; the outcome is
    left as is; X gets a leading intercept column.
    """
    outcome = data_cfg.get("outcome")
    if not outcome:
        raise ValueError("config section 'data' must name an 'outcome' column")
    fixed = list(data_cfg.get("fixed_effects", ()))
    if not groups_cfg:
        raise ValueError("config section 'groups' must define at least one group")
    group_columns = {}
    seen = {}
    for gname, cols in groups_cfg.items():
        cols = list(cols)
        if not cols:
            raise ValueError(f"group {gname!r} has no columns")
        for c in cols:
            if c in seen:
                raise ValueError(f"column {c!r} assigned to both {seen[c]!r} and {gname!r}")
            seen[c] = gname
        group_columns[gname] = cols
    overlap = set(fixed) & set(seen)
    if overlap:
        raise ValueError(f"columns {sorted(overlap)} are both fixed effects and group members")
    if outcome in seen or outcome in fixed:
        raise ValueError(f"outcome column {outcome!r} also assigned another role")

    used = [outcome] + fixed + [c for cols in group_columns.values() for c in cols]
    with open(csv_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{csv_path}: empty file") from None
        missing_cols = [c for c in used if c not in header]
        if missing_cols:
            raise ValueError(f"{csv_path}: columns {missing_cols} not in header {header}")
        idx = {c: header.index(c) for c in used}
        rows = []
        for r, rec in enumerate(reader):
            if not rec:
                continue
            rows.append([_parse_cell(rec[idx[c]], c, r) for c in used])

    if not rows:
        raise ValueError(f"{csv_path}: no data rows")
    M = np.array(rows, dtype=float)
    keep = ~np.isnan(M).any(axis=1)
    dropped = int((~keep).sum())
    M = M[keep]
    if M.shape[0] < 2:
        raise ValueError(f"{csv_path}: fewer than 2 complete rows after dropping {dropped}")

    y = M[:, 0].copy()
    moments: Dict[str, Tuple[float, float]] = {}
    pos = 1
    if fixed:
        Xcov = _standardize_columns(M[:, pos:pos + len(fixed)], fixed, moments)
        pos += len(fixed)
        X = np.hstack([np.ones((M.shape[0], 1)), Xcov])
    else:
        X = np.ones((M.shape[0], 1))
    groups, raw_groups = {}, {}
    for gname, cols in group_columns.items():
        block = M[:, pos:pos + len(cols)]
        pos += len(cols)
        raw_groups[gname] = block.copy()
        groups[gname] = _standardize_columns(block, cols, moments)

    design = GroupedDesign(
        X=X,
        groups=groups,
        group_columns=group_columns,
        fixed_columns=fixed,
        raw_groups=raw_groups,
        moments=moments,
        dropped=dropped,
    )
    return design, y


def write_dataset_csv(path: str, y, groups: Mapping[str, np.ndarray],
                      X: Optional[np.ndarray] = None,
                      fixed_names: Optional[Sequence[str]] = None) -> Dict[str, List[str]]:
    """Emit a dataset as CSV with 17-significant-digit floats.

    Column layout: outcome "y", then any fixed-effect columns, then each
    group's columns named "<group>_<j>" (bare group name if one column).
    Returns the group-to-columns map, ready to use as a loading config.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    header = ["y"]
    blocks = [y[:, None]]
    if X is not None:
        X = np.asarray(X, dtype=float)
        names = list(fixed_names or (f"x_{j + 1}" for j in range(X.shape[1])))
        if len(names) != X.shape[1]:
            raise ValueError("fixed_names length does not match X columns")
        header += names
        blocks.append(X)
    group_columns = {}
    for gname, Z in groups.items():
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        if Z.shape[0] != n:
            raise ValueError(f"group {gname!r} has {Z.shape[0]} rows, outcome has {n}")
        cols = [gname] if Z.shape[1] == 1 else [f"{gname}_{j + 1}" for j in range(Z.shape[1])]
        group_columns[gname] = cols
        header += cols
        blocks.append(Z)
    body = np.hstack(blocks)
    lines = [",".join(header)]
    for row in body:
        lines.append(",".join(format(v, ".17g") for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")
    return group_columns


@dataclass
class PcaResult:
    """Principal components of one covariate group (correlation-based)."""

    loadings: np.ndarray            # q-by-k, columns are components
    scores: np.ndarray              # n-by-k
    variance_explained: np.ndarray  # k fractions, descending


def pca(group_matrix) -> PcaResult:
    """Correlation-matrix PCA with a deterministic sign convention.

    Columns are standardized internally (a no-op if already standardized),
    components are ordered by decreasing eigenvalue, and each loading vector
    is flipped so its largest-magnitude entry is positive. Zero-variance
    components (rank deficiency) are dropped with a warning.
    """
    M = np.asarray(group_matrix, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"expected an n-by-q matrix, got shape {M.shape}")
    n, q = M.shape
    if n <= q:
        raise ValueError(f"need more rows than columns for PCA, got {n} <= {q}")
    mu = M.mean(axis=0)
    sd = M.std(axis=0, ddof=1)
    if np.any(sd == 0):
        raise ValueError("constant column; correlation PCA undefined")
    S = (M - mu) / sd
    corr = (S.T @ S) / (n - 1)
    eig, vec = np.linalg.eigh(corr)
    order = np.argsort(eig)[::-1]
    eig, vec = eig[order], vec[:, order]
    keep = eig > 1e-12 * max(eig[0], 1.0)
    if not np.all(keep):
        warnings.warn(f"dropping {int((~keep).sum())} zero-variance principal components")
        eig, vec = eig[keep], vec[:, keep]
    for j in range(vec.shape[1]):
        i = int(np.argmax(np.abs(vec[:, j])))
        if vec[i, j] < 0:
            vec[:, j] = -vec[:, j]
    return PcaResult(loadings=vec, scores=S @ vec, variance_explained=eig / q)


@dataclass
class SurfaceGrid:
    """Predicted response surface over two principal-component axes."""

    group_a: str
    pc_a: int
    group_b: str
    pc_b: int
    pc_axis_a: np.ndarray
    pc_axis_b: np.ndarray
    values: np.ndarray                   # [i, j] = h_hat at (axis_a[i], axis_b[j])
    held_fixed: Dict[str, np.ndarray]    # per-group median PC scores / covariates
    variance_explained: Dict[str, np.ndarray]


def _grid_block(pca_res: PcaResult, pc_index: int, grid_size: int,
                span: Tuple[float, float]) -> tuple:
    k = pca_res.loadings.shape[1]
    if not (1 <= pc_index <= k):
        raise ValueError(f"PC index {pc_index} out of range 1..{k}")
    scores = pca_res.scores[:, pc_index - 1]
    lo, hi = np.percentile(scores, span)
    axis = np.linspace(lo, hi, grid_size)
    med = np.median(pca_res.scores, axis=0)
    return axis, med


def _back_transform(score_rows: np.ndarray, pca_res: PcaResult, Z: np.ndarray) -> np.ndarray:
    # PC scores -> standardized covariates -> the group's original scale.
    mu = Z.mean(axis=0)
    sd = Z.std(axis=0, ddof=1)
    return (score_rows @ pca_res.loadings.T) * sd + mu


def surface_grid(fit: InteractionTest, group_a: str, pc_a: int,
                 group_b: str, pc_b: int, grid_size: int,
                 span: Tuple[float, float] = (5.0, 95.0),
                 include_interaction: bool = True) -> SurfaceGrid:
    """Evaluate the fitted surface on a PC-by-PC grid.

    Grid points vary one principal component of each tested group over the
    [5th, 95th] percentile band of its observed scores, hold that group's
    remaining components at their medians, and pin any nuisance group at its
    columnwise median. Predictions are kernel sections under the ensemble
    weights; with ``include_interaction`` the per-kernel fits are refit on
    the additive-plus-interaction structure at the tuned ridge penalties,
    otherwise the stored additive fits are used.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")
    if group_a == group_b:
        raise ValueError("surface axes must come from two different groups")
    for g in (group_a, group_b):
        if g not in fit.groups:
            raise ValueError(f"unknown group {g!r}; fit has {sorted(fit.groups)}")

    pca_a = pca(fit.groups[group_a])
    pca_b = pca(fit.groups[group_b])
    axis_a, med_a = _grid_block(pca_a, pc_a, grid_size, span)
    axis_b, med_b = _grid_block(pca_b, pc_b, grid_size, span)

    # m = grid_size^2 rows; the a-axis varies slowest (row-major layout).
    Sa = np.tile(med_a, (grid_size, 1))
    Sa[:, pc_a - 1] = axis_a
    Sb = np.tile(med_b, (grid_size, 1))
    Sb[:, pc_b - 1] = axis_b
    Za_rows = _back_transform(Sa, pca_a, fit.groups[group_a])
    Zb_rows = _back_transform(Sb, pca_b, fit.groups[group_b])
    m = grid_size * grid_size
    grid_points = {
        group_a: np.repeat(Za_rows, grid_size, axis=0),
        group_b: np.tile(Zb_rows, (grid_size, 1)),
    }
    held = {group_a: med_a, group_b: med_b}
    for g in fit.groups:
        if g not in (group_a, group_b):
            med = np.median(fit.groups[g], axis=0)
            grid_points[g] = np.tile(med, (m, 1))
            held[g] = med

    y_resid = _ols_residuals(fit.X, fit.y)
    pair, policy = fit.pair, fit.config.policy
    h = np.zeros(m)
    for u, f in zip(fit.ensemble.weights, fit.ensemble.stage1):
        if u == 0.0:
            continue
        # The additive part uses the per-group matrices as fitted, so its
        # cross blocks are plain sections scaled by the raw traces. The
        # interaction part mirrors interaction_kernel: the tested pair is
        # centered first, so the cross blocks of those groups are centered
        # against the raw training Gram and scaled by the centered trace.
        cross0, cross12, pure_train = {}, {}, {}
        for g in fit.groups:
            C = cross_kernel_matrix(f.specs[g], grid_points[g], fit.groups[g])
            cross0[g] = C / f.group_traces[g]
            if g in pair:
                raw_train = kernel_matrix(f.specs[g], fit.groups[g])
                cen = center_kernel(raw_train)
                tr_cen = float(np.trace(cen.values))
                cross12[g] = center_cross_kernel(C, raw_train) / tr_cen
                pure_train[g] = cen.values / tr_cen
            else:
                cross12[g] = cross0[g]
                pure_train[g] = f.group_matrices[g]
        C0_raw, _ = structure_parts(cross0, pair, policy)
        K0_raw, _ = structure_parts(f.group_matrices, pair, policy)
        C0 = C0_raw / float(np.trace(K0_raw))
        _, C12 = structure_parts(cross12, pair, policy)
        _, K12_train = structure_parts(pure_train, pair, policy)
        if include_interaction:
            # The interaction block enters the refit on the same unit-trace
            # footing as the null structure; a product of unit-trace factors
            # is itself far below unit trace, and leaving it there would
            # shrink the interaction term out of the surface.
            t12 = float(np.trace(K12_train))
            refit = fit_krr(f.K0.values + K12_train / t12, y_resid, f.lam)
            h += u * ((C0 + C12 / t12) @ refit.alpha)
        else:
            h += u * (C0 @ f.alpha)

    return SurfaceGrid(
        group_a=group_a,
        pc_a=pc_a,
        group_b=group_b,
        pc_b=pc_b,
        pc_axis_a=axis_a,
        pc_axis_b=axis_b,
        values=h.reshape(grid_size, grid_size),
        held_fixed=held,
        variance_explained={
            group_a: pca_a.variance_explained,
            group_b: pca_b.variance_explained,
        },
    )


def write_surface_csv(path: str, grid: SurfaceGrid) -> None:
    """Flatten a surface grid to CSV with columns pc_a, pc_b, h_hat."""
    lines = ["pc_a,pc_b,h_hat"]
    for i, a in enumerate(grid.pc_axis_a):
        for j, b in enumerate(grid.pc_axis_b):
            lines.append(f"{float(a)!r},{float(b)!r},{float(grid.values[i, j])!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Config files

CONFIG_SECTIONS = ("data", "groups", "test", "library", "grids", "simulate")

LIBRARY_PRESETS = {
    "rbf": RBF_ENSEMBLE_LIBRARY,
    "nn": NN_ENSEMBLE_LIBRARY,
}


def load_config(path: str) -> dict:
    """Parse a JSON config and reject unknown sections."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: top level must be an object")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise ValueError(f"{path}: unknown config section(s) {sorted(unknown)}; "
                         f"expected among {CONFIG_SECTIONS}")
    return cfg


def library_from_config(entry) -> tuple:
    """Resolve the 'library' section: a preset name or a list of entries.

    Each list element is either one kernel config (used for every group) or
    a mapping from group name to kernel config.
    """
    if entry is None:
        return RBF_ENSEMBLE_LIBRARY
    if isinstance(entry, str):
        if entry not in LIBRARY_PRESETS:
            raise ValueError(f"unknown library preset {entry!r}; "
                             f"expected one of {sorted(LIBRARY_PRESETS)}")
        return LIBRARY_PRESETS[entry]
    if not isinstance(entry, list) or not entry:
        raise ValueError("'library' must be a preset name or a nonempty list")
    out = []
    for item in entry:
        if not isinstance(item, dict):
            raise ValueError(f"bad library entry {item!r}")
        if "family" in item:
            out.append(spec_from_config(item))
        else:
            out.append({g: spec_from_config(sub) for g, sub in item.items()})
    return tuple(out)


def _lambda_grid_from(grids_cfg: Mapping) -> np.ndarray:
    g = grids_cfg.get("lambda", {})
    unknown = set(g) - {"num", "lo", "hi"}
    if unknown:
        raise ValueError(f"unknown keys in grids.lambda: {sorted(unknown)}")
    num = int(g.get("num", 30))
    lo = float(g.get("lo", 1e-5))
    hi = float(g.get("hi", 1e2))
    if num < 1 or lo <= 0 or hi < lo:
        raise ValueError("grids.lambda needs num >= 1 and 0 < lo <= hi")
    return np.logspace(math.log10(lo), math.log10(hi), num)


def test_config_from(cfg: Mapping) -> TestConfig:
    """Build a TestConfig from the 'test', 'library' and 'grids' sections."""
    tcfg = dict(cfg.get("test", {}))
    known = {"pair", "policy", "composition", "cv", "kfold_k", "cv_seed",
             "weight_mode", "weight_constraint"}
    unknown = set(tcfg) - known
    if unknown:
        raise ValueError(f"unknown keys in config section 'test': {sorted(unknown)}")
    pair = tcfg.get("pair")
    if pair is not None:
        pair = tuple(pair)
        if len(pair) != 2:
            raise ValueError(f"test.pair must name exactly two groups, got {pair!r}")
    ens = EnsembleConfig(
        lambda_grid=_lambda_grid_from(cfg.get("grids", {})),
        cv=tcfg.get("cv", "loo"),
        kfold_k=int(tcfg.get("kfold_k", 5)),
        cv_seed=int(tcfg.get("cv_seed", 0)),
        weight_mode=tcfg.get("weight_mode", "vector"),
        weight_constraint=tcfg.get("weight_constraint", "simplex"),
    )
    if ens.cv not in ("loo", "kfold"):
        raise ValueError(f"test.cv must be 'loo' or 'kfold', got {ens.cv!r}")
    return TestConfig(
        library=library_from_config(cfg.get("library")),
        policy=tcfg.get("policy", "two_group"),
        pair=pair,
        composition=tcfg.get("composition", "ensemble_of_products"),
        ensemble=ens,
    )
