"""CSV ingestion, configs, PCA, surface grids, and the command line."""

import json
import math
import os

import numpy as np
import pytest

from kmint.cli import cli_main
from kmint.data import (
    library_from_config,
    load_config,
    load_dataset,
    pca,
    surface_grid,
    write_dataset_csv,
    write_surface_csv,
    _lambda_grid_from,
)
from kmint.data import test_config_from as config_from
from kmint.ensemble import NN_ENSEMBLE_LIBRARY, RBF_ENSEMBLE_LIBRARY
from kmint.interaction import TestConfig as Config
from kmint.interaction import test_interaction as run_interaction_test
from kmint.kernels import KernelSpec


DATA_CFG = {"outcome": "y"}
GROUPS_CFG = {"z1": ["a"], "z2": ["b"]}


def write_csv(path, text):
    with open(path, "w") as fh:
        fh.write(text)
    return str(path)


# ---------------------------------------------------------------------------
# loading


def test_load_three_column_file(tmp_path):
    p = write_csv(tmp_path / "d.csv",
                  "y,a,b\n1,0.5,2\n2,1.5,4\n3,2.5,6\n0,3.5,8\n")
    design, y = load_dataset(p, DATA_CFG, GROUPS_CFG)
    np.testing.assert_array_equal(y, [1.0, 2.0, 3.0, 0.0])
    assert design.n == 4
    assert design.dropped == 0
    assert set(design.groups) == {"z1", "z2"}
    np.testing.assert_array_equal(design.X, np.ones((4, 1)))
    np.testing.assert_array_equal(design.raw_groups["z1"][:, 0],
                                  [0.5, 1.5, 2.5, 3.5])


def test_group_columns_are_standardized(tmp_path):
    rng = np.random.default_rng(2)
    vals = rng.normal(5.0, 3.0, size=12)
    rows = "\n".join(f"{i},{v}" for i, v in enumerate(vals))
    p = write_csv(tmp_path / "d.csv", "y,a\n" + rows + "\n")
    design, _ = load_dataset(p, DATA_CFG, {"z1": ["a"]})
    col = design.groups["z1"][:, 0]
    assert np.mean(col) == pytest.approx(0.0, abs=1e-12)
    assert np.std(col, ddof=1) == pytest.approx(1.0, rel=1e-12)
    mu, sd = design.moments["a"]
    np.testing.assert_allclose(col * sd + mu, vals, rtol=1e-12)


def test_missing_rows_are_dropped_and_counted(tmp_path):
    lines = ["y,a,b"]
    for i in range(10):
        lines.append(f"{i},{i * 0.3 + 0.1},{10 - i}")
    lines[3] = "2,NA,8"     # data row 2
    lines[7] = "6,1.9,"     # data row 6
    p = write_csv(tmp_path / "d.csv", "\n".join(lines) + "\n")
    design, y = load_dataset(p, DATA_CFG, GROUPS_CFG)
    assert design.n == 8
    assert design.dropped == 2
    assert y.shape == (8,)
    assert 2.0 not in y and 6.0 not in y


def test_fixed_effects_get_intercept_column(tmp_path):
    p = write_csv(tmp_path / "d.csv",
                  "y,age,a,b\n1,30,0.5,2\n2,40,1.5,4\n3,50,2.5,6\n0,35,3.5,8\n")
    design, _ = load_dataset(p, {"outcome": "y", "fixed_effects": ["age"]},
                             GROUPS_CFG)
    assert design.X.shape == (4, 2)
    np.testing.assert_array_equal(design.X[:, 0], 1.0)
    assert np.mean(design.X[:, 1]) == pytest.approx(0.0, abs=1e-12)
    assert design.fixed_columns == ["age"]


def test_loader_rejects_bad_roles(tmp_path):
    p = write_csv(tmp_path / "d.csv", "y,a,b\n1,2,3\n4,5,6\n")
    with pytest.raises(ValueError, match="assigned to both"):
        load_dataset(p, DATA_CFG, {"z1": ["a"], "z2": ["a"]})
    with pytest.raises(ValueError, match="also assigned another role"):
        load_dataset(p, DATA_CFG, {"z1": ["y"], "z2": ["b"]})
    with pytest.raises(ValueError, match="fixed effects and group members"):
        load_dataset(p, {"outcome": "y", "fixed_effects": ["a"]},
                     {"z1": ["a"], "z2": ["b"]})
    with pytest.raises(ValueError, match="outcome"):
        load_dataset(p, {}, GROUPS_CFG)
    with pytest.raises(ValueError, match="at least one group"):
        load_dataset(p, DATA_CFG, {})


def test_loader_rejects_bad_cells_and_columns(tmp_path):
    p = write_csv(tmp_path / "d.csv", "y,a,b\n1,2,3\n4,oops,6\n")
    with pytest.raises(ValueError, match=r"'a'.*row 1"):
        load_dataset(p, DATA_CFG, GROUPS_CFG)
    with pytest.raises(ValueError, match=r"\['c'\]"):
        load_dataset(p, DATA_CFG, {"z1": ["a"], "z2": ["c"]})
    empty = write_csv(tmp_path / "e.csv", "")
    with pytest.raises(ValueError, match="empty"):
        load_dataset(empty, DATA_CFG, GROUPS_CFG)
    headeronly = write_csv(tmp_path / "h.csv", "y,a,b\n")
    with pytest.raises(ValueError, match="no data rows"):
        load_dataset(headeronly, DATA_CFG, GROUPS_CFG)
    constant = write_csv(tmp_path / "c.csv", "y,a,b\n1,2,3\n4,2,6\n9,2,7\n")
    with pytest.raises(ValueError, match="constant"):
        load_dataset(constant, DATA_CFG, GROUPS_CFG)


def test_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(7)
    y = rng.normal(size=9)
    groups = {"z1": rng.normal(size=(9, 3)) * 1e-7,
              "z2": rng.normal(size=9) * 1e5}
    path = str(tmp_path / "rt.csv")
    cols = write_dataset_csv(path, y, groups)
    assert cols == {"z1": ["z1_1", "z1_2", "z1_3"], "z2": ["z2"]}
    design, y2 = load_dataset(path, DATA_CFG, cols)
    np.testing.assert_array_equal(y2, y)
    np.testing.assert_array_equal(design.raw_groups["z1"], groups["z1"])
    np.testing.assert_array_equal(design.raw_groups["z2"][:, 0], groups["z2"])


def test_write_dataset_csv_validation(tmp_path):
    y = np.zeros(4)
    with pytest.raises(ValueError, match="rows"):
        write_dataset_csv(str(tmp_path / "x.csv"), y, {"z1": np.zeros((3, 1))})
    with pytest.raises(ValueError, match="fixed_names"):
        write_dataset_csv(str(tmp_path / "x.csv"), y, {"z1": np.zeros(4)},
                          X=np.zeros((4, 2)), fixed_names=["only_one"])


# ---------------------------------------------------------------------------
# principal components


def test_pca_identity_oracle(rng):
    M = rng.standard_normal((4000, 3))
    res = pca(M)
    np.testing.assert_allclose(res.variance_explained, 1.0 / 3.0, atol=0.1)
    assert abs(res.variance_explained.sum() - 1.0) < 1e-12


def test_pca_perfect_correlation_collapses_to_one_pc(rng):
    x = rng.standard_normal(50)
    M = np.column_stack([x, 2.0 * x + 5.0])
    with pytest.warns(UserWarning, match="zero-variance"):
        res = pca(M)
    assert res.loadings.shape == (2, 1)
    assert res.variance_explained[0] == pytest.approx(1.0, abs=1e-12)


def test_pca_loadings_orthonormal(rng):
    M = rng.standard_normal((80, 5)) @ rng.standard_normal((5, 5))
    res = pca(M)
    k = res.loadings.shape[1]
    np.testing.assert_allclose(res.loadings.T @ res.loadings, np.eye(k),
                               atol=1e-10)
    assert np.all(np.diff(res.variance_explained) <= 1e-12)


def test_pca_sign_convention_and_scores(rng):
    M = rng.standard_normal((60, 4))
    res = pca(M)
    for j in range(res.loadings.shape[1]):
        i = int(np.argmax(np.abs(res.loadings[:, j])))
        assert res.loadings[i, j] > 0
    S = (M - M.mean(axis=0)) / M.std(axis=0, ddof=1)
    np.testing.assert_allclose(res.scores, S @ res.loadings, atol=1e-12)


def test_pca_input_validation(rng):
    with pytest.raises(ValueError, match="constant"):
        pca(np.column_stack([np.ones(10), np.arange(10.0)]))
    with pytest.raises(ValueError, match="more rows than columns"):
        pca(rng.standard_normal((3, 5)))
    with pytest.raises(ValueError, match="shape"):
        pca(np.arange(8.0))


# ---------------------------------------------------------------------------
# surface grids

SURFACE_LIBRARY = (KernelSpec("rbf", sigma=1.0), KernelSpec("rbf", sigma=0.5))


@pytest.fixture(scope="module")
def bilinear_fit():
    """Main effects plus a bilinear interaction, default kernel library."""
    rng = np.random.default_rng(42)
    n = 200
    z1 = rng.standard_normal((n, 1))
    z2 = rng.standard_normal((n, 1))
    y = (z1[:, 0] + z2[:, 0] + z1[:, 0] * z2[:, 0]
         + 0.3 * rng.standard_normal(n))
    groups = {"z1": z1, "z2": z2}
    return run_interaction_test(groups, y, np.ones((n, 1)), Config())


def test_surface_grid_geometry(bilinear_fit):
    grid = surface_grid(bilinear_fit, "z1", 1, "z2", 1, grid_size=2)
    assert grid.values.shape == (2, 2)
    z = bilinear_fit.groups["z1"][:, 0]
    s = (z - z.mean()) / z.std(ddof=1)
    lo, hi = np.percentile(s, (5.0, 95.0))
    assert grid.pc_axis_a[0] == pytest.approx(lo, rel=1e-12)
    assert grid.pc_axis_a[1] == pytest.approx(hi, rel=1e-12)
    assert set(grid.held_fixed) == {"z1", "z2"}
    assert grid.variance_explained["z1"][0] == pytest.approx(1.0)


def test_bilinear_surface_has_positive_mixed_differences(bilinear_fit):
    grid = surface_grid(bilinear_fit, "z1", 1, "z2", 1, grid_size=6)
    v = grid.values
    d = v[1:, 1:] - v[1:, :-1] - v[:-1, 1:] + v[:-1, :-1]
    assert np.mean(d > 0) >= 0.9


def test_additive_surface_has_no_interaction(bilinear_fit):
    grid = surface_grid(bilinear_fit, "z1", 1, "z2", 1, grid_size=5,
                        include_interaction=False)
    v = grid.values
    mixed = v[1:, 1:] - v[1:, :-1] - v[:-1, 1:] + v[:-1, :-1]
    assert np.max(np.abs(mixed)) < 1e-6 * max(np.max(np.abs(v)), 1e-30)


def test_surface_nuisance_group_held_at_median():
    rng = np.random.default_rng(3)
    n = 50
    groups = {"z1": rng.standard_normal((n, 2)),
              "z2": rng.standard_normal((n, 1)),
              "z3": rng.standard_normal((n, 2))}
    y = rng.standard_normal(n)
    cfg = Config(library=SURFACE_LIBRARY, pair=("z1", "z2"),
                 policy="multi_group_with_nuisance")
    fit = run_interaction_test(groups, y, np.ones((n, 1)), cfg)
    grid = surface_grid(fit, "z1", 2, "z2", 1, grid_size=3)
    np.testing.assert_array_equal(grid.held_fixed["z3"],
                                  np.median(groups["z3"], axis=0))
    assert grid.values.shape == (3, 3)


def test_surface_grid_validation(bilinear_fit):
    with pytest.raises(ValueError, match="at least 2"):
        surface_grid(bilinear_fit, "z1", 1, "z2", 1, grid_size=1)
    with pytest.raises(ValueError, match="different groups"):
        surface_grid(bilinear_fit, "z1", 1, "z1", 1, grid_size=3)
    with pytest.raises(ValueError, match="unknown group"):
        surface_grid(bilinear_fit, "z1", 1, "zz", 1, grid_size=3)
    with pytest.raises(ValueError, match="out of range"):
        surface_grid(bilinear_fit, "z1", 2, "z2", 1, grid_size=3)


def test_write_surface_csv_layout(tmp_path, bilinear_fit):
    grid = surface_grid(bilinear_fit, "z1", 1, "z2", 1, grid_size=3)
    path = str(tmp_path / "s.csv")
    write_surface_csv(path, grid)
    lines = open(path).read().strip().split("\n")
    assert lines[0] == "pc_a,pc_b,h_hat"
    assert len(lines) == 10
    a, b, h = (float(v) for v in lines[1].split(","))
    assert a == grid.pc_axis_a[0] and b == grid.pc_axis_b[0]
    assert h == grid.values[0, 0]
    # The a axis varies slowest.
    a2 = float(lines[4].split(",")[0])
    assert a2 == grid.pc_axis_a[1]


# ---------------------------------------------------------------------------
# configs


def test_load_config_sections(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"data": {"outcome": "y"}, "groups": {"g": ["a"]}}))
    cfg = load_config(str(p))
    assert cfg["data"]["outcome"] == "y"
    p.write_text(json.dumps({"dat": {}}))
    with pytest.raises(ValueError, match="unknown config section"):
        load_config(str(p))
    p.write_text("{not json")
    with pytest.raises(ValueError, match="not valid JSON"):
        load_config(str(p))
    p.write_text(json.dumps([1, 2]))
    with pytest.raises(ValueError, match="top level"):
        load_config(str(p))


def test_library_resolution():
    assert library_from_config(None) == RBF_ENSEMBLE_LIBRARY
    assert library_from_config("rbf") == RBF_ENSEMBLE_LIBRARY
    assert library_from_config("nn") == NN_ENSEMBLE_LIBRARY
    lib = library_from_config([
        {"family": "rbf", "sigma": 2.0},
        {"g1": {"family": "linear"}, "g2": {"family": "matern", "nu": 1.5,
                                            "sigma": 1.0}},
    ])
    assert lib[0] == KernelSpec("rbf", sigma=2.0)
    assert lib[1]["g2"] == KernelSpec("matern", nu=1.5, sigma=1.0)
    with pytest.raises(ValueError, match="preset"):
        library_from_config("laplace")
    with pytest.raises(ValueError, match="nonempty"):
        library_from_config([])
    with pytest.raises(ValueError, match="unknown kernel config keys"):
        library_from_config([{"family": "rbf", "bandwidth": 1.0}])


def test_lambda_grid_defaults_and_bounds():
    g = _lambda_grid_from({})
    np.testing.assert_allclose(g, np.logspace(-5, 2, 30), rtol=1e-12)
    g = _lambda_grid_from({"lambda": {"num": 4, "lo": 0.1, "hi": 100.0}})
    np.testing.assert_allclose(g, np.logspace(-1, 2, 4), rtol=1e-12)
    with pytest.raises(ValueError, match="unknown keys"):
        _lambda_grid_from({"lambda": {"count": 5}})
    with pytest.raises(ValueError, match="lambda"):
        _lambda_grid_from({"lambda": {"lo": -1.0}})


def test_config_assembly_defaults_and_overrides():
    cfg = config_from({})
    assert cfg.policy == "two_group"
    assert cfg.pair is None
    assert cfg.composition == "ensemble_of_products"
    assert cfg.library == RBF_ENSEMBLE_LIBRARY
    assert cfg.ensemble.cv == "loo"
    assert cfg.ensemble.weight_constraint == "simplex"
    cfg = config_from({
        "test": {"pair": ["g1", "g3"], "cv": "kfold", "kfold_k": 4,
                 "cv_seed": 9, "weight_constraint": "l2_sphere"},
        "library": "nn",
        "grids": {"lambda": {"num": 3, "lo": 0.01, "hi": 1.0}},
    })
    assert cfg.pair == ("g1", "g3")
    assert cfg.ensemble.cv == "kfold"
    assert cfg.ensemble.kfold_k == 4
    assert cfg.ensemble.cv_seed == 9
    assert cfg.library == NN_ENSEMBLE_LIBRARY
    assert len(cfg.ensemble.lambda_grid) == 3
    with pytest.raises(ValueError, match="unknown keys in config section 'test'"):
        config_from({"test": {"folds": 3}})
    with pytest.raises(ValueError, match="exactly two groups"):
        config_from({"test": {"pair": ["g1"]}})
    with pytest.raises(ValueError, match="'loo' or 'kfold'"):
        config_from({"test": {"cv": "bootstrap"}})


# ---------------------------------------------------------------------------
# command line


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    """A dataset with a strong bilinear interaction plus a config file."""
    d = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(11)
    n = 60
    z1 = rng.standard_normal(n)
    z2 = rng.standard_normal(n)
    y = z1 * z2 + 0.1 * rng.standard_normal(n)
    csv_path = str(d / "data.csv")
    write_dataset_csv(csv_path, y, {"z1": z1, "z2": z2})
    cfg = {
        "data": {"outcome": "y", "csv": csv_path},
        "groups": {"z1": ["z1"], "z2": ["z2"]},
        "library": [{"family": "rbf", "sigma": 1.0},
                    {"family": "rbf", "sigma": 0.5}],
    }
    cfg_path = str(d / "config.json")
    with open(cfg_path, "w") as fh:
        json.dump(cfg, fh)
    return d, csv_path, cfg_path, cfg


def test_cli_test_detects_interaction(cli_dataset, tmp_path):
    _, _, cfg_path, _ = cli_dataset
    out = str(tmp_path / "result.json")
    code = cli_main(["test", "--config", cfg_path, "--out", out])
    assert code == 0
    record = json.load(open(out))
    assert record["p_value"] < 0.05
    assert record["n"] == 60
    assert record["dropped_rows"] == 0
    assert record["tested_pair"] == ["z1", "z2"]
    assert not record["degenerate"]


def test_cli_test_writes_to_stdout(cli_dataset, capsys):
    _, _, cfg_path, _ = cli_dataset
    assert cli_main(["test", "--config", cfg_path]) == 0
    record = json.loads(capsys.readouterr().out)
    assert 0.0 <= record["p_value"] <= 1.0


def test_cli_data_flag_overrides_config(cli_dataset, tmp_path):
    d, csv_path, _, cfg = cli_dataset
    alt = dict(cfg)
    alt["data"] = {"outcome": "y"}
    alt_path = str(tmp_path / "noconfigcsv.json")
    with open(alt_path, "w") as fh:
        json.dump(alt, fh)
    assert cli_main(["test", "--config", alt_path, "--data", csv_path,
                     "--out", str(tmp_path / "r.json")]) == 0


def test_cli_seed_repeats_byte_identically(cli_dataset, tmp_path):
    d, csv_path, _, cfg = cli_dataset
    kcfg = dict(cfg)
    kcfg["test"] = {"cv": "kfold", "kfold_k": 5}
    kpath = str(tmp_path / "kfold.json")
    with open(kpath, "w") as fh:
        json.dump(kcfg, fh)
    outs = []
    for name in ("r1.json", "r2.json"):
        out = str(tmp_path / name)
        assert cli_main(["test", "--config", kpath, "--seed", "7",
                         "--out", out]) == 0
        outs.append(open(out, "rb").read())
    assert outs[0] == outs[1]


def test_cli_rejects_bad_configs(cli_dataset, tmp_path, capsys):
    _, csv_path, cfg_path, cfg = cli_dataset
    bad = dict(cfg)
    bad["librarry"] = "rbf"
    bad_path = str(tmp_path / "bad.json")
    with open(bad_path, "w") as fh:
        json.dump(bad, fh)
    assert cli_main(["test", "--config", bad_path]) == 1
    assert "librarry" in capsys.readouterr().err
    nodata = {k: v for k, v in cfg.items() if k != "data"}
    nodata_path = str(tmp_path / "nodata.json")
    with open(nodata_path, "w") as fh:
        json.dump(nodata, fh)
    assert cli_main(["test", "--config", nodata_path]) == 1
    assert cli_main(["test", "--config", str(tmp_path / "missing.json")]) == 1


def test_cli_simulate_one_cell(tmp_path, capsys):
    cfg = {"simulate": {"n": 30, "truth": {"nu": 1.5, "sigma": 1.0},
                        "deltas": [0.0], "models": ["linear"], "reps": 1,
                        "seed": 5}}
    cfg_path = str(tmp_path / "sim.json")
    with open(cfg_path, "w") as fh:
        json.dump(cfg, fh)
    out_dir = str(tmp_path / "tables")
    os.makedirs(out_dir)
    assert cli_main(["simulate", "--config", cfg_path,
                     "--out-dir", out_dir]) == 0
    printed = capsys.readouterr().out.strip().split("\n")
    assert len(printed) == 1
    assert os.path.basename(printed[0]) == "rates_nu1.5_sigma1.csv"
    assert os.path.exists(printed[0])


def test_cli_simulate_seed_override(tmp_path, capsys):
    cfg = {"simulate": {"n": 30, "truth": {"nu": 1.5, "sigma": 1.0},
                        "deltas": [0.0], "models": ["linear"], "reps": 2,
                        "seed": 5}}
    cfg_path = str(tmp_path / "sim.json")
    with open(cfg_path, "w") as fh:
        json.dump(cfg, fh)
    for d, seed in (("a", "5"), ("b", "5"), ("c", "99")):
        os.makedirs(str(tmp_path / d))
        assert cli_main(["simulate", "--config", cfg_path, "--seed", seed,
                         "--out-dir", str(tmp_path / d)]) == 0
    capsys.readouterr()
    read = lambda d: open(str(tmp_path / d / "rates_nu1.5_sigma1.csv")).read()
    assert read("a") == read("b")


def test_cli_simulate_requires_section(cli_dataset, capsys):
    _, _, cfg_path, _ = cli_dataset
    assert cli_main(["simulate", "--config", cfg_path]) == 1
    assert "simulate" in capsys.readouterr().err


def test_cli_surface_emits_named_grids(cli_dataset, tmp_path, capsys):
    _, csv_path, _, cfg = cli_dataset
    scfg = dict(cfg)
    scfg["grids"] = {"surface": {"group_a": "z1", "group_b": "z2",
                                 "size": 4}}
    cfg_path = str(tmp_path / "surf.json")
    with open(cfg_path, "w") as fh:
        json.dump(scfg, fh)
    out_dir = str(tmp_path / "grids")
    assert cli_main(["surface", "--config", cfg_path,
                     "--out-dir", out_dir]) == 0
    printed = capsys.readouterr().out.strip().split("\n")
    assert printed == [os.path.join(out_dir, "surface_z1_pc1_z2_pc1.csv")]
    lines = open(printed[0]).read().strip().split("\n")
    assert lines[0] == "pc_a,pc_b,h_hat"
    assert len(lines) == 17


def test_cli_surface_rejects_unknown_grid_keys(cli_dataset, tmp_path, capsys):
    _, _, _, cfg = cli_dataset
    scfg = dict(cfg)
    scfg["grids"] = {"surface": {"group_a": "z1", "group_b": "z2",
                                 "resolution": 4}}
    cfg_path = str(tmp_path / "surf.json")
    with open(cfg_path, "w") as fh:
        json.dump(scfg, fh)
    assert cli_main(["surface", "--config", cfg_path,
                     "--out-dir", str(tmp_path)]) == 1
    assert "resolution" in capsys.readouterr().err
