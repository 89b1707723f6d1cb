"""Command-line interface: test, simulate, and surface subcommands.

Every subcommand takes a JSON config (sections: data, groups, test, library,
grids, simulate) and an optional --seed that overrides the config's seed, so
a run is a pure function of its inputs. Exit codes: 0 success, 1 invalid
input or config, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import data as dio
from .interaction import test_interaction
from .simulate import reproduce_tables

__all__ = ["cli_main", "entry"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kmint",
        description="Kernel-machine interaction tests with cross-validated kernel ensembles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_test = sub.add_parser("test", help="run the interaction test on a dataset")
    p_test.add_argument("--config", required=True, help="JSON config file")
    p_test.add_argument("--data", help="dataset CSV (overrides config data.csv)")
    p_test.add_argument("--seed", type=int, default=None,
                        help="seed for cross-validation fold assignment")
    p_test.add_argument("--out", help="write the result record here instead of stdout")

    p_sim = sub.add_parser("simulate", help="run the Monte Carlo grid, one CSV per truth cell")
    p_sim.add_argument("--config", required=True, help="JSON config with a 'simulate' section")
    p_sim.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_sim.add_argument("--out-dir", default=".", help="directory for rate tables")
    p_sim.add_argument("--jobs", type=int, default=1, help="parallel replicate jobs")

    p_surf = sub.add_parser("surface", help="fit on a dataset and emit surface-grid CSVs")
    p_surf.add_argument("--config", required=True, help="JSON config file")
    p_surf.add_argument("--data", help="dataset CSV (overrides config data.csv)")
    p_surf.add_argument("--seed", type=int, default=None,
                        help="seed for cross-validation fold assignment")
    p_surf.add_argument("--out-dir", default=".", help="directory for grid CSVs")
    return parser


def _load_inputs(args):
    cfg = dio.load_config(args.config)
    if "data" not in cfg or "groups" not in cfg:
        raise ValueError(f"{args.config}: needs 'data' and 'groups' sections")
    csv_path = args.data or cfg["data"].get("csv")
    if not csv_path:
        raise ValueError("no dataset: pass --data or set data.csv in the config")
    data_cfg = {k: v for k, v in cfg["data"].items() if k != "csv"}
    design, y = dio.load_dataset(csv_path, data_cfg, cfg["groups"])
    tconfig = dio.test_config_from(cfg)
    if args.seed is not None:
        tconfig.ensemble.cv_seed = args.seed
    return cfg, design, y, tconfig


def _run_test(args) -> int:
    _, design, y, tconfig = _load_inputs(args)
    res = test_interaction(design.groups, y, design.X, tconfig)
    record = res.to_record()
    record["n"] = design.n
    record["dropped_rows"] = design.dropped
    text = json.dumps(record, indent=2) + "\n"
    if args.out:
        dio.atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def _run_simulate(args) -> int:
    cfg = dio.load_config(args.config)
    if "simulate" not in cfg:
        raise ValueError(f"{args.config}: needs a 'simulate' section")
    paths = reproduce_tables(cfg["simulate"], args.out_dir,
                             n_jobs=args.jobs, seed=args.seed)
    for p in paths:
        sys.stdout.write(p + "\n")
    return 0


def _surface_requests(cfg) -> list:
    surf = cfg.get("grids", {}).get("surface")
    if not surf:
        raise ValueError("config needs grids.surface to emit surface grids")
    entries = surf if isinstance(surf, list) else [surf]
    known = {"group_a", "pc_a", "group_b", "pc_b", "size", "span", "include_interaction"}
    for e in entries:
        unknown = set(e) - known
        if unknown:
            raise ValueError(f"unknown keys in grids.surface: {sorted(unknown)}")
        for key in ("group_a", "group_b"):
            if key not in e:
                raise ValueError(f"grids.surface entry missing {key!r}")
    return entries


def _run_surface(args) -> int:
    cfg, design, y, tconfig = _load_inputs(args)
    entries = _surface_requests(cfg)
    fit = test_interaction(design.groups, y, design.X, tconfig)
    os.makedirs(args.out_dir, exist_ok=True)
    for e in entries:
        grid = dio.surface_grid(
            fit,
            e["group_a"], int(e.get("pc_a", 1)),
            e["group_b"], int(e.get("pc_b", 1)),
            grid_size=int(e.get("size", 25)),
            span=tuple(e.get("span", (5.0, 95.0))),
            include_interaction=bool(e.get("include_interaction", True)),
        )
        name = (f"surface_{grid.group_a}_pc{grid.pc_a}_"
                f"{grid.group_b}_pc{grid.pc_b}.csv")
        path = os.path.join(args.out_dir, name)
        dio.write_surface_csv(path, grid)
        sys.stdout.write(path + "\n")
    return 0


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments and dispatch; returns the process exit code."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    runner = {"test": _run_test, "simulate": _run_simulate, "surface": _run_surface}
    try:
        return runner[args.command](args)
    except np.linalg.LinAlgError as e:
        sys.stderr.write(f"numeric failure: {e}\n")
        return 2
    except (ValueError, KeyError, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    except ArithmeticError as e:
        sys.stderr.write(f"numeric failure: {type(e).__name__}: {e}\n")
        return 2


def entry() -> None:
    sys.exit(cli_main(sys.argv[1:]))
