"""Batch entry point: run solver commands from a JSON config.

Commands: ``simulate``, ``solve``, ``ladder``, ``oracle``, ``compare``,
``validate``. Artifacts are plain JSON/CSV with no timestamps or host
information, so identical config and seed reproduce byte-identical files
regardless of the worker count.

Exit codes: 0 success, 1 validation hard-failure, 2 numerical abort,
3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backward import (
    DivergenceError,
    SchemeConfig,
    penalization_ladder,
    skorohod_residual,
    solve_backward,
)
from .catalog import build_problem, list_catalog
from .forward import dump_paths_csv, simulate_paths
from .oracles import GridSolution, default_grid, fd_solve, oracle_compare
from .problem import validate_problem
from .regression import BasisSpec

SCHEMA_VERSION = 1
COMMANDS = ("simulate", "solve", "ladder", "oracle", "compare", "validate")


class ConfigError(ValueError):
    """Malformed run configuration."""


def _load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _require(cfg: dict, key: str, kind, where: str):
    if key not in cfg:
        raise ConfigError(f"missing required key {key!r} in {where}")
    value = cfg[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{where}.{key} must be a number")
        return float(value)
    if kind is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where}.{key} must be an integer")
        return value
    if not isinstance(value, kind):
        raise ConfigError(f"{where}.{key} has the wrong type")
    return value


def _basis_from(cfg: dict) -> BasisSpec:
    try:
        return BasisSpec(
            kind=cfg.get("kind", "global-polynomial"),
            degree=int(cfg.get("degree", 2)),
            stratify_by_regime=bool(cfg.get("stratify_by_regime", True)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _scheme_from(cfg: dict, seed: int) -> SchemeConfig:
    scheme = cfg.get("scheme", {})
    if not isinstance(scheme, dict):
        raise ConfigError("scheme must be an object")
    try:
        return SchemeConfig(
            h=_require(scheme, "h", float, "scheme"),
            n=int(scheme.get("n", 0)),
            paths=_require(scheme, "paths", int, "scheme"),
            basis=_basis_from(scheme.get("basis", {})),
            ridge=scheme.get("ridge"),
            clip_to_growth_bound=bool(scheme.get("clip_to_growth_bound", False)),
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _resolve_seed(cfg: dict, override) -> int:
    if override is not None:
        return int(override)
    if "seed" not in cfg:
        raise ConfigError("seed is mandatory: set it in the config or pass --seed")
    seed = cfg["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    return seed


def _json_dump(obj: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _grid_csv(sol: GridSolution, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,x,regime,value\n")
        for i in range(sol.values.shape[0]):
            for kt, t in enumerate(sol.times):
                row = sol.values[i, kt]
                for x, v in zip(sol.xs, row):
                    fh.write(f"{float(t)!r},{float(x)!r},{i + 1},{float(v)!r}\n")


def _steps_csv(result, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        d = result.zs[0].shape[1]
        mm = result.us[0].shape[1]
        zcols = ",".join(f"z_{c+1}" for c in range(d))
        ucols = ",".join(f"u_{c+1}" for c in range(mm))
        fh.write(f"step,path,y,{zcols},{ucols},penalty_mass\n")
        for k in range(len(result.zs)):
            for p in range(result.ys[k].shape[0]):
                zs = ",".join(repr(float(v)) for v in result.zs[k][p])
                us = ",".join(repr(float(v)) for v in result.us[k][p])
                fh.write(
                    f"{k},{p},{float(result.ys[k][p])!r},{zs},{us},"
                    f"{float(result.penalty_mass[k][p])!r}\n"
                )


def _regression_csv(result, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,family,stratum,sample_count,gram_condition,residual_mse,rank_deficient\n")
        for r in result.fit_records:
            fh.write(
                f"{r.step},{r.family},{r.stratum},{r.sample_count},"
                f"{r.gram_condition!r},{r.residual_mse!r},{int(r.rank_deficient)}\n"
            )


def _problem_from(cfg: dict):
    problem_cfg = cfg.get("problem")
    if not isinstance(problem_cfg, dict):
        raise ConfigError("config needs a 'problem' object")
    name = _require(problem_cfg, "name", str, "problem")
    overrides = problem_cfg.get("overrides", {})
    if not isinstance(overrides, dict):
        raise ConfigError("problem.overrides must be an object")
    known = {entry for entry, _ in list_catalog()}
    if name not in known:
        raise ConfigError(f"unknown catalog problem {name!r}; known: {sorted(known)}")
    try:
        spec = build_problem(name, overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return spec, name, overrides


def _fd_settings(cfg: dict, spec):
    oracle_cfg = cfg.get("oracle", {})
    fd_cfg = oracle_cfg.get("fd", {}) if isinstance(oracle_cfg, dict) else {}
    M = int(fd_cfg.get("M", 400))
    x_lo, x_hi = fd_cfg.get("x_min"), fd_cfg.get("x_max")
    if x_lo is None or x_hi is None:
        _, lo, hi = default_grid(spec, M)
        x_lo = lo if x_lo is None else float(x_lo)
        x_hi = hi if x_hi is None else float(x_hi)
    dt = float(fd_cfg.get("dt", 1e-3))
    mode = fd_cfg.get("mode", "projection")
    penalization = fd_cfg.get("n")
    facelift = bool(fd_cfg.get("facelift", True))
    return (M, float(x_lo), float(x_hi)), dt, mode, penalization, facelift


def run(
    command: str,
    config_path: str,
    *,
    seed=None,
    workers: int = 1,
    out=None,
    dump_paths: bool = False,
    dump_steps: bool = False,
    dump_regression: bool = False,
) -> int:
    """Execute one command; returns the process exit status."""
    try:
        cfg = _load_config(config_path)
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}; valid: {COMMANDS}")
        seed_val = _resolve_seed(cfg, seed)
        out_dir = Path(out if out is not None else cfg.get("outputs", {}).get("dir", "."))
        out_dir.mkdir(parents=True, exist_ok=True)

        if command == "validate":
            return _cmd_validate(cfg, out_dir)

        spec, name, overrides = _problem_from(cfg)
        problem_echo = {"name": name, "overrides": overrides}

        if command == "oracle":
            grid, dt, mode, n_pen, facelift = _fd_settings(cfg, spec)
            if mode == "penalized" and n_pen is None:
                raise ConfigError("oracle.fd.n is required in penalized mode")
            try:
                sol = fd_solve(spec, grid, dt, mode=mode, penalization=n_pen, facelift=facelift)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            _grid_csv(sol, out_dir / "grid.csv")
            _json_dump(
                {
                    "schema_version": SCHEMA_VERSION,
                    "problem": problem_echo,
                    "grid": {"M": grid[0], "x_min": grid[1], "x_max": grid[2], "dt": dt},
                    "mode": mode,
                    "penalization": n_pen,
                    "facelift": facelift,
                    "value_at_start": sol.value_at(0.0, spec.initial_regime, float(spec.initial_state[0])),
                },
                out_dir / "grid.json",
            )
            return 0

        scheme = _scheme_from(cfg, seed_val)

        if command == "simulate":
            bundle = simulate_paths(
                spec, scheme.paths, scheme.h, seed_val, workers=workers, problem_ref=(name, overrides)
            )
            dump_paths_csv(bundle, out_dir / "paths.csv")
            return 0

        if command == "ladder":
            schedule = cfg.get("ladder", {}).get("n_schedule", [1, 2, 4, 8, 16, 32, 64])
            bundle = simulate_paths(
                spec, scheme.paths, scheme.h, seed_val, workers=workers, problem_ref=(name, overrides)
            )
            report = penalization_ladder(spec, scheme, schedule, bundle)
            _json_dump(
                {
                    "schema_version": SCHEMA_VERSION,
                    "problem": problem_echo,
                    "scheme": scheme.echo(),
                    **report.to_dict(),
                },
                out_dir / "ladder.json",
            )
            return 0

        # solve / compare share the solve stage
        bundle = simulate_paths(
            spec, scheme.paths, scheme.h, seed_val, workers=workers, problem_ref=(name, overrides)
        )
        result = solve_backward(spec, scheme, bundle)
        residual = skorohod_residual(result, spec, bundle)
        payload = {
            "schema_version": SCHEMA_VERSION,
            "problem": problem_echo,
            "scheme": scheme.echo(),
            "mode": result.mode,
            "y0": result.y0,
            "diagnostics": {**result.diagnostics_dict(), "skorohod_residual": residual},
        }
        if dump_paths:
            dump_paths_csv(bundle, out_dir / "paths.csv")
        if dump_steps:
            _steps_csv(result, out_dir / "steps.csv")
        if dump_regression:
            _regression_csv(result, out_dir / "regression.csv")

        if command == "solve":
            _json_dump(payload, out_dir / "result.json")
            return 0

        # compare
        grid, dt, mode, n_pen, facelift = _fd_settings(cfg, spec)
        sol = fd_solve(spec, grid, dt, mode=mode, penalization=n_pen, facelift=facelift)
        report = oracle_compare(result, sol, (0.0, spec.initial_regime, float(spec.initial_state[0])))
        _json_dump(payload, out_dir / "result.json")
        _json_dump(
            {
                "schema_version": SCHEMA_VERSION,
                "problem": problem_echo,
                "scheme": scheme.echo(),
                "fd": {"M": grid[0], "x_min": grid[1], "x_max": grid[2], "dt": dt, "mode": mode},
                **report.to_dict(),
            },
            out_dir / "compare.json",
        )
        return 0

    except DivergenceError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3


def _cmd_validate(cfg: dict, out_dir: Path) -> int:
    try:
        spec, name, _ = _problem_from(cfg)
        report = validate_problem(spec, sample_count=int(cfg.get("validate", {}).get("samples", 200)), rng_seed=0)
    except (ConfigError, ValueError) as exc:
        _json_dump(
            {"schema_version": SCHEMA_VERSION, "passed": False, "error": str(exc)},
            out_dir / "validation.json",
        )
        print(f"validation failed: {exc}", file=sys.stderr)
        return 1
    _json_dump(
        {"schema_version": SCHEMA_VERSION, "problem": name, **report.to_dict()},
        out_dir / "validation.json",
    )
    return 0 if report.passed else 1


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(prog="switchbsde", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="path to the JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--workers", type=int, default=1, help="bound on simulation parallelism")
    parser.add_argument("--out", default=None, help="output directory (overrides config)")
    parser.add_argument("--dump-paths", action="store_true")
    parser.add_argument("--dump-steps", action="store_true")
    parser.add_argument("--dump-regression", action="store_true")
    args = parser.parse_args(argv)
    sys.exit(
        run(
            args.command,
            args.config,
            seed=args.seed,
            workers=args.workers,
            out=args.out,
            dump_paths=args.dump_paths,
            dump_steps=args.dump_steps,
            dump_regression=args.dump_regression,
        )
    )


if __name__ == "__main__":
    main()
