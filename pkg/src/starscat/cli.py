"""Batch front door: forward / inverse / roundtrip / check-conditions / report.

All structured data is JSON; plot series are CSV.  Complex numbers are
serialized as paired re/im fields.  Every output file starts with the
hash of the canonical config, so identical configs reproduce identical
bytes.  Exit codes: 0 all checks pass, 2 condition failure, 3 solver
failure, 4 validation error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .graph import (ConditionViolationError, GraphProblem, GraphSpec,
                    ScatteringData)
from .inverse import (ModelProblem, complete_inverse, procedure_41,
                      real_grid_from_nodes)
from .numerics import RankDeficiencyError, RealGrid
from .potentials import Potential

EXIT_OK = 0
EXIT_CONDITION = 2
EXIT_SOLVER = 3
EXIT_VALIDATION = 4


class ConfigError(ValueError):
    """Config file invalid: missing or malformed field."""


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _require(cfg: dict, field: str):
    if field not in cfg:
        raise ConfigError(f"config field {field!r} is required")
    return cfg[field]


def _grid_from_config(cfg: dict) -> RealGrid:
    g = cfg.get("grid", {})
    return RealGrid.symmetric_hybrid(
        rho_min=g.get("rho_min", 1e-2),
        rho_max=g.get("rho_max", 40.0),
        n_per_side=g.get("n_per_side", 512),
    )


def _region_from_config(cfg: dict):
    r = cfg.get("search_region")
    if r is None:
        return (-12.0, 12.0, 0.01, 12.0)
    return (r["re_lo"], r["re_hi"], r["im_lo"], r["im_hi"])


def _x_grid_from_config(cfg: dict) -> np.ndarray:
    g = cfg.get("x_grid", {})
    lo = g.get("min", 0.04)
    hi = g.get("max", 2.06)
    n = g.get("n", 203)
    return np.linspace(lo, hi, n)


def _rho_eval_from_config(cfg: dict):
    pairs = cfg.get("rho_eval")
    if not pairs:
        return (1.3j, 2.2j)
    return tuple(complex(p[0], p[1]) for p in pairs)


def _write_json(path: Path, payload: dict, chash: str):
    data = {"config_hash": chash}
    data.update(payload)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: str, columns, chash: str):
    lines = [f"# config_hash={chash}", header]
    rows = zip(*columns)
    for row in rows:
        lines.append(",".join(f"{v:.16g}" for v in row))
    path.write_text("\n".join(lines) + "\n")


def _load_graph(cfg: dict, key: str = "graph") -> GraphSpec:
    src = _require(cfg, key)
    if isinstance(src, str):
        src = json.loads(Path(src).read_text())
    try:
        return GraphSpec.from_json(src)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed graph spec: missing {exc}") from exc


def cmd_forward(cfg: dict, out_dir: Path, chash: str) -> int:
    spec = _load_graph(cfg)
    grid = _grid_from_config(cfg)
    region = _region_from_config(cfg)
    problem = GraphProblem(spec)
    report = problem.check_conditions(grid.nodes, region)
    _write_json(out_dir / "conditions.json", report.to_json(), chash)
    if not report.all_pass:
        sys.stderr.write("graph conditions failed; see conditions.json\n")
        return EXIT_CONDITION
    data = problem.forward_scattering(grid.nodes, region, check=False)
    _write_json(out_dir / "scattering.json", data.to_json(), chash)
    for ray in data.rays:
        _write_csv(out_dir / f"reflection_k{ray.k}.csv", "rho,re_r,im_r",
                   (ray.rho_grid, ray.r.real, ray.r.imag), chash)
    return EXIT_OK


def cmd_check_conditions(cfg: dict, out_dir: Path, chash: str) -> int:
    spec = _load_graph(cfg)
    grid = _grid_from_config(cfg)
    region = _region_from_config(cfg)
    problem = GraphProblem(spec)
    report = problem.check_conditions(grid.nodes, region)
    _write_json(out_dir / "conditions.json", report.to_json(), chash)
    return EXIT_OK if report.all_pass else EXIT_CONDITION


def _load_scattering(cfg: dict) -> ScatteringData:
    src = _require(cfg, "scattering_data")
    if isinstance(src, str):
        src = json.loads(Path(src).read_text())
    return ScatteringData.from_json(src)


def _model_spec(cfg: dict, data_p: int) -> GraphSpec:
    model = cfg.get("model", "zero")
    if model == "zero":
        base = _load_graph(cfg, "graph") if "graph" in cfg else None
        if base is None:
            raise ConfigError('model "zero" needs the graph spec for nu/sigma data')
        return GraphSpec([(ray, Potential.zero()) for ray, _ in base.rays])
    if isinstance(model, str):
        model = json.loads(Path(model).read_text())
    return GraphSpec.from_json(model)


def cmd_inverse(cfg: dict, out_dir: Path, chash: str) -> int:
    data = _load_scattering(cfg)
    model_spec = _model_spec(cfg, data.p)
    x_grid = _x_grid_from_config(cfg)
    rho_eval = _rho_eval_from_config(cfg)
    grid = real_grid_from_nodes(data.ray(1).rho_grid)
    try:
        inv = complete_inverse(data, model_spec, x_grid, rho_eval=rho_eval, grid=grid)
    except ConditionViolationError as exc:
        sys.stderr.write(f"model rejected: {exc}\n")
        return EXIT_CONDITION
    except RankDeficiencyError as exc:
        sys.stderr.write(f"solver failure: {exc}\n")
        return EXIT_SOLVER
    for k, res in inv.results.items():
        _write_csv(out_dir / f"recovered_q_k{k}.csv",
                   "x,re_q,im_q",
                   (res.x_grid, res.q.real, res.q.imag), chash)
    _write_csv(out_dir / "weyl_last_ray.csv", "rho,re_m,im_m",
               (inv.rho_weyl, inv.m_p.real, inv.m_p.imag), chash)
    diag = {"per_ray": {str(k): res.diagnostics for k, res in inv.results.items()},
            "excluded_rho": inv.diagnostics["excluded_rho"]}
    _write_json(out_dir / "inverse_diagnostics.json", diag, chash)
    worst = max(res.diagnostics["solve_residual_max"] for res in inv.results.values())
    return EXIT_OK if worst < 1e-6 else EXIT_SOLVER


def cmd_roundtrip(cfg: dict, out_dir: Path, chash: str) -> int:
    spec = _load_graph(cfg)
    grid = _grid_from_config(cfg)
    region = _region_from_config(cfg)
    problem = GraphProblem(spec)
    report = problem.check_conditions(grid.nodes, region)
    _write_json(out_dir / "conditions.json", report.to_json(), chash)
    if not report.all_pass:
        return EXIT_CONDITION
    data = problem.forward_scattering(grid.nodes, region, check=False)
    _write_json(out_dir / "scattering.json", data.to_json(), chash)

    model_spec = GraphSpec([(ray, Potential.zero()) for ray, _ in spec.rays])
    x_grid = _x_grid_from_config(cfg)
    rho_eval = _rho_eval_from_config(cfg)
    comparisons = {}
    for k in range(1, spec.p):
        model = ModelProblem(model_spec, k, x_grid, pole_region=region)
        res = procedure_41(data.ray(k), model, rho_eval=rho_eval, grid=grid)
        q_true = spec.rays[k - 1][1](res.x_grid)
        _write_csv(out_dir / f"roundtrip_q_k{k}.csv",
                   "x,re_q,im_q,re_q_true,im_q_true",
                   (res.x_grid, res.q.real, res.q.imag, q_true.real, q_true.imag),
                   chash)
        denom = float(np.linalg.norm(q_true))
        err = float(np.linalg.norm(res.q - q_true) / denom) if denom > 0 else \
            float(np.linalg.norm(res.q))
        comparisons[str(k)] = {"rel_l2_error": err,
                               "diagnostics": res.diagnostics}
    _write_json(out_dir / "roundtrip_summary.json", {"rays": comparisons}, chash)
    tol = cfg.get("tolerances", {}).get("roundtrip_rel_l2", 1e-2)
    ok = all(v["rel_l2_error"] <= tol for v in comparisons.values())
    return EXIT_OK if ok else EXIT_SOLVER


def cmd_report(cfg: dict, out_dir: Path, chash: str) -> int:
    run_dir = Path(_require(cfg, "run_dir"))
    if not run_dir.exists():
        raise ConfigError(f"run_dir {run_dir} does not exist")
    lines = ["run report", "=========="]
    conditions = run_dir / "conditions.json"
    if conditions.exists():
        rep = json.loads(conditions.read_text())
        for key in ("condition_nu", "condition_g", "condition_r0", "condition_rinf"):
            lines.append(f"{key}: {'pass' if rep.get(key) else 'FAIL'}")
        wit = rep.get("witnesses", {})
        if "a_inf" in wit:
            lines.append(f"a_inf leading: {wit['a_inf'][0]}")
        if "d_zero" in wit:
            lines.append(f"d_zero: {wit['d_zero']}")
        if "delta_large_fit" in wit:
            fit = wit["delta_large_fit"]
            lines.append(f"large-rho fit residual: {fit['residual']:.3e}, "
                         f"closed-form mismatch: {fit['rel_mismatch']:.3e}")
    scattering = run_dir / "scattering.json"
    if scattering.exists():
        data = ScatteringData.from_json(json.loads(scattering.read_text()))
        spec = _load_graph(cfg) if "graph" in cfg else None
        for ray in data.rays:
            lines.append(f"ray {ray.k}: {len(ray.poles)} pole(s), "
                         f"max |r| = {float(np.max(np.abs(ray.r))):.4f}")
        if spec is not None:
            problem = GraphProblem(spec)
            dvals = np.array([abs(problem.delta(complex(r)))
                              for r in data.rays[0].rho_grid[::8]])
            _write_csv(out_dir / "delta_abs.csv", "rho,abs_delta",
                       (data.rays[0].rho_grid[::8], dvals), chash)
            lines.append("wrote delta_abs.csv")
    summary = run_dir / "roundtrip_summary.json"
    if summary.exists():
        summ = json.loads(summary.read_text())
        for k, v in summ.get("rays", {}).items():
            lines.append(f"roundtrip ray {k}: rel L2 error {v['rel_l2_error']:.3e}")
    (out_dir / "report.txt").write_text(
        f"# config_hash={chash}\n" + "\n".join(lines) + "\n")
    return EXIT_OK


COMMANDS = {
    "forward": cmd_forward,
    "inverse": cmd_inverse,
    "roundtrip": cmd_roundtrip,
    "check-conditions": cmd_check_conditions,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="starscat",
        description="Direct and inverse scattering on star graphs of singular rays")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="path to the JSON config")
    parser.add_argument("--output", default=".", help="output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for batch sweeps (advisory)")
    parser.add_argument("--tolerance-scale", type=float, default=1.0,
                        help="scale factor applied to pass/fail tolerances")
    args = parser.parse_args(argv)

    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"cannot read config: {exc}\n")
        return EXIT_VALIDATION
    if not isinstance(cfg, dict):
        sys.stderr.write("config must be a JSON object\n")
        return EXIT_VALIDATION
    if args.tolerance_scale != 1.0:
        tol = cfg.setdefault("tolerances", {})
        for key in list(tol):
            tol[key] = tol[key] * args.tolerance_scale

    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    try:
        return COMMANDS[args.command](cfg, out_dir, chash)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_VALIDATION
    except (KeyError, FileNotFoundError) as exc:
        sys.stderr.write(f"validation error: {exc}\n")
        return EXIT_VALIDATION
    except ConditionViolationError as exc:
        sys.stderr.write(f"condition failure: {exc}\n")
        return EXIT_CONDITION
    except RankDeficiencyError as exc:
        sys.stderr.write(f"solver failure: {exc}\n")
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
