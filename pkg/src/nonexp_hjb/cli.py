"""Command-line interface: ``python -m nonexp_hjb <command> ...``.

Every command writes into a run directory holding its outputs and a
``manifest.json``.  Exit codes: 0 success, 2 invalid usage or input,
3 numerical failure, 4 refused precondition.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import hjb, irl, oracle, sim
from .discount import DiscountModel
from .serialization import (Checkpoint, RunManifest, load_checkpoint, save_checkpoint,
                            write_csv)
from .tasks import TaskError, TaskModel, get_task

log = logging.getLogger("nonexp_hjb")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_REFUSED = 0, 2, 3, 4


class UsageError(Exception):
    pass


class Refused(Exception):
    pass


# -- shared helpers -------------------------------------------------------------

def _solver_config(args, task_name: str) -> hjb.SolverConfig:
    """Defaults < --desk preset < config file < explicit flags."""
    fields = {}
    if getattr(args, "desk", False):
        fields.update(hjb.SolverConfig.desk().to_dict())
    else:
        fields.update(hjb.SolverConfig.full(task_name).to_dict())
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: line {exc.lineno}: {exc.msg}") from None
        if not isinstance(user, dict):
            raise UsageError(f"config file {path}: expected a JSON object")
        unknown = sorted(set(user) - set(hjb.SolverConfig.__dataclass_fields__))
        if unknown:
            raise UsageError(f"config file {path}: unknown field(s) {unknown}")
        fields.update(user)
    for name in ("episodes", "batch_size", "lr", "lr_final", "width", "seed",
                 "anneal_episodes", "anneal_offset_init", "lam_reparam", "precision",
                 "boundary_fraction"):
        v = getattr(args, name, None)
        if v is not None:
            fields[name] = v
    if "anneal_episodes" in fields and fields["anneal_episodes"] > fields["episodes"]:
        if getattr(args, "anneal_episodes", None) is None:
            fields["anneal_episodes"] = fields["episodes"] // 2
    for name, value in fields.items():
        try:
            hjb.SolverConfig(**{**hjb.SolverConfig().to_dict(), "anneal_episodes": 0, name: value})
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config field {name!r}: {exc}") from None
    try:
        return hjb.SolverConfig(**fields)
    except ValueError as exc:
        raise UsageError(f"invalid solver config: {exc}") from None


def _add_solver_flags(p):
    p.add_argument("--config", help="JSON file with solver settings")
    p.add_argument("--desk", action="store_true",
                   help="reduced episode count and batch size (fast, lower accuracy)")
    p.add_argument("--episodes", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-final", dest="lr_final", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--anneal-episodes", dest="anneal_episodes", type=int)
    p.add_argument("--anneal-offset", dest="anneal_offset_init", type=float)
    p.add_argument("--lam-reparam", dest="lam_reparam", type=float)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--boundary-fraction", dest="boundary_fraction", type=float,
                   help="share of collocation points placed on the box faces")


def _task(name) -> TaskModel:
    try:
        return get_task(name)
    except TaskError as exc:
        raise UsageError(str(exc)) from None


def _discount(text) -> DiscountModel:
    try:
        return DiscountModel.parse(text)
    except ValueError as exc:
        raise UsageError(f"invalid discount {text!r}: {exc}") from None


def _run_dir(path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _default_nx(task: TaskModel, nx):
    if nx is not None:
        return nx
    return 101 if task.state_dim == 1 else 21


def _write_grid(path, task, axes, ts, grid, manifest_hash):
    header = [f"x{i}" for i in range(task.state_dim)] + ["t", "V"]
    header += [f"Q_{a}" for a in task.actions] + ["policy_index"]
    x, t = grid["x"], grid["t"]
    V = grid["V"].ravel()
    Q = grid["Q"].reshape(len(V), task.n_actions)
    P = grid["policy"].ravel()
    rows = (list(x[i]) + [t[i], V[i]] + list(Q[i]) + [int(P[i])] for i in range(len(V)))
    write_csv(path, header, rows, manifest_hash)


def _net_grid(net, discount, task, nx, nt, t_max):
    axes = hjb.state_grid(task, nx)
    ts = np.linspace(0.0, t_max, nt)
    return axes, ts, hjb.solution_grid(net, discount, task, axes, ts)


# -- commands -------------------------------------------------------------------

def cmd_solve(args) -> int:
    task = _task(args.task)
    discount = _discount(args.discount)
    config = _solver_config(args, task.name)
    out = _run_dir(args.out)
    try:
        hjb.ensure_well_defined(discount, task)
    except hjb.DivergentObjective as exc:
        raise Refused(str(exc)) from None
    resolved = {"task": args.task, "discount": discount.to_dict(), "solver": config.to_dict(),
                "grid": {"nx": _default_nx(task, args.nx), "nt": args.nt, "t_max": args.t_max}}
    manifest = RunManifest.create("solve", resolved, config.seed,
                                  [args.task] if args.task.endswith(".json") else [])
    log.info("training %s on %s for %d episodes", discount, task.name, config.episodes)
    res = hjb.train(discount, task, config)
    ck = out / "checkpoint.json"
    save_checkpoint(ck, Checkpoint(res.net, discount, task, config.episodes, config.to_dict()))
    manifest.add_output(ck)
    loss_csv = out / "loss.csv"
    write_csv(loss_csv, ["episode", "loss", "offset"],
              ((k, res.loss_history[k], res.offsets[k]) for k in range(config.episodes)),
              manifest.input_hash)
    manifest.add_output(loss_csv)
    axes, ts, grid = _net_grid(res.net, discount, task, resolved["grid"]["nx"], args.nt, args.t_max)
    grid_csv = out / "grid.csv"
    _write_grid(grid_csv, task, axes, ts, grid, manifest.input_hash)
    manifest.add_output(grid_csv)
    mabs, mse = hjb.evaluation_residual(res.net, discount, task)
    manifest.config["report"] = {"final_loss": res.final_loss, "eval_mean_abs_residual": mabs,
                                 "eval_mean_sq_residual": mse, "seconds": res.seconds}
    manifest.finish(out)
    print(f"solve: final loss {res.final_loss:.3e}, eval mean |E| {mabs:.3e}; wrote {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    ck = _load_ckpt(args.checkpoint)
    task, discount = ck.task, ck.discount
    out = _run_dir(args.out)
    rng = np.random.default_rng(args.seed)
    resolved = {k: getattr(args, k) for k in ("checkpoint", "n", "x0", "t0", "horizon", "dt",
                                              "seed", "terminate", "noise_std")}
    manifest = RunManifest.create("simulate", resolved, args.seed, [args.checkpoint])
    pol = hjb.NetSolution(ck.net, discount, task)
    if args.x0 is not None:
        x0 = np.tile(np.asarray(args.x0, dtype=float), (args.n, 1))
        if x0.shape[1] != task.state_dim:
            raise UsageError(f"--x0 needs {task.state_dim} value(s)")
        try:
            task.check_state(x0)
        except TaskError as exc:
            raise UsageError(f"--x0: {exc}") from None
    else:
        x0 = rng.uniform(task.state_lo, task.state_hi, size=(args.n, task.state_dim))
    if args.dt <= 0 or args.horizon < 0:
        raise UsageError("need --dt > 0 and --horizon >= 0")
    trajs = sim.rollout_batch(pol, task, discount, x0, args.t0, args.horizon, args.dt, rng,
                              terminate=args.terminate)
    header = ["t"] + [f"x{i}" for i in range(task.state_dim)] + ["action_index", "reward"]
    for i, tr in enumerate(trajs):
        path = out / f"trajectory_{i:04d}.csv"
        rows = ([tr.times[k], *tr.states[k], int(tr.actions[k]), tr.rewards[k]]
                for k in range(tr.n_steps))
        write_csv(path, header, rows, manifest.input_hash)
        manifest.add_output(path)
    n_sw = None
    if args.noise_std is not None:
        if args.noise_std < 0:
            raise UsageError("--noise-std must be >= 0")
        data = [d for tr in trajs for d in sim.extract_switches(tr, task)]
        if args.noise_std > 0 and data:
            eps = rng.normal(0.0, args.noise_std, size=len(data))
            data = [irl.SwitchDatum(d.x, d.u_minus, d.u_plus, max(0.0, d.t + e))
                    for d, e in zip(data, eps)]
        path = out / "switches.json"
        irl.save_switch_data(path, data)
        manifest.add_output(path)
        n_sw = len(data)
    manifest.finish(out)
    extra = f", {n_sw} switch(es)" if n_sw is not None else ""
    print(f"simulate: {len(trajs)} trajectory file(s){extra}; wrote {out}")
    return EXIT_OK


def _load_ckpt(path):
    if not Path(path).exists():
        raise Refused(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from None


def _load_data(path, task):
    if not Path(path).exists():
        raise Refused(f"switch data file not found: {path}")
    try:
        return irl.load_switch_data(path, task)
    except irl.SwitchDataError as exc:
        raise UsageError(str(exc)) from None


def cmd_irl_scan(args) -> int:
    task = _task(args.task)
    data = _load_data(args.data, task)
    try:
        grid = irl.parse_grid(args.grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    config = _solver_config(args, task.name)
    out_csv = Path(args.out)
    out_dir = _run_dir(out_csv.parent)
    resolved = {"task": args.task, "data": args.data, "grid": args.grid,
                "solver": config.to_dict(), "gradient": not args.no_gradient}
    warm = None
    if args.warm_episodes is not None:
        if args.warm_episodes < 1:
            raise UsageError("--warm-episodes must be positive")
        warm = dataclasses.replace(config, episodes=args.warm_episodes, anneal_episodes=0)
        resolved["warm_episodes"] = args.warm_episodes
    manifest = RunManifest.create("irl scan", resolved, config.seed, [args.data])

    def progress(i, row):
        log.info("node %d/%d alpha0=%.3g beta0=%.3g F=%.3e %s", i + 1, len(grid),
                 row.alpha0, row.beta0, row.F, row.status)

    rows = irl.grid_scan(task, data, grid, config, with_gradient=not args.no_gradient,
                         progress=progress, warm_config=warm)
    write_csv(out_csv, irl.SCAN_COLUMNS, (r.as_tuple() for r in rows), manifest.input_hash)
    manifest.add_output(out_csv)
    manifest.finish(out_dir)
    best = irl.scan_argmin(rows)
    where = f"argmin F at alpha0={best.alpha0:g}, beta0={best.beta0:g}" if best else "no successful node"
    print(f"irl scan: {len(rows)} rows, {where}; wrote {out_csv}")
    return EXIT_OK


def cmd_irl_eval(args) -> int:
    ck = _load_ckpt(args.checkpoint)
    data = _load_data(args.data, ck.task)
    out = _run_dir(args.out)
    resolved = {"checkpoint": args.checkpoint, "data": args.data,
                "sensitivity_checkpoint": args.sensitivity}
    files = [args.checkpoint, args.data] + ([args.sensitivity] if args.sensitivity else [])
    manifest = RunManifest.create("irl eval", resolved, None, files)
    F = irl.switch_objective(ck.net, ck.discount, ck.task, data)
    report = {"n_data": len(data), "mean_F": float(np.mean(F)) if len(F) else 0.0,
              "sum_F": float(np.sum(F))}
    if args.sensitivity:
        sens = _load_ckpt(args.sensitivity)
        g = irl.total_gradient(ck.net, sens.net, ck.discount, ck.task, data)
        report["dF_dtheta"] = g.tolist()
    path = out / "eval.json"
    path.write_text(json.dumps(report, indent=2))
    manifest.add_output(path)
    per = out / "switch_objective.csv"
    header = [f"x{i}" for i in range(ck.task.state_dim)] + ["t", "u_minus", "u_plus", "F"]
    write_csv(per, header, ([*d.x, d.t, d.u_minus, d.u_plus, f] for d, f in zip(data, F)),
              manifest.input_hash)
    manifest.add_output(per)
    manifest.finish(out)
    print(f"irl eval: mean F {report['mean_F']:.3e} over {len(data)} switch(es)")
    return EXIT_OK


def cmd_irl_sensitivity(args) -> int:
    ck = _load_ckpt(args.checkpoint)
    if not ck.discount.is_hyperbolic:
        raise Refused("sensitivities need a hyperbolic discount")
    config = _solver_config(args, ck.task.name)
    out = _run_dir(args.out)
    manifest = RunManifest.create("irl sensitivity", {"checkpoint": args.checkpoint,
                                                       "solver": config.to_dict()},
                                  config.seed, [args.checkpoint])
    res = irl.train_sensitivity(ck.net, ck.discount, ck.task, config)
    path = out / "sensitivity.json"
    save_checkpoint(path, Checkpoint(res.net, ck.discount, ck.task, config.episodes,
                                     config.to_dict(), kind="sensitivity"))
    manifest.add_output(path)
    manifest.finish(out)
    print(f"irl sensitivity: wrote {path}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    task = _task(args.task)
    discount = _discount(args.discount)
    if discount.is_hyperbolic and discount.alpha0 <= 1:
        raise Refused(f"divergent objective: alpha0 = {discount.alpha0:g} <= 1")
    nx = args.nx if args.nx is not None else (201 if task.state_dim == 1 else 51)
    spec = oracle.GridSpec(n_states=nx, dt=args.dt, t_max=args.t_max, t_save=args.t_save,
                           save_every=args.save_every, richardson=args.richardson)
    out = _run_dir(args.out)
    resolved = {"task": args.task, "discount": discount.to_dict(), "grid": vars(spec).copy(),
                "compare": args.compare, "t_probe": args.t_probe}
    manifest = RunManifest.create("oracle", resolved, None,
                                  [args.compare] if args.compare not in (None, "self") else [])
    try:
        sol = oracle.backward_induction(task, discount, spec)
    except hjb.DivergentObjective as exc:
        raise Refused(str(exc)) from None
    mesh = np.meshgrid(*sol.axes, sol.times, indexing="ij")
    grid = {"x": np.stack([m.ravel() for m in mesh[:-1]], axis=-1), "t": mesh[-1].ravel(),
            "V": sol.V, "Q": sol.Q, "policy": sol.policy}
    path = out / "grid.csv"
    _write_grid(path, task, sol.axes, sol.times, grid, manifest.input_hash)
    manifest.add_output(path)
    report = {"t_max": sol.t_max, "dt": sol.dt, "coarse": sol.coarse,
              "richardson_error": sol.richardson_error,
              "V_t0_mean": float(np.mean(sol.V[..., 0]))}
    if args.compare:
        if args.compare == "self":
            other = sol
        else:
            ck = _load_ckpt(args.compare)
            other = hjb.NetSolution(ck.net, ck.discount, ck.task)
        report["comparison"] = oracle.compare(other, sol, t_probe=args.t_probe).to_dict()
    rpath = out / "report.json"
    rpath.write_text(json.dumps(report, indent=2))
    manifest.add_output(rpath)
    manifest.finish(out)
    if sol.coarse:
        print(f"oracle: WARNING grid too coarse (Richardson error {sol.richardson_error:.3g})")
    msg = f"oracle: V(., 0) mean {report['V_t0_mean']:.4g}"
    if "comparison" in report:
        c = report["comparison"]
        msg += f", agreement {c['agreement']:.3f}, relative RMSE {c['relative_rmse']:.3g}"
    print(msg + f"; wrote {out}")
    return EXIT_OK


def cmd_export(args) -> int:
    ck = _load_ckpt(args.checkpoint)
    out_csv = Path(args.out)
    out_dir = _run_dir(out_csv.parent)
    nx = _default_nx(ck.task, args.nx)
    manifest = RunManifest.create("export", {"checkpoint": args.checkpoint, "nx": nx,
                                             "nt": args.nt, "t_max": args.t_max},
                                  None, [args.checkpoint])
    if ck.kind != "value":
        raise UsageError("export needs a value-function checkpoint")
    axes, ts, grid = _net_grid(ck.net, ck.discount, ck.task, nx, args.nt, args.t_max)
    _write_grid(out_csv, ck.task, axes, ts, grid, manifest.input_hash)
    manifest.add_output(out_csv)
    manifest.finish(out_dir)
    print(f"export: wrote {out_csv}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nonexp_hjb",
                                description="HJB solver under non-exponential discounting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="train a value network and export grids")
    s.add_argument("--task", required=True, help="line, investment, constant or a task .json")
    s.add_argument("--discount", required=True, help="e.g. hyperbolic:5,1 or exponential:0.2")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--nx", type=int, help="grid nodes per state dimension")
    s.add_argument("--nt", type=int, default=101)
    s.add_argument("--t-max", dest="t_max", type=float, default=10.0)
    _add_solver_flags(s)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("simulate", help="roll out a trained policy")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--x0", type=float, nargs="+", help="start state (default: uniform random)")
    s.add_argument("--t0", type=float, default=0.0)
    s.add_argument("--horizon", type=float, default=10.0)
    s.add_argument("--dt", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-terminate", dest="terminate", action="store_false",
                   help="ignore random termination")
    s.add_argument("--noise-std", dest="noise_std", type=float,
                   help="also write switches.json with switch times perturbed by this std")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("irl", help="inverse problem tools")
    isub = s.add_subparsers(dest="irl_command", required=True)
    sc = isub.add_parser("scan", help="objective and gradient on a theta grid")
    sc.add_argument("--task", required=True)
    sc.add_argument("--data", required=True)
    sc.add_argument("--grid", required=True, help="a0=start:stop:n,b0=start:stop:n")
    sc.add_argument("--out", required=True, help="scan CSV path")
    sc.add_argument("--no-gradient", action="store_true")
    sc.add_argument("--warm-episodes", type=int, default=None,
                    help="continue each node from its neighbour's networks for this many episodes")
    _add_solver_flags(sc)
    sc.set_defaults(func=cmd_irl_scan)
    ev = isub.add_parser("eval", help="switch objective (and gradient) for a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--sensitivity", help="sensitivity checkpoint for the gradient")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_irl_eval)
    se = isub.add_parser("sensitivity", help="train the sensitivity network for a checkpoint")
    se.add_argument("--checkpoint", required=True)
    se.add_argument("--out", required=True)
    _add_solver_flags(se)
    se.set_defaults(func=cmd_irl_sensitivity)

    s = sub.add_parser("oracle", help="backward-induction reference solution")
    s.add_argument("--task", required=True)
    s.add_argument("--discount", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--nx", type=int)
    s.add_argument("--dt", type=float, default=0.01)
    s.add_argument("--t-max", dest="t_max", type=float)
    s.add_argument("--t-save", dest="t_save", type=float, default=10.0)
    s.add_argument("--save-every", dest="save_every", type=int, default=10)
    s.add_argument("--richardson", action="store_true", help="check against a refined grid")
    s.add_argument("--compare", help="value checkpoint to compare against, or 'self'")
    s.add_argument("--t-probe", dest="t_probe", type=float, default=8.0)
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("export", help="value/Q/policy grid from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="grid CSV path")
    s.add_argument("--nx", type=int)
    s.add_argument("--nt", type=int, default=101)
    s.add_argument("--t-max", dest="t_max", type=float, default=10.0)
    s.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Refused as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except hjb.DivergentObjective as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except (FloatingPointError, oracle.OracleError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
