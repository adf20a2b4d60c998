"""Command-line runner: ``wasspo {grid,traj,wm,verify}``.

Exit status: 0 success, 1 a verify check failed, 2 invalid configuration,
3 numerical failure (singular solve, non-unique stationary law, diverging
rollout).
"""
from __future__ import annotations

import argparse
import logging
import sys
import zlib
from pathlib import Path

import numpy as np

from . import artifacts as io
from . import envs, grid as gridmod, trajopt, verify
from .config import CHECKS, COMMANDS, ConfigError, RunConfig, load_config
from .world_model import joint_train

log = logging.getLogger("wasspo")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
NUMERICAL_ERRORS = (np.linalg.LinAlgError, FloatingPointError, verify.GeodesicCrossingError)


def component_rng(seed: int, label: str) -> np.random.Generator:
    """Generator for one named component; independent of every other label."""
    return np.random.default_rng([int(seed), zlib.crc32(label.encode())])


def _summary(cfg: RunConfig, files, **results) -> dict:
    return {"schema": io.SCHEMA, "command": cfg.command, "seed": cfg.seed,
            "config": cfg.echo(), "files": sorted(files), **results}


def run_grid(cfg: RunConfig, out: Path) -> int:
    env = cfg.make_env()
    res = gridmod.policy_iteration(env, cfg.params, component_rng(cfg.seed, "grid"))
    names = io.state_names(env)
    pts = res.grid.points
    io.write_csv(out / "history.csv", ["iter", "avg_cost"], res.history)
    io.write_csv(out / "value.csv", [*names, "V"],
                 [[*p, v] for p, v in zip(pts, res.solution.v)])
    m, da = res.particles.shape[1:]
    cols = [f"a{i}" if da == 1 else f"a{i}_{d}" for i in range(m) for d in range(da)]
    cols += ["mean"] if da == 1 else [f"mean_{d}" for d in range(da)]
    rows = [[*p, *a.ravel(), *mu] for p, a, mu in zip(pts, res.particles, res.mean_action)]
    io.write_csv(out / "policy.csv", [*names, *cols], rows)
    files = ["history.csv", "value.csv", "policy.csv", "summary.json"]
    io.write_json(out / "summary.json", _summary(
        cfg, files, initial_avg_cost=res.history[0]["avg_cost"],
        final_avg_cost=res.history[-1]["avg_cost"], grid_shape=res.grid.shape))
    return EXIT_OK


def _evaluate(env, policy, out: Path) -> dict:
    tr = trajopt.simulate(env, policy, trajopt.evaluation_start(env), trajopt.evaluation_steps(env))
    io.write_trajectory(out / "trajectory.csv", env, tr)
    report = trajopt.settle_report(env, tr)
    if env.name == "pendulum":
        report["J_hang"] = trajopt.hanging_baseline(env)
    return report


def run_traj(cfg: RunConfig, out: Path) -> int:
    env = cfg.make_env()
    res = trajopt.train(env, cfg.params, component_rng(cfg.seed, "traj"))
    io.write_csv(out / "history.csv", ["iter", "J", "grad_norm", "step_norm"], res.history)
    evaluation = _evaluate(env, res.policy, out)
    res.policy.save(out / "policy.txt")
    files = ["history.csv", "trajectory.csv", "policy.txt", "summary.json"]
    final_j = res.history[-1]["J"] if res.history else None
    io.write_json(out / "summary.json", _summary(cfg, files, final_J=final_j, evaluation=evaluation))
    return EXIT_OK


def run_wm(cfg: RunConfig, out: Path) -> int:
    env = cfg.make_env()
    res = joint_train(env, cfg.params, component_rng(cfg.seed, "wm"))
    io.write_csv(out / "policy_loss.csv", ["iter", "J", "grad_norm", "step_norm"], res.policy_history)
    io.write_csv(out / "wm_loss.csv", ["iter", "update", "loss"], res.wm_history)
    evaluation = _evaluate(env, res.policy, out)
    res.policy.save(out / "policy.txt")
    files = ["policy_loss.csv", "wm_loss.csv", "trajectory.csv", "policy.txt", "summary.json"]
    wm_loss = [r["loss"] for r in res.wm_history]
    io.write_json(out / "summary.json", _summary(
        cfg, files, final_J=res.policy_history[-1]["J"] if res.policy_history else None,
        wm_loss_initial=wm_loss[0] if wm_loss else None,
        wm_loss_final=wm_loss[-1] if wm_loss else None, evaluation=evaluation))
    return EXIT_OK


# verify ---------------------------------------------------------------------

def _report(check, inputs, values, tolerance, passed) -> dict:
    return {"schema": io.SCHEMA, "check": check, "inputs": inputs,
            "inputs_digest": io.digest(inputs), "values": values,
            "tolerance": tolerance, "passed": bool(passed)}


def _instance_inputs(inst) -> dict:
    return {"name": inst.name, "grid_shape": inst.grid.shape, "sigma": inst.sigma,
            "env_params": inst.env.params, "particles": inst.particles, "v": inst.v}


def check_gradient(cfg: RunConfig, p) -> dict:
    tol = 1e-4
    rows, inputs = [], []
    for inst in verify.small_instances(**cfg.env_params):
        r = verify.gradient_identity_check(inst.env, inst.grid, inst.particles, inst.v,
                                           inst.sigma, p.fd_step)
        rows.append({"instance": inst.name, **io.to_jsonable(r), "passed": r.relative_error <= tol})
        inputs.append(_instance_inputs(inst))
    null = verify.null_region_instance()
    r = verify.gradient_identity_check(null.env, null.grid, null.particles, null.v, null.sigma, p.fd_step)
    null_ok = abs(r.analytic - r.fd_slope) <= 1e-8
    rows.append({"instance": null.name, **io.to_jsonable(r), "passed": null_ok})
    inputs.append(_instance_inputs(null))
    return _report("gradient", {"fd_step": p.fd_step, "instances": inputs}, rows,
                   {"relative_error": tol, "null_region_abs": 1e-8},
                   all(row["passed"] for row in rows))


def check_hessian(cfg: RunConfig, p) -> dict:
    tol, t1_tol, pois_tol = 1e-2, 1e-10, 1e-9
    rows, inputs = [], []
    decoupled = {**cfg.env_params, "delta": 0.0}
    for tag, overrides in (("", cfg.env_params), ("/delta0", decoupled)):
        for inst in verify.small_instances(**overrides):
            r = verify.hessian_check(inst.env, inst.grid, inst.particles, inst.v, inst.sigma,
                                     h=p.hessian_step)
            ok = (r.relative_error <= tol and r.poisson_residual <= pois_tol
                  and abs(r.psi_mean) <= pois_tol)
            if tag:
                ok = ok and abs(r.t1) <= t1_tol
            rows.append({"instance": inst.name + tag, **io.to_jsonable(r), "passed": ok})
            inputs.append(_instance_inputs(inst))
    return _report("hessian", {"hessian_step": p.hessian_step, "steps": verify.RICHARDSON_STEPS,
                               "instances": inputs}, rows,
                   {"relative_error": tol, "t1_decoupled": t1_tol, "poisson": pois_tol},
                   all(row["passed"] for row in rows))


def check_contraction(cfg: RunConfig, p) -> dict:
    env = envs.make_env("scalar", **cfg.env_params)
    slack = 0.02
    r = verify.contraction_estimate(env, trials=p.contraction_trials, samples=p.contraction_samples,
                                    rng=component_rng(cfg.seed, "verify/contraction"))
    inputs = {"env_params": env.params, "trials": p.contraction_trials,
              "samples": p.contraction_samples, "seed": cfg.seed, "action": 0.0}
    values = {"kappa": r.kappa, "bound": r.bound, "skipped": r.skipped,
              "mean_ratio": float(r.ratios.mean()) if r.ratios.size else None}
    return _report("contraction", inputs, values, {"slack": slack}, r.kappa <= r.bound + slack)


def check_doeblin(cfg: RunConfig, p) -> dict:
    rows, inputs = [], []
    rng = component_rng(cfg.seed, "verify/doeblin")
    for name in ("scalar", "pendulum"):
        env = envs.make_env(name, **(cfg.env_params if name == "scalar" else {}))
        g = gridmod.make_grid(env)
        sigma = gridmod.default_sigma(env)
        parts = gridmod.init_particles(env, g, 3, rng)
        mdp = gridmod.build_kernel(env, g, parts, sigma, gamma=1.0)
        alpha = verify.doeblin_coefficient(mdp.p_pi, p.doeblin_m)
        rows.append({"kernel": f"{name}-default", "alpha": alpha,
                     "log10_alpha": float(np.log10(alpha)) if alpha > 0 else None,
                     "expected": "positive", "passed": alpha > 0})
        inputs.append({"env": name, "grid_shape": g.shape, "sigma": sigma, "n_particles": 3,
                       "particles_digest": io.digest(parts)})
    alpha = verify.doeblin_coefficient(np.eye(2), p.doeblin_m)
    rows.append({"kernel": "identity-2", "alpha": alpha, "log10_alpha": None,
                 "expected": "zero", "passed": alpha == 0.0})
    inputs.append({"kernel": "identity-2"})
    return _report("doeblin", {"m": p.doeblin_m, "seed": cfg.seed, "kernels": inputs}, rows,
                   {"alpha_positive": 0.0}, all(row["passed"] for row in rows))


def check_convexity(cfg: RunConfig, p) -> dict:
    tol = -1e-6
    env = envs.make_env("scalar", **{**cfg.env_params, "delta": 0.0})
    g = gridmod.make_grid(env, (11,))
    sigma = 0.4
    worst = verify.convexity_probe(env, g, sigma, p.convexity_trials,
                                   component_rng(cfg.seed, "verify/convexity"))
    zero = verify.convexity_probe(env, g, sigma, 3, component_rng(cfg.seed, "verify/convexity0"),
                                  zero_velocity=True)
    inputs = {"env_params": env.params, "grid_shape": g.shape, "sigma": sigma,
              "trials": p.convexity_trials, "seed": cfg.seed}
    values = {"min_second_difference": worst, "zero_velocity": zero}
    return _report("convexity", inputs, values, {"min_second_difference": tol},
                   worst >= tol and zero == 0.0)


CHECK_FUNCS = {"gradient": check_gradient, "hessian": check_hessian,
               "contraction": check_contraction, "doeblin": check_doeblin,
               "convexity": check_convexity}


def run_verify(cfg: RunConfig, out: Path) -> int:
    status = {}
    for name in cfg.checks:
        report = CHECK_FUNCS[name](cfg, cfg.params)
        io.write_json(out / f"{name}.json", report)
        status[name] = report["passed"]
        log.info("%s: %s", name, "PASS" if report["passed"] else "FAIL")
    files = [f"{n}.json" for n in cfg.checks] + ["summary.json"]
    io.write_json(out / "summary.json", _summary(cfg, files, passed=status))
    return EXIT_OK if all(status.values()) else EXIT_CHECK_FAILED


RUNNERS = {"grid": run_grid, "traj": run_traj, "wm": run_wm, "verify": run_verify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wasspo", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", metavar="PATH", help="flat YAML run configuration")
    parser.add_argument("--env", metavar="NAME", choices=sorted(envs.ENV_CLASSES))
    parser.add_argument("--seed", metavar="N", type=int)
    parser.add_argument("--out", metavar="DIR")
    parser.add_argument("--check", metavar="NAME", action="append", choices=CHECKS,
                        help="verify only; repeatable (default: all checks)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return RUNNERS[cfg.command](cfg, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"env": args.env, "seed": args.seed, "out": args.out, "checks": args.check}
    try:
        cfg = load_config(args.config, args.command, overrides)
    except ConfigError as exc:
        print(f"wasspo: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run(cfg)
    except NUMERICAL_ERRORS as exc:
        print(f"wasspo: numerical failure in {cfg.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
