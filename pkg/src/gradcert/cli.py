"""Command-line entry point: certify / sweep / simulate / gain / train / report.

Exit codes: 0 success, 2 validation or configuration error, 3 a feasibility
problem ended in the numerical-failure verdict.  Errors are emitted as a JSON
payload on stderr.  All paths are resolved relative to --workdir, outputs
carry the config hash, and fixed seeds make every subcommand reproducible.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import benchmarks
from .certifier import (
    CertificationSetup,
    bisect_gamma,
    sweep_margin,
    worker_count,
)
from .errors import CertificationError, ValidationError
from .gradient_bounds import GradientBoundSet, bounds_from_config
from .iqc_blocks import slope_restricted_stack
from .learner import TrainConfig, default_policy, train
from .policy import (
    lipschitz_upper,
    load_pattern,
    load_policy,
    save_pattern,
    save_policy,
)
from .report import (
    ExperimentBundle,
    build_report,
    write_history_csv,
    write_margin_csv,
    write_trajectory_csv,
)
from .simulator import empirical_l2_gain, exploration_signal, integrate
from .system_model import load_plant

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def _resolve(workdir: Path, name: str | None) -> Path | None:
    if name is None:
        return None
    p = Path(name)
    return p if p.is_absolute() else workdir / p


def _load_setup(args, workdir, bundle):
    """Certification setup from either a preset or a plant config file."""
    if getattr(args, "preset", None):
        bench = benchmarks.preset(args.preset)
        if getattr(args, "pattern", None):
            # monitored sign pattern; masked ("0") entries are already
            # structurally masked by the benchmark's observation mask
            path = _resolve(workdir, args.pattern)
            bundle.add_input(path)
            signs, eps, _ = load_pattern(path)
            return bench.certification_setup(sign_pattern=np.nan_to_num(signs, nan=0.0),
                                             eps_margin=eps), bench
        return bench.certification_setup(), bench
    path = _resolve(workdir, args.plant)
    bundle.add_input(path)
    plant, blocks = load_plant(path)
    block = slope_restricted_stack(blocks, plant.n_s) if blocks else None
    return CertificationSetup(plant=plant, block=block), None


def cmd_certify(args) -> int:
    workdir = Path(args.workdir)
    bundle = ExperimentBundle("certify", vars(args).copy())
    setup, _ = _load_setup(args, workdir, bundle)
    bounds_path = _resolve(workdir, args.bounds)
    bundle.add_input(bounds_path)
    with open(bounds_path) as fh:
        bounds = bounds_from_config(json.load(fh), setup.plant.n_a, setup.plant.n_s)
    cert = bisect_gamma(setup.assembler(bounds), (1.0, args.gamma_max), tol=args.tol)
    out = _resolve(workdir, args.out)
    payload = cert.to_dict()
    payload["config_hash"] = bundle.config_hash
    out.write_text(json.dumps(payload, indent=1))
    bundle.outputs.append(out)
    bundle.finish(workdir)
    print(json.dumps({k: payload[k] for k in ("feasible", "status", "gamma")}))
    if cert.status == "numerical_failure":
        return EXIT_NUMERICAL
    return EXIT_OK


def _parse_grid(spec: str):
    parts = spec.split(":")
    if len(parts) == 3:
        start, step, stop = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ValidationError("bad grid range")
        n = int(round((stop - start) / step)) + 1
        return [start + k * step for k in range(n)]
    return [float(p) for p in spec.split(",")]


def cmd_sweep(args) -> int:
    workdir = Path(args.workdir)
    bundle = ExperimentBundle("sweep", vars(args).copy())
    setup, _ = _load_setup(args, workdir, bundle)
    grid = _parse_grid(args.grid)
    curve = sweep_margin(setup, args.mode, grid, gamma_hi=args.gamma_max,
                         gamma_tol=None if args.no_gamma_bisect else args.tol,
                         threads=worker_count())
    out = _resolve(workdir, args.out or f"sweep_{curve.constraint_mode}.csv")
    write_margin_csv(out, curve, config_hash=bundle.config_hash)
    bundle.outputs.append(out)
    bundle.finish(workdir)
    print(json.dumps({"mode": curve.constraint_mode,
                      "max_certified": curve.max_certified(),
                      "monotone": curve.monotone(), "out": str(out)}))
    return EXIT_OK


def cmd_simulate(args) -> int:
    workdir = Path(args.workdir)
    bundle = ExperimentBundle("simulate", vars(args).copy(), seed=args.seed)
    bench = benchmarks.preset(args.preset)
    controller = None
    if args.controller:
        path = _resolve(workdir, args.controller)
        bundle.add_input(path)
        controller = load_policy(path)
    plant = bench.certified_plant()
    rng = np.random.default_rng(args.seed)
    n_steps = int(round(args.T / args.h))
    e = exploration_signal(n_steps, plant.n_a, rng, std=args.explore_std, h=args.h)
    x0 = args.x0_std * rng.normal(size=plant.n_s)
    traj = integrate(plant, bench.blocks, controller, e=e, x0=x0,
                     horizon=args.T, h=args.h, cost=(bench.Q, bench.R))
    out = _resolve(workdir, args.out)
    write_trajectory_csv(out, traj, config_hash=bundle.config_hash)
    bundle.outputs.append(out)
    bundle.finish(workdir)
    print(json.dumps({"steps": len(traj), "diverged": traj.diverged,
                      "cost": traj.total_cost(), "out": str(out)}))
    return EXIT_OK


def cmd_gain(args) -> int:
    workdir = Path(args.workdir)
    bundle = ExperimentBundle("gain", vars(args).copy(), seed=args.seed)
    bench = benchmarks.preset(args.preset)
    plant = bench.certified_plant()
    controller = None
    level = 0.0
    if args.controller:
        path = _resolve(workdir, args.controller)
        bundle.add_input(path)
        controller = load_policy(path)
        level = lipschitz_upper(controller)
    rng = np.random.default_rng(args.seed)
    n_steps = int(round(args.T / args.h))
    excitations = [exploration_signal(n_steps, plant.n_a, rng, std=0.2,
                                      cutoff_hz=float(c), h=args.h)
                   for c in np.geomspace(0.1, 5.0, args.n_excitations)]
    empirical = empirical_l2_gain(plant, bench.blocks, controller, excitations,
                                  horizon=args.T, h=args.h)
    setup = bench.certification_setup()
    bounds = GradientBoundSet.uniform(level, plant.n_a, plant.n_s)
    cert = bisect_gamma(setup.assembler(bounds), (1.0, args.gamma_max), tol=args.tol)
    payload = {"empirical_gain": empirical,
               "certified_gamma": cert.gamma if cert.feasible else None,
               "certificate_status": cert.status,
               "controller_lipschitz": level,
               "config_hash": bundle.config_hash}
    out = _resolve(workdir, args.out)
    out.write_text(json.dumps(payload, indent=1))
    bundle.outputs.append(out)
    bundle.finish(workdir)
    print(json.dumps(payload))
    if cert.status == "numerical_failure":
        return EXIT_NUMERICAL
    return EXIT_OK


_TRAIN_MODES = {"none": "none", "sp": "soft_penalty", "soft_penalty": "soft_penalty",
                "ht": "hard_threshold", "hard_threshold": "hard_threshold"}


def cmd_train(args) -> int:
    workdir = Path(args.workdir)
    bundle = ExperimentBundle("train", vars(args).copy(), seed=args.seed)
    bench = benchmarks.preset(args.preset)
    if args.mode not in _TRAIN_MODES:
        raise ValidationError(f"unknown regulation mode {args.mode!r}")
    cfg = TrainConfig(iters=args.iters, mode=_TRAIN_MODES[args.mode],
                      l_cert=args.lcert, seed=args.seed,
                      horizon_steps=args.horizon_steps, substeps=args.substeps,
                      h=args.h, n_rollouts=args.n_rollouts,
                      reward_scale=args.reward_scale,
                      checkpoint_every=args.checkpoint_every)
    net = default_policy(bench, hidden=args.hidden,
                         rng=np.random.default_rng(args.seed))
    result = train(bench, net, cfg)
    out = _resolve(workdir, args.out or f"train_{bench.name}_{args.mode}.csv")
    write_history_csv(out, result.history, config_hash=bundle.config_hash)
    bundle.outputs.append(out)
    for it, net_cfg in result.checkpoints.items():
        ck = workdir / f"policy_{bench.name}_{args.mode}_iter{it:05d}.json"
        ck.write_text(json.dumps(net_cfg, indent=1))
        bundle.outputs.append(ck)
    pattern_path = workdir / f"pattern_{bench.name}.json"
    save_pattern(result.monitor, pattern_path, eps=0.1, l=args.lcert)
    bundle.outputs.append(pattern_path)
    save_policy(result.net, workdir / f"policy_{bench.name}_{args.mode}_final.json")
    bundle.outputs.append(workdir / f"policy_{bench.name}_{args.mode}_final.json")
    bundle.finish(workdir)
    final_lip = lipschitz_upper(result.net)
    print(json.dumps({"iters": len(result.history), "final_lipschitz": final_lip,
                      "out": str(out)}))
    return EXIT_OK


def cmd_report(args) -> int:
    summary = build_report(Path(args.workdir), figures=not args.no_figures)
    print(json.dumps(summary))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gradcert",
                                 description="L2-gain certification for gradient-bounded controllers")
    ap.add_argument("--workdir", default=".", help="base directory for inputs/outputs")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("certify", help="bisect the certified gain for one bound box")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--plant", help="plant config JSON")
    src.add_argument("--preset", help="named benchmark preset")
    p.add_argument("--bounds", required=True, help="bounds config JSON")
    p.add_argument("--gamma-max", type=float, default=1e4, dest="gamma_max")
    p.add_argument("--tol", type=float, default=0.05)
    p.add_argument("--out", default="certificate.json")
    p.add_argument("--pattern", help="sign-pattern JSON from the gradient monitor")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("sweep", help="margin curve over a grid of bound levels")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--plant")
    src.add_argument("--preset")
    p.add_argument("--mode", required=True,
                   choices=["l2", "l2_only", "sparsity", "nonhom", "nonhomogeneous"])
    p.add_argument("--grid", default="0.1:0.1:3.0", help="start:step:stop or comma list")
    p.add_argument("--gamma-max", type=float, default=1e4, dest="gamma_max")
    p.add_argument("--tol", type=float, default=0.05)
    p.add_argument("--no-gamma-bisect", action="store_true",
                   help="record feasibility at gamma-max only (faster)")
    p.add_argument("--pattern", help="sign-pattern JSON for the nonhomogeneous mode")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate", help="roll out a controller on a preset")
    p.add_argument("--preset", required=True)
    p.add_argument("--controller", help="policy JSON (omit for nominal loop only)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--T", type=float, default=20.0)
    p.add_argument("--x0-std", type=float, default=0.1, dest="x0_std")
    p.add_argument("--explore-std", type=float, default=0.05, dest="explore_std")
    p.add_argument("--out", default="trajectory.csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gain", help="empirical gain estimate vs certified gamma")
    p.add_argument("--preset", required=True)
    p.add_argument("--controller")
    p.add_argument("--n-excitations", type=int, default=10, dest="n_excitations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--T", type=float, default=10.0)
    p.add_argument("--gamma-max", type=float, default=1e4, dest="gamma_max")
    p.add_argument("--tol", type=float, default=0.05)
    p.add_argument("--out", default="gain.json")
    p.set_defaults(func=cmd_gain)

    p = sub.add_parser("train", help="regulated policy-gradient training")
    p.add_argument("--preset", required=True)
    p.add_argument("--mode", default="ht")
    p.add_argument("--lcert", type=float, default=1.0)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--horizon-steps", type=int, default=2000, dest="horizon_steps")
    p.add_argument("--substeps", type=int, default=10)
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--n-rollouts", type=int, default=4, dest="n_rollouts")
    p.add_argument("--reward-scale", type=float, default=1.0, dest="reward_scale")
    p.add_argument("--checkpoint-every", type=int, default=50, dest="checkpoint_every")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="aggregate sweeps/training into CSV + figures")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        return args.func(args)
    except (ValidationError, CertificationError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_VALIDATION)
    except FileNotFoundError as exc:
        return _fail("FileNotFound", str(exc), EXIT_VALIDATION)
    except json.JSONDecodeError as exc:
        return _fail("BadJson", str(exc), EXIT_VALIDATION)


if __name__ == "__main__":
    sys.exit(main())
