"""Command-line front end: check, fit, simulate, and loglik commands.

Exit codes: 0 on success (for ``fit``: converged), 2 when the fit ran but
did not converge, 1 on any model or data error.
"""

import argparse
import json
import os
import sys

import numpy as np

from .driver import EMConfig, em_fit, kemcheck, mc_init_search
from .errors import FilterInconsistencyError, FitError, ModelSpecError
from .expectations import compute_expectations
from .model import PARAM_NAMES, materialize_params, simulate, validate_spec
from .specfile import (
    format_float,
    free_params_from_values,
    has_complete_values,
    load_spec,
    read_data_csv,
    write_data_csv,
    write_matrix_csv,
)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="marssfit",
        description="Fit constrained multivariate autoregressive state-space "
                    "models by EM")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, need_data, need_out in (("fit", True, True),
                                      ("simulate", False, True),
                                      ("check", False, False),
                                      ("loglik", True, False)):
        p = sub.add_parser(name)
        p.add_argument("--spec", required=True, help="model spec YAML file")
        p.add_argument("--data", required=need_data,
                       help="observations CSV (one row per series, NA = missing)")
        p.add_argument("--out", required=need_out, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--quiet", action="store_true")
        if name == "fit":
            p.add_argument("--max-iter", type=int, default=500)
            p.add_argument("--abstol", type=float, default=1e-8)
            p.add_argument("--safe", action="store_true")
            p.add_argument("--mc-inits", type=int, default=1)
        if name == "simulate":
            p.add_argument("--missing-frac", type=float, default=0.0)
    return parser


def _say(args, message):
    if not args.quiet:
        print(message)


def _write_params(out_dir, spec, params):
    mats = materialize_params(spec, params, check_psd=False)
    per_param = {"B": mats.B(1), "U": mats.u(1).reshape(-1, 1), "Q": mats.Q(1),
                 "Z": mats.Z(1), "A": mats.a(1).reshape(-1, 1), "R": mats.R(1),
                 "Xi": mats.xi.reshape(-1, 1), "Lambda": mats.Lam}
    for name, M in per_param.items():
        if M.size:
            write_matrix_csv(os.path.join(out_dir, f"{name}.csv"), M)
    with open(os.path.join(out_dir, "free_values.csv"), "w") as fh:
        fh.write("parameter,name,value\n")
        for name in PARAM_NAMES:
            design = spec.design(name)
            vec_ = params.by_name(name)
            for free_name, value in zip(design.free_names, vec_):
                fh.write(f"{name},{free_name},{format_float(value)}\n")


def run_check(args):
    try:
        data = read_data_csv(args.data) if args.data else None
        spec, values = load_spec(args.spec, T=data.T if data is not None else None)
        params = None
        if has_complete_values(spec, values):
            params = free_params_from_values(spec, values)
        problems = validate_spec(spec)
        problems += kemcheck(spec, params, data)
    except (ModelSpecError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for v in problems:
        print(str(v))
    if not problems:
        _say(args, "model checks passed")
    return 0 if not problems else 1


def run_fit(args):
    try:
        data = read_data_csv(args.data)
        spec, values = load_spec(args.spec, T=data.T)
        if data.n != spec.n:
            raise ModelSpecError(f"data have {data.n} series, model expects {spec.n}")
        config = EMConfig(max_iterations=args.max_iter, abstol=args.abstol,
                          safe_mode=args.safe, mc_inits=args.mc_inits,
                          mc_seed=args.seed)
        if has_complete_values(spec, values):
            init = free_params_from_values(spec, values)
        else:
            _say(args, f"drawing {config.mc_inits} random initialization(s)")
            init = mc_init_search(spec, data, config)
        result = em_fit(spec, init, data, config)
    except (ModelSpecError, FitError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    _write_params(args.out, result.spec, result.params)
    with open(os.path.join(args.out, "loglik_trace.csv"), "w") as fh:
        fh.write("iteration,loglik\n")
        for k, ll in enumerate(result.loglik_trace, start=1):
            fh.write(f"{k},{format_float(ll)}\n")
    summary = {
        "command": "fit",
        "converged": bool(result.converged),
        "iterations": int(result.iterations_used),
        "final_loglik": float(result.loglik_trace[-1]),
        "warnings": list(result.warnings),
        "seed": args.seed,
        "n": result.spec.n,
        "m": result.spec.m,
        "T": result.spec.T,
    }
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _say(args, f"loglik {format_float(result.loglik_trace[-1])} after "
               f"{result.iterations_used} iterations"
               + ("" if result.converged else " (not converged)"))
    for w in result.warnings:
        _say(args, f"warning: {w}")
    return 0 if result.converged else 2


def run_simulate(args):
    try:
        spec, values = load_spec(args.spec)
        params = free_params_from_values(spec, values)
        states, obs = simulate(spec, params, seed=args.seed)
    except (ModelSpecError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    observed = None
    if args.missing_frac > 0:
        rng = np.random.default_rng(args.seed + 1)
        observed = rng.uniform(size=obs.shape) >= args.missing_frac
    os.makedirs(args.out, exist_ok=True)
    write_data_csv(os.path.join(args.out, "states.csv"), states)
    write_data_csv(os.path.join(args.out, "observations.csv"), obs, observed)
    _say(args, f"wrote {spec.n}x{spec.T} observations to {args.out}")
    return 0


def run_loglik(args):
    try:
        data = read_data_csv(args.data)
        spec, values = load_spec(args.spec, T=data.T)
        params = free_params_from_values(spec, values)
        mats = materialize_params(spec, params)
        _, filt = compute_expectations(spec, mats, data)
    except (ModelSpecError, FilterInconsistencyError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(format_float(filt.marginal_loglik))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "loglik.json"), "w") as fh:
            json.dump({"loglik": float(filt.marginal_loglik)}, fh, sort_keys=True)
            fh.write("\n")
    return 0


def main(argv=None):
    args = _build_parser().parse_args(argv)
    runner = {"fit": run_fit, "simulate": run_simulate,
              "check": run_check, "loglik": run_loglik}[args.command]
    return runner(args)


if __name__ == "__main__":
    sys.exit(main())
