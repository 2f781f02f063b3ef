"""Command-line driver for the full workflow.

Subcommands cover the pipeline end to end: ``generate`` synthetic
series, ``fit-marginal`` the tail model, ``transform`` to and from
Laplace margins, ``fit`` the conditional norming model, ``simulate``
forward blocks, ``estimate`` block functionals, ``bootstrap`` a fit or
estimate, and ``diagnose`` a fitted model.

Every command writes a manifest JSON next to its primary output
recording the resolved parameters, input file hashes, output hashes,
seed, and library version; re-running with the same inputs and seed
reproduces the outputs bitwise (everything is single-threaded and
counter-based seeded).  Exit codes: 0 success, 2 input error, 3
numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import tempfile
import time
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .errors import FitError, InputError
from .fit import (
    extract_blocks,
    fit_backward_forward,
    fit_parametric,
    fit_semiparametric,
    load_fit,
    parameter_stability_scan,
    residual_diagnostics,
    save_fit,
)
from .functionals import FunctionalSpec, empirical_functional, estimate_functional
from .generators import GeneratorSpec, generate
from .margins import (
    MarginalModel,
    RawSeries,
    fit_marginal,
    from_laplace,
    laplace_quantile,
    read_series_csv,
    threshold_stability_scan,
    to_laplace,
    write_series_csv,
)
from .norming import ARCorrAlpha, FreeAlpha, GeometricAlpha
from .resample import BootstrapScheme, resample_series
from .simulate import SimConfig, forward_simulate

__all__ = ["main"]

_SIM_CAP = 10_000


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(primary_out, command, args, inputs, outputs, t0):
    params = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": command,
        "parameters": params,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "wall_clock_s": round(time.monotonic() - t0, 3),
    }
    path = str(primary_out) + ".manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _parse_params(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise InputError(f"--param expects key=value, got {item!r}")
        key, _, val = item.partition("=")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            raise InputError(f"--param {key!r} has a non-numeric value {val!r}") from None
    return out


def _quantile_to_laplace(q, what):
    if not (0.0 < q < 1.0):
        raise InputError(f"{what} must be a probability in (0, 1), got {q}")
    return float(laplace_quantile(q))


def _structure_args(spec):
    """(structure name, order) as the fit command would have received them."""
    s = spec.structure
    if isinstance(s, GeometricAlpha):
        return "geometric", None
    if isinstance(s, FreeAlpha):
        return "free", None
    if isinstance(s, ARCorrAlpha):
        return f"ar{len(s.pacf)}", None
    return "pt", s.order


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_generate(args):
    t0 = time.monotonic()
    spec = GeneratorSpec(kind=args.kind, n=args.n, seed=args.seed,
                         params=_parse_params(args.param))
    series = generate(spec)
    write_series_csv(args.out, series)
    _write_manifest(args.out, "generate", args, [], [args.out], t0)
    print(f"wrote {args.n} values to {args.out}")


def _cmd_fit_marginal(args):
    t0 = time.monotonic()
    series = read_series_csv(args.series)
    outputs = []
    if args.scan:
        grid = [float(q) for q in args.scan.split(",")]
        table = threshold_stability_scan(series, grid, seed=args.seed)
        scan_out = args.scan_out or str(args.out) + ".scan.csv"
        table.to_csv(scan_out, index=False)
        outputs.append(scan_out)
        print(f"wrote threshold scan ({len(grid)} levels) to {scan_out}")
    model = fit_marginal(series, args.quantile, seed=args.seed)
    model.to_json(args.out)
    outputs.insert(0, args.out)
    _write_manifest(args.out, "fit-marginal", args, [args.series], outputs, t0)
    print(
        f"fitted tail above q={args.quantile}: threshold={model.threshold:.6g} "
        f"scale={model.scale:.6g} shape={model.shape:.6g}"
    )


def _cmd_transform(args):
    t0 = time.monotonic()
    model = MarginalModel.from_json(args.marginal)
    if args.inverse:
        series = read_series_csv(args.series, laplace=True)
        out_series = RawSeries(values=from_laplace(series.values, model),
                               segments=series.segments)
    else:
        series = read_series_csv(args.series)
        out_series = to_laplace(series, model)
    write_series_csv(args.out, out_series)
    _write_manifest(args.out, "transform", args, [args.series, args.marginal],
                    [args.out], t0)
    direction = "from" if args.inverse else "to"
    print(f"transformed {series.values.size} values {direction} Laplace margins -> {args.out}")


def _fit_from_args(args, series):
    u = _quantile_to_laplace(args.u_quantile, "--u-quantile")
    direction = args.direction
    blocks = extract_blocks(series, u, args.k, direction=direction)
    model = f"model{args.model}"
    if args.parametric:
        if direction == "both":
            raise InputError("--parametric fits are forward-only (the copula mirrors both sides)")
        return fit_parametric(
            blocks, model=model, structure=args.structure, order=args.order,
            seed=args.seed, restarts=args.restarts,
        )
    if direction == "both":
        return fit_backward_forward(
            blocks, model=model, structure=args.structure, order=args.order,
            working_margin=args.working_margin, seed=args.seed,
            restarts=args.restarts,
        )
    return fit_semiparametric(
        blocks, model=model, structure=args.structure, order=args.order,
        working_margin=args.working_margin, seed=args.seed,
        restarts=args.restarts,
    )


def _cmd_fit(args):
    t0 = time.monotonic()
    series = read_series_csv(args.series, laplace=True)
    fit = _fit_from_args(args, series)
    fit = dataclasses.replace(fit, marginal_ref=_sha256(args.marginal))
    save_fit(fit, args.out)
    outputs = [args.out]
    if args.residuals:
        store = getattr(fit, "residual_forward", None)
        if store is None:
            store = getattr(fit, "residual_store", None)
        if store is None:
            raise InputError("parametric fits keep no residual store to dump")
        df = pd.DataFrame(store, columns=[f"z{i + 1}" for i in range(store.shape[1])])
        df.insert(0, "x0", fit.x0)
        df.to_csv(args.residuals, index=False)
        outputs.append(args.residuals)
    _write_manifest(args.out, "fit", args, [args.series, args.marginal], outputs, t0)
    spec = fit.spec.forward if hasattr(fit.spec, "forward") else fit.spec
    nll = fit.nll if hasattr(fit, "nll") else fit.nll_stage1
    print(
        f"fitted {type(fit).__name__} on {fit.n_blocks} blocks above u={fit.u:.6g}: "
        f"alpha1={float(spec.alphas()[0]):.4f} beta={spec.beta:.4f} nll={nll:.4f}"
    )
    if not fit.converged:
        print("warning: optimizer did not report convergence", file=sys.stderr)


def _cmd_simulate(args):
    t0 = time.monotonic()
    fit = load_fit(args.model)
    v = _quantile_to_laplace(args.v_quantile, "--v-quantile")
    config = SimConfig(n=args.n, d=args.d, v=v, seed=args.seed,
                       residual_source=args.residual_source)
    blocks = forward_simulate(fit, config)
    rows = blocks if args.dump else blocks[:_SIM_CAP]
    df = pd.DataFrame(rows, columns=[f"x{i + 1}" for i in range(args.d)])
    df.to_csv(args.out, index=False)
    _write_manifest(args.out, "simulate", args, [args.model], [args.out], t0)
    kept = "all" if args.dump else f"first {min(args.n, _SIM_CAP)} of"
    print(f"simulated {args.n} blocks (d={args.d}, v={v:.6g}); wrote {kept} {args.n} to {args.out}")


def _functional_from_args(args):
    v = _quantile_to_laplace(args.v_quantile, "--v-quantile")
    s = args.s
    if args.s_quantile is not None:
        if s is not None:
            raise InputError("give either --s or --s-quantile, not both")
        s = _quantile_to_laplace(args.s_quantile, "--s-quantile")
    return FunctionalSpec(kind=args.functional, v=v, d=args.d, r=args.r,
                          s=s, scale=args.scale)


def _cmd_estimate(args):
    t0 = time.monotonic()
    spec = _functional_from_args(args)
    method = args.method
    if method is None:
        method = "aloe" if spec.kind == "pstar" else "forward"
    if spec.kind == "pstar" and method == "forward":
        raise InputError("pstar conditions on an exceedance anywhere; use --method aloe")
    if spec.kind != "pstar" and method == "aloe":
        raise InputError(f"--method aloe only applies to pstar, not {spec.kind}")
    marginal = MarginalModel.from_json(args.marginal) if args.marginal else None
    inputs = [args.marginal] if args.marginal else []
    if method == "empirical":
        if not args.series:
            raise InputError("--method empirical needs --series with the Laplace-scale data")
        series = read_series_csv(args.series, laplace=True)
        inputs.append(args.series)
        scheme = BootstrapScheme(kind=args.scheme, block_length=args.block_length)
        report = empirical_functional(series, spec, marginal=marginal, scheme=scheme,
                                      replications=args.replications, seed=args.seed)
    else:
        if not args.model:
            raise InputError(f"--method {method} needs a fitted model JSON")
        fit = load_fit(args.model)
        inputs.insert(0, args.model)
        if args.marginal and fit.marginal_ref is not None:
            if _sha256(args.marginal) != fit.marginal_ref:
                raise InputError(
                    f"marginal file {args.marginal} does not match the one the model "
                    "was fitted with (hash mismatch)"
                )
        config = SimConfig(n=args.n, d=spec.d, v=spec.v, seed=args.seed,
                           residual_source=args.residual_source)
        report = estimate_functional(fit, spec, config, marginal=marginal)
    row = {
        "kind": spec.kind,
        "params": spec.label(),
        "estimate": report.estimate,
        "stderr": report.std_error,
        "ci_low": report.ci_low,
        "ci_high": report.ci_high,
        "n": report.n,
        "seed": args.seed,
        "method": method,
    }
    pd.DataFrame([row]).to_csv(args.out, index=False)
    _write_manifest(args.out, "estimate", args, inputs, [args.out], t0)
    print(f"{spec.label()} [{method}]: {report.estimate:.6g} (se {report.std_error:.3g})")


def _fit_scalars(fit):
    spec = fit.spec.forward if hasattr(fit.spec, "forward") else fit.spec
    alphas = spec.alphas()
    out = {"beta": float(spec.beta), "alpha1": float(alphas[0])}
    if alphas.size > 1:
        out["alpha2"] = float(alphas[1])
    if hasattr(fit, "rho"):
        out["rho"] = float(fit.rho)
    return out


def _cmd_bootstrap(args):
    t0 = time.monotonic()
    sub_argv = list(args.sub or [])
    if not sub_argv or sub_argv[0] not in ("fit", "estimate"):
        raise InputError(
            "bootstrap needs a trailing fit or estimate command after `--`, e.g. "
            "`bootstrap in.csv --replications 50 -- fit in.csv marginal.json --k 5 --out m.json`"
        )
    if args.series not in sub_argv:
        raise InputError(f"the sub-command must reference the bootstrap input {args.series}")
    parser = _build_parser()
    series = read_series_csv(args.series, laplace=True)
    scheme = BootstrapScheme(kind=args.scheme, block_length=args.block_length)

    def run_sub(csv_path, out_path):
        argv = [csv_path if tok == args.series else tok for tok in sub_argv]
        sub = parser.parse_args(argv)
        sub.out = out_path
        if getattr(sub, "residuals", None):
            sub.residuals = None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sub.func(sub)
        if sub_argv[0] == "fit":
            return _fit_scalars(load_fit(out_path))
        table = pd.read_csv(out_path)
        return {"estimate": float(table["estimate"].iloc[0])}

    rows = []
    n_failed = 0
    with tempfile.TemporaryDirectory() as tmp:
        base = run_sub(args.series, str(Path(tmp) / "base.out"))
        for r in range(args.replications):
            child = args.seed * 1_000_003 + r + 1
            rep = resample_series(series, scheme, seed=child)
            rep_csv = str(Path(tmp) / "rep.csv")
            write_series_csv(rep_csv, rep)
            try:
                rows.append(run_sub(rep_csv, str(Path(tmp) / "rep.out")))
            except (InputError, FitError, FloatingPointError, np.linalg.LinAlgError):
                n_failed += 1
    if n_failed > 0.2 * args.replications:
        raise FitError(f"{n_failed}/{args.replications} bootstrap replicates failed")
    table = pd.DataFrame(rows)
    rep_out = args.out_prefix + ".replicates.csv"
    table.to_csv(rep_out, index=False)
    z = 1.959963984540054
    summary = {"command": sub_argv[0], "replications": args.replications,
               "n_failed": n_failed, "seed": args.seed, "point": base, "columns": {}}
    for col in table.columns:
        vals = table[col].to_numpy(dtype=float)
        se = float(np.std(vals, ddof=1))
        point = base.get(col)
        center = float(np.mean(vals)) if point is None else float(point)
        summary["columns"][col] = {
            "point": point,
            "mean": float(np.mean(vals)),
            "std_error": se,
            "ci_low": center - z * se,
            "ci_high": center + z * se,
        }
    sum_out = args.out_prefix + ".summary.json"
    with open(sum_out, "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    _write_manifest(sum_out, "bootstrap", args, [args.series], [rep_out, sum_out], t0)
    cols = ", ".join(
        f"{c}={v['point'] if v['point'] is not None else v['mean']:.4f} (se {v['std_error']:.4f})"
        for c, v in summary["columns"].items()
    )
    print(f"bootstrap [{sub_argv[0]}] {args.replications - n_failed}/{args.replications} ok: {cols}")


def _cmd_diagnose(args):
    t0 = time.monotonic()
    fit = load_fit(args.model)
    series = read_series_csv(args.series, laplace=True)
    tau, qq = residual_diagnostics(fit)
    tau_out = args.out_prefix + ".tau.csv"
    qq_out = args.out_prefix + ".qq.csv"
    tau.to_csv(tau_out, index=False)
    qq.to_csv(qq_out, index=False)
    outputs = [tau_out, qq_out]
    if args.scan:
        grid = [float(q) for q in args.scan.split(",")]
        spec = fit.spec.forward if hasattr(fit.spec, "forward") else fit.spec
        structure, order = _structure_args(spec)
        table = parameter_stability_scan(
            series, grid, fit.k, model=spec.model, structure=structure,
            order=order, working_margin=getattr(fit, "working_margin", "dlaplace"),
            seed=args.seed,
        )
        scan_out = args.out_prefix + ".stability.csv"
        table.to_csv(scan_out, index=False)
        outputs.append(scan_out)
    _write_manifest(outputs[0], "diagnose", args, [args.model, args.series], outputs, t0)
    flagged = int(tau["dependent_at_5pct"].sum()) if len(tau) else 0
    print(f"diagnostics over {len(tau)} lags: {flagged} flagged for residual dependence")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_seed(p, default=0):
    p.add_argument("--seed", type=int, default=default, help="random seed (default %(default)s)")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="tailchain",
        description="Tail dependence modelling for stationary time series",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic series")
    p.add_argument("--kind", required=True,
                   choices=["gauss_ar1", "gauss_ar2", "inv_logistic"])
    p.add_argument("--n", type=int, required=True, help="series length")
    p.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="generator parameter, e.g. rho=0.7 (repeatable)")
    _add_seed(p)
    p.add_argument("--out", required=True, help="output series CSV")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("fit-marginal", help="fit the semi-parametric marginal model")
    p.add_argument("series", help="input series CSV")
    p.add_argument("--quantile", type=float, default=0.95,
                   help="threshold quantile for the tail fit (default %(default)s)")
    p.add_argument("--scan", help="comma-separated quantiles for a stability scan")
    p.add_argument("--scan-out", help="scan table path (default <out>.scan.csv)")
    _add_seed(p)
    p.add_argument("--out", required=True, help="output marginal JSON")
    p.set_defaults(func=_cmd_fit_marginal)

    p = sub.add_parser("transform", help="map a series to or from Laplace margins")
    p.add_argument("series", help="input series CSV")
    p.add_argument("marginal", help="fitted marginal JSON")
    p.add_argument("--inverse", action="store_true",
                   help="map Laplace values back to the data scale")
    p.add_argument("--out", required=True, help="output series CSV")
    p.set_defaults(func=_cmd_transform)

    p = sub.add_parser("fit", help="fit the conditional tail model")
    p.add_argument("series", help="Laplace-scale series CSV (from transform)")
    p.add_argument("marginal", help="marginal JSON used for the transform (provenance)")
    p.add_argument("--u-quantile", type=float, default=0.95,
                   help="fitting threshold quantile (default %(default)s)")
    p.add_argument("--k", type=int, required=True, help="number of lags")
    p.add_argument("--model", choices=["1", "2"], default="1",
                   help="scale norming: 1 = x**beta, 2 = 1 + (alpha x)**beta")
    p.add_argument("--structure", default="geometric",
                   choices=["free", "geometric", "ar2", "ar3", "pt"],
                   help="lag-coefficient structure (default %(default)s)")
    p.add_argument("--order", type=int, help="recurrence order for --structure pt")
    p.add_argument("--working-margin", default="dlaplace",
                   choices=["dlaplace", "gaussian"])
    p.add_argument("--parametric", action="store_true",
                   help="two-stage parametric fit (residual curves + copula)")
    p.add_argument("--direction", choices=["forward", "both"], default="forward")
    p.add_argument("--restarts", type=int, default=3)
    _add_seed(p)
    p.add_argument("--out", required=True, help="output model JSON")
    p.add_argument("--residuals", help="optional residual-store CSV dump")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("simulate", help="simulate forward blocks from a fitted model")
    p.add_argument("model", help="model JSON from fit")
    p.add_argument("--v-quantile", type=float, required=True,
                   help="conditioning threshold quantile")
    p.add_argument("--d", type=int, required=True, help="block length")
    p.add_argument("--n", type=int, required=True, help="number of blocks")
    p.add_argument("--residual-source", default="empirical_joint",
                   choices=["empirical_joint", "parametric"])
    p.add_argument("--dump", action="store_true",
                   help=f"write every block (default: first {_SIM_CAP})")
    _add_seed(p)
    p.add_argument("--out", required=True, help="output samples CSV")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("estimate", help="estimate a block functional")
    p.add_argument("model", nargs="?",
                   help="model JSON (not needed for --method empirical)")
    p.add_argument("--functional", required=True,
                   choices=["theta", "chi", "e1", "e2", "e3", "p", "pstar",
                            "max_exceed", "total_exceed", "consec_exceed"])
    p.add_argument("--v-quantile", type=float, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--r", type=int, help="exceedance count for p / pstar")
    p.add_argument("--s", type=float, help="level or run length for *_exceed kinds")
    p.add_argument("--s-quantile", type=float,
                   help="give the max_exceed level as a Laplace quantile instead")
    p.add_argument("--scale", choices=["laplace", "data"], default="laplace")
    p.add_argument("--marginal", help="marginal JSON (needed for --scale data)")
    p.add_argument("--method", choices=["forward", "aloe", "empirical"])
    p.add_argument("--n", type=int, default=100_000, help="Monte Carlo sample count")
    p.add_argument("--residual-source", default="empirical_joint",
                   choices=["empirical_joint", "parametric"])
    p.add_argument("--series", help="Laplace-scale series CSV for --method empirical")
    p.add_argument("--replications", type=int, default=200,
                   help="bootstrap replications for --method empirical")
    p.add_argument("--block-length", type=int, default=20)
    p.add_argument("--scheme", default="moving_block",
                   choices=["block", "moving_block", "stationary"])
    _add_seed(p)
    p.add_argument("--out", required=True, help="output results CSV")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("bootstrap",
                       help="block-bootstrap a fit or estimate sub-command")
    p.add_argument("series", help="Laplace-scale series CSV to resample")
    p.add_argument("--replications", type=int, default=100)
    p.add_argument("--block-length", type=int, default=20)
    p.add_argument("--scheme", default="moving_block",
                   choices=["block", "moving_block", "stationary"])
    _add_seed(p)
    p.add_argument("--out-prefix", default="bootstrap",
                   help="prefix for replicates CSV and summary JSON")
    p.set_defaults(func=_cmd_bootstrap, sub=[])

    p = sub.add_parser("diagnose", help="residual and stability diagnostics")
    p.add_argument("model", help="model JSON from fit")
    p.add_argument("series", help="Laplace-scale series CSV the model was fitted on")
    p.add_argument("--scan", help="comma-separated quantiles for a parameter stability scan")
    _add_seed(p)
    p.add_argument("--out-prefix", default="diagnose")
    p.set_defaults(func=_cmd_diagnose)

    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    sub_argv = None
    if "--" in argv:
        split = argv.index("--")
        argv, sub_argv = argv[:split], argv[split + 1:]
    parser = _build_parser()
    args = parser.parse_args(argv)
    if sub_argv is not None:
        if args.command != "bootstrap":
            print("error: a trailing `-- ...` command only applies to bootstrap",
                  file=sys.stderr)
            return 2
        args.sub = sub_argv
    try:
        args.func(args)
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FitError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
