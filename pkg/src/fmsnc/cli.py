"""Command-line interface: ``fmsnc fit | simulate | impute | study``.

Exit codes: 0 success, 1 usage or parse error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys

import numpy as np

from . import analysis, io
from .censored import EMConfig
from .errors import FmsncError, NumericalError
from .mixture import MixtureModel, fit_fm_msnc

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
CRITERIA = ("AIC", "BIC", "EDC")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _add_fit_flags(p):
    p.add_argument("--family", choices=("skew", "normal"), default="skew",
                   help="component family (default: skew)")
    p.add_argument("--shared-gamma", action="store_true", help="equal Gamma across components")
    p.add_argument("--tol", type=_positive_float, default=1e-6,
                   help="relative log-likelihood change for convergence (default: 1e-6)")
    p.add_argument("--max-iter", type=_positive_int, default=500, help="default: 500")
    p.add_argument("--starts", type=_positive_int, default=1, help="k-means starts (default: 1)")
    p.add_argument("--seed", type=int, default=0, help="initialization seed (default: 0)")
    p.add_argument("--no-screen", action="store_true",
                   help="skip the skewness sign screening of the k-means start")


def _config(args, compute_se) -> EMConfig:
    return EMConfig(tol=args.tol, max_iter=args.max_iter, family=args.family,
                    shared_gamma=args.shared_gamma, n_starts=args.starts, seed=args.seed,
                    compute_se=compute_se, screen_signs=not args.no_screen)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fmsnc", description="Finite mixtures of multivariate skew-normal "
                     "distributions for censored and missing data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit mixtures over a range of G")
    p.add_argument("data", help="dataset CSV")
    p.add_argument("--g", type=_positive_int, default=1, help="number of components, or the "
                   "start of the range when --g-max is given (default: 1)")
    p.add_argument("--g-max", type=_positive_int, help="fit every G from --g to --g-max")
    p.add_argument("--no-se", action="store_true", help="skip standard errors")
    p.add_argument("--out", help="JSON report path (default: stdout)")
    _add_fit_flags(p)

    p = sub.add_parser("simulate", help="draw a dataset from a design")
    p.add_argument("design", help="design JSON")
    p.add_argument("--out", required=True, help="dataset CSV to write")
    p.add_argument("--truth", help="JSON with labels, complete values and parameters")
    p.add_argument("--seed", type=int, help="override the design seed")

    p = sub.add_parser("impute", help="fill censored and missing cells from a fitted report")
    p.add_argument("data", help="dataset CSV")
    p.add_argument("report", help="report JSON written by 'fmsnc fit'")
    p.add_argument("--g", type=_positive_int, help="use this G (default: best by --criterion)")
    p.add_argument("--criterion", choices=CRITERIA, default="BIC")
    p.add_argument("--truth", help="truth JSON from 'fmsnc simulate' to report MAE")
    p.add_argument("--out", help="completed CSV (default: stdout)")

    p = sub.add_parser("study", help="Monte Carlo study of a design")
    p.add_argument("design", help="design JSON")
    p.add_argument("--replicates", type=_positive_int, required=True)
    p.add_argument("--sizes", help="comma-separated sample sizes for a bias/mse series")
    p.add_argument("--no-se", action="store_true", help="skip standard errors")
    p.add_argument("--out", help="JSON report path (default: stdout)")
    _add_fit_flags(p)
    return parser


def _fit_entry(fit, family):
    entry = {
        "G": fit.model.G, "family": family, "model": fit.model.to_dict(),
        "loglik": fit.loglik, "loglik_trace": fit.loglik_trace, "n_params": fit.n_params,
        "criteria": fit.criteria, "converged": fit.converged, "iterations": fit.iterations,
        "posterior": fit.posterior.tolist(), "classification": (fit.labels + 1).tolist(),
    }
    if fit.std_errors is not None:
        entry["std_errors"] = {k: (float(v) if np.isfinite(v) else None)
                               for k, v in zip(fit.se_labels, fit.std_errors)}
    return entry


def _criteria_table(entries):
    lines = [f"{'G':>3} {'loglik':>14} {'rho':>5} " + " ".join(f"{c:>12}" for c in CRITERIA)]
    for e in entries:
        if "error" in e:
            lines.append(f"{e['G']:>3}  failed: {e['error']}")
            continue
        crit = " ".join(f"{e['criteria'][c]:>12.3f}" for c in CRITERIA)
        marks = ",".join(c for c in CRITERIA if e.get("best", {}).get(c))
        lines.append(f"{e['G']:>3} {e['loglik']:>14.4f} {e['n_params']:>5} {crit}"
                     + (f"  <- best {marks}" if marks else ""))
    return "\n".join(lines)


def cmd_fit(args) -> int:
    ds = io.read_dataset(args.data)
    config = _config(args, compute_se=not args.no_se)
    g_max = args.g_max if args.g_max is not None else args.g
    if g_max < args.g:
        raise UsageError("--g-max must be at least --g")
    entries = []
    for G in range(args.g, g_max + 1):
        try:
            fit = fit_fm_msnc(ds.data, G, config)
            entries.append(_fit_entry(fit, config.family))
        except (FmsncError, ValueError, np.linalg.LinAlgError) as exc:
            entries.append({"G": G, "family": config.family, "error": str(exc)})
    ok = [e for e in entries if "error" not in e]
    for e in ok:
        e["best"] = {}
    for c in CRITERIA:
        if ok:
            min(ok, key=lambda e: e["criteria"][c])["best"][c] = True
    report = {"data": args.data, "n": ds.data.n, "p": ds.p,
              "config": {"family": config.family, "shared_gamma": config.shared_gamma,
                         "tol": config.tol, "max_iter": config.max_iter,
                         "starts": config.n_starts, "seed": config.seed},
              "fits": entries}
    print(_criteria_table(entries), file=sys.stderr if args.out is None else sys.stdout)
    io.write_json(args.out, report)
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_simulate(args) -> int:
    design = io.design_from_dict(io.read_json(args.design))
    if args.seed is not None:
        design = design.with_seed(args.seed)
    sim = analysis.simulate(design)
    io.write_dataset(args.out, sim.data)
    if args.truth:
        io.write_json(args.truth, {"design": io.design_to_dict(design),
                                   "labels": (sim.labels + 1).tolist(),
                                   "complete": sim.complete.tolist()})
    return EXIT_OK


def _pick_model(report, g, criterion):
    fits = [f for f in report.get("fits", []) if "error" not in f]
    if not fits:
        raise UsageError("report contains no successful fit")
    if g is not None:
        match = [f for f in fits if f["G"] == g]
        if not match:
            raise UsageError(f"report has no successful fit with G={g}")
        chosen = match[0]
    else:
        chosen = min(fits, key=lambda f: f["criteria"][criterion])
    return MixtureModel.from_dict(chosen["model"]), chosen.get("family", "skew")


def cmd_impute(args) -> int:
    ds = io.read_dataset(args.data)
    try:
        model, family = _pick_model(io.read_json(args.report), args.g, args.criterion)
    except (KeyError, TypeError) as exc:
        raise io.ParseError(f"invalid report: {exc}") from exc
    if model.p != ds.p:
        raise UsageError(f"report has p={model.p} but the data has p={ds.p}")
    result = analysis.impute(ds.data, model, family)
    ycols = [ds.header.index(f"y{k}") for k in range(1, ds.p + 1)]
    out = sys.stdout if args.out is None else open(args.out, "w", newline="")
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(ds.header + ["imputed"])
        for i, raw in enumerate(ds.rows):
            row = list(raw)
            cells = []
            for k, col in enumerate(ycols):
                if result.imputed[i, k]:
                    row[col] = io.format_float(result.completed[i, k])
                    cells.append(f"y{k + 1}")
            w.writerow(row + [";".join(cells)])
    finally:
        if out is not sys.stdout:
            out.close()
    if args.truth:
        complete = np.asarray(io.read_json(args.truth)["complete"], dtype=float)
        mask = ds.data.missing
        base = analysis.mean_impute(ds.data).completed
        print(f"missing cells: {int(mask.sum())}  "
              f"MAE model: {analysis.mae(complete, result.completed, mask):.4f}  "
              f"MAE mean imputation: {analysis.mae(complete, base, mask):.4f}", file=sys.stderr)
    return EXIT_OK


def _study_table(report: analysis.AccuracyReport):
    lines = [f"{'parameter':<12} {'true':>10} {'MC mean':>10} {'MC Sd':>10} {'IM SE':>10} "
             f"{'bias':>10} {'mse':>10}"]
    for row in zip(report.labels, report.truth, report.mc_mean, report.mc_sd, report.mean_se,
                   report.bias, report.mse):
        lines.append(f"{row[0]:<12} " + " ".join(f"{v:>10.4f}" for v in row[1:]))
    lines.append(f"replicates: {report.estimates.shape[0]}  failed: {report.n_failed}  "
                 f"CCR: {report.ccr:.4f}")
    if np.isfinite(report.mae):
        lines.append(f"MAE: {report.mae:.4f}  MARE: {report.mare:.4f}  "
                     f"MAE mean imputation: {report.mean_imputation_mae:.4f}")
    return "\n".join(lines)


def cmd_study(args) -> int:
    if args.replicates < 2:
        raise UsageError("--replicates must be at least 2")
    design = io.design_from_dict(io.read_json(args.design))
    config = _config(args, compute_se=not args.no_se)
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else [design.n]
    stream = sys.stderr if args.out is None else sys.stdout
    out = {"design": io.design_to_dict(design), "replicates": args.replicates, "studies": []}
    for n in sizes:
        rep = analysis.mc_study(design.with_n(n), args.replicates, config)
        print(f"n = {n}\n{_study_table(rep)}\n", file=stream)
        out["studies"].append({"n": n, **rep.to_dict()})
    io.write_json(args.out, out)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "impute": cmd_impute, "study": cmd_study}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, io.ParseError, OSError) as exc:
        print(f"fmsnc {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FmsncError, np.linalg.LinAlgError) as exc:
        print(f"fmsnc {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
