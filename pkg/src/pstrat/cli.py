"""Command-line front end.

Subcommands: scores, balance, estimate, sensitivity, simulate, check.
Exit status is 0 on success, 1 on invalid input or configuration and 2 on
numerical failure. Options may also come from ``--config FILE`` holding
``key=value`` lines; command-line flags take precedence.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import diagnostics, estimators as est, pscore, sensitivity, simkit
from .dataset import DataError, Schema, load_csv
from .estimators import PipelineConfig, SensitivityParams
from .pscore import NumericalError, Regime, ScoreModel

STOCHASTIC = {"balance", "estimate", "sensitivity", "simulate", "check"}


class UsageError(ValueError):
    """Bad command-line configuration."""


def _add_common(p, *, data=True, stochastic=True):
    if data:
        p.add_argument("--input", help="CSV file with a header row")
        p.add_argument("--z", help="treatment column (default z)")
        p.add_argument("--s", help="intermediate column (default s)")
        p.add_argument("--y", help="outcome column (default y)")
        p.add_argument("--covariates", help="comma-separated covariate columns (default: all others)")
        p.add_argument("--schema", help="key=value file mapping columns to roles")
    if stochastic:
        p.add_argument("--seed", type=int, help="master seed (required)")
        p.add_argument("--bootstrap", type=int, default=300, metavar="B", help="bootstrap replicates")
        p.add_argument("--level", type=float, default=0.95, help="confidence level")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
    p.add_argument("--out", help="output file (default: standard output)")
    p.add_argument("--csv", action="store_true", help="write tables as CSV instead of JSON")
    p.add_argument("--config", help="key=value file with default option values")


def _add_regime(p, default="mono"):
    p.add_argument("--regime", choices=("strong-mono", "mono", "no-mono"), default=default)
    p.add_argument("--xi", help="xi for the no-mono regime (sensitivity accepts lo:hi:k)")


def _add_sens(p):
    p.add_argument("--eps", default="1", help="strong-monotonicity eps (value or lo:hi:k)")
    p.add_argument("--eps1", default="1", help="treated-side eps1 (value or lo:hi:k)")
    p.add_argument("--eps0", default="1", help="control-side eps0 (value or lo:hi:k)")


def build_parser() -> argparse.ArgumentParser:
    return _build()[0]


def _build():
    subs = {}
    ap = argparse.ArgumentParser(prog="pstrat", description="Principal stratification with principal scores.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = subs["scores"] = sub.add_parser("scores", help="fit and serialize the principal score model (ignores Y)")
    _add_common(p, stochastic=False)
    _add_regime(p)

    p = subs["balance"] = sub.add_parser("balance", help="covariate balance check (ignores Y)")
    _add_common(p)
    _add_regime(p)
    p.add_argument("--scores", help="score model JSON from the scores subcommand")
    p.add_argument("--squares", action="store_true", help="also check squared covariates")
    p.add_argument("--products", action="store_true", help="also check pairwise products")

    p = subs["estimate"] = sub.add_parser("estimate", help="principal causal effects with bootstrap inference")
    _add_common(p)
    _add_regime(p)
    _add_sens(p)
    p.add_argument("--scores", help="score model JSON from the scores subcommand")
    p.add_argument("--variant", choices=("weighting", "adjusted", "both"), default="both")
    p.add_argument("--normalize-weights", action="store_true", help="rescale weights to mean 1 per cell")

    p = subs["sensitivity"] = sub.add_parser("sensitivity", help="estimates over a grid of sensitivity parameters")
    _add_common(p)
    _add_regime(p)
    _add_sens(p)
    p.add_argument("--variant", choices=("weighting", "adjusted", "both"), default="both")
    p.add_argument("--normalize-weights", action="store_true")

    p = subs["simulate"] = sub.add_parser("simulate", help="simulation study for a named scenario preset")
    _add_common(p, data=False)
    p.add_argument("--preset", required=False, choices=sorted(simkit.PRESETS), help="scenario preset")
    p.add_argument("--theta", default="0", help="comma-separated theta values, or 'all'")
    p.add_argument("--analysis", choices=("oracle", "obs", "both"), default="oracle")
    p.add_argument("--reps", type=int, default=300)
    p.add_argument("--n", type=int, default=500)

    p = subs["check"] = sub.add_parser("check", help="exact identification check on random discrete populations")
    _add_common(p, data=False)
    _add_regime(p)
    _add_sens(p)
    p.add_argument("--populations", type=int, default=100)
    return ap, subs


def _read_config(path) -> dict:
    kv = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = (t.strip() for t in line.split("=", 1))
        kv[k.replace("-", "_")] = v
    return kv


def parse_args(argv=None) -> argparse.Namespace:
    ap, subs = _build()
    args = ap.parse_args(argv)
    if getattr(args, "config", None):
        cfg = _read_config(args.config)
        sub = subs[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for k, v in cfg.items():
            if k not in known:
                raise UsageError(f"{args.config}: unknown key {k!r}")
            a = known[k]
            if a.const is True and a.nargs == 0:
                defaults[k] = v.lower() in ("1", "true", "yes")
            elif a.type is not None:
                defaults[k] = a.type(v)
            else:
                defaults[k] = v
        sub.set_defaults(**defaults)
        args = ap.parse_args(argv)
    return args


def _schema(args) -> Schema:
    schema = Schema.from_file(args.schema) if args.schema else Schema()
    for role in ("z", "s", "y"):
        v = getattr(args, role, None)
        if v:
            setattr(schema, role, v)
    if args.covariates:
        schema.covariates = [c.strip() for c in args.covariates.split(",") if c.strip()]
    return schema


def _load(args, outcome=True):
    if not args.input:
        raise UsageError("--input is required")
    return load_csv(args.input, _schema(args), read_outcome=outcome)


def _scalar(text, name) -> float:
    vals = sensitivity.parse_grid(str(text))
    if vals.size != 1:
        raise UsageError(f"--{name} must be a single value for this subcommand")
    return float(vals[0])


def _regime(args) -> Regime:
    if args.regime == "no-mono":
        if args.xi is None:
            raise UsageError("--xi is required with --regime no-mono")
        return Regime.no_mono(_scalar(args.xi, "xi"))
    if args.xi is not None:
        raise UsageError("--xi applies only to --regime no-mono")
    return Regime(args.regime)


def _sens(args) -> SensitivityParams:
    return SensitivityParams(_scalar(args.eps, "eps"), _scalar(args.eps1, "eps1"), _scalar(args.eps0, "eps0"))


def _effective(args) -> dict:
    skip = {"config", "verbose"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def _emit(args, payload: dict | None = None, table: str | None = None):
    """Write JSON (default) or CSV; the effective config travels with both."""
    if args.csv and table is not None:
        text = "# config: " + json.dumps(_effective(args), sort_keys=True) + "\n" + table
    else:
        text = json.dumps({"effective_config": _effective(args), **(payload or {})}, indent=2, default=float)
        text += "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_model(path) -> ScoreModel:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read score model {path}: {exc}") from None
    return ScoreModel.from_dict(d.get("model", d))


def cmd_scores(args):
    data = _load(args, outcome=False)
    model = pscore.fit_scores(data, _regime(args))
    if not model.converged:
        raise NumericalError("score model fit did not converge")
    _emit(args, {"model": model.to_dict()})


def cmd_balance(args):
    data = _load(args, outcome=False)
    model = _load_model(args.scores) if args.scores else pscore.fit_scores(data, _regime(args))
    spec = diagnostics.BalanceSpec(squares=args.squares, products=args.products)
    rep = diagnostics.balance_check(data, model, spec, args.bootstrap, args.seed, jobs=args.jobs)
    if rep.advice:
        logging.getLogger("pstrat").warning(rep.advice)
    _emit(args, {"balance": rep.to_dict()}, rep.to_csv())


def _variants(args):
    return est.VARIANTS if args.variant == "both" else (args.variant,)


def _estimates_csv(ests, variants) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["stratum", "variant", "point", "se", "ci_low", "ci_high", "B", "failed_replicates"])
    for e in ests:
        if e.variant in variants:
            w.writerow([str(e.stratum), e.variant, e.point, e.se, e.ci[0], e.ci[1], e.B, e.failed_replicates])
    return buf.getvalue()


def cmd_estimate(args):
    data = _load(args)
    data.require_outcome()
    cfg = PipelineConfig(regime=_regime(args), sens=_sens(args), normalize=args.normalize_weights)
    full = est.full_from_model(data, cfg, _load_model(args.scores)) if args.scores else None
    rep = est.bootstrap(data, cfg, args.bootstrap, args.level, args.seed, jobs=args.jobs, full=full)
    variants = _variants(args)
    _emit(args, {"estimates": rep.to_dict(variants)["estimates"], "model": rep.model.to_dict()},
          _estimates_csv(rep.estimates, variants))


def cmd_sensitivity(args):
    data = _load(args)
    data.require_outcome()
    base = PipelineConfig(normalize=args.normalize_weights)
    kw = dict(B=args.bootstrap, level=args.level, seed=args.seed, jobs=args.jobs)
    if args.regime == "strong-mono":
        if args.xi is not None:
            raise UsageError("--xi applies only to --regime no-mono")
        grid = sensitivity.grid_eps_strong(data, sensitivity.parse_grid(args.eps), config=base, **kw)
    elif args.regime == "mono":
        if args.xi is not None:
            raise UsageError("--xi applies only to --regime no-mono")
        grid = sensitivity.grid_eps_mono(data, sensitivity.parse_grid(args.eps1),
                                         sensitivity.parse_grid(args.eps0), config=base, **kw)
    else:
        xs = None if args.xi is None else sensitivity.parse_grid(args.xi)
        cfg = PipelineConfig(sens=SensitivityParams(eps1=_scalar(args.eps1, "eps1"),
                                                    eps0=_scalar(args.eps0, "eps0")),
                             normalize=args.normalize_weights)
        grid = sensitivity.grid_xi(data, xs, config=cfg, **kw)
    variants = _variants(args)
    for gp in grid.points:
        gp.estimates = [e for e in gp.estimates if e.variant in variants]
    _emit(args, {"grid": grid.to_dict()}, grid.to_csv())


def cmd_simulate(args):
    if not args.preset:
        raise UsageError("--preset is required")
    thetas = simkit.THETAS if args.theta == "all" else [float(t) for t in args.theta.split(",")]
    analyses = (True, False) if args.analysis == "both" else (args.analysis == "oracle",)
    rows = []
    header = None
    for theta in thetas:
        for oracle in analyses:
            spec = simkit.preset(args.preset, theta, oracle, args.n)
            res = simkit.run_study(spec, args.reps, args.bootstrap, args.level, args.seed, jobs=args.jobs)
            text = res.to_csv()
            lines = text.splitlines()
            header = lines[0]
            rows += lines[1:]
            logging.getLogger("pstrat").info("finished %s", spec.label())
    table = "\n".join([header] + rows) + "\n"
    records = list(csv.DictReader(io.StringIO(table)))
    _emit(args, {"study": records}, table)


def cmd_check(args):
    regime = _regime(args)
    sens = _sens(args)
    sens.check_regime(regime)
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.populations):
        pop = simkit.random_population(regime, rng, sens)
        worst = max(worst, simkit.exact_check(pop, regime, sens))
    ok = worst <= 1e-10
    _emit(args, {"populations": args.populations, "max_discrepancy": worst, "passed": ok},
          f"populations,max_discrepancy,passed\n{args.populations},{worst!r},{ok}\n")
    if not ok:
        raise NumericalError(f"identification discrepancy {worst:.3g} exceeds 1e-10")


COMMANDS = {
    "scores": cmd_scores,
    "balance": cmd_balance,
    "estimate": cmd_estimate,
    "sensitivity": cmd_sensitivity,
    "simulate": cmd_simulate,
    "check": cmd_check,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"pstrat: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cmd = args.command
    try:
        if cmd in STOCHASTIC and args.seed is None:
            raise UsageError("--seed is required for this subcommand")
        COMMANDS[cmd](args)
    except NumericalError as exc:
        print(f"pstrat {cmd}: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (DataError, UsageError, ValueError, OSError) as exc:
        print(f"pstrat {cmd}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
