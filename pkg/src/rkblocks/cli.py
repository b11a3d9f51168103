"""``rkblocks`` command line: training, numerical checks and scheme experiments.

Exit codes: 0 success, 1 threshold failure or divergence, 2 configuration error.
Every command writes CSV output plus ``run.meta`` into ``--out``; reruns with
the same arguments reproduce the files byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .analysis import GRADCHECK_TOL, GRADFACTOR_TOL, gradcheck_scheme, gradfactor_table, odecheck
from .blocks import ALL_SCHEMES, parse_scheme
from .config import ExperimentConfig, field_types, load_config, make_corpus
from .errors import ConfigError, ContractError, DataError, DivergenceError
from .model import build_model
from .oracle import ORDER_BANDS, PROBLEMS
from .train import (
    TRUNCATION_SCHEMES,
    compare_schemes,
    train,
    truncation_study,
    write_gradnorm,
    write_records,
)

log = logging.getLogger("rkblocks")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

# Command-specific starting points; a config file and flags override them.
COMMAND_DEFAULTS = {
    "truncation-study": {"task": "char", "corpus": "paradise-lost", "depth": 1},
}


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _schemes(text: Optional[str], default) -> list:
    if not text:
        return [parse_scheme(s) for s in default]
    return [parse_scheme(s.strip()) for s in text.split(",") if s.strip()]


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _write_meta(out: Path, args, exp: Optional[ExperimentConfig]) -> None:
    lines = [f"command={args.command}", f"version={__version__}"]
    if exp is not None:
        lines += [f"config_sha256={exp.digest()}", f"seed={exp.model.seed}"]
    extras = {k: v for k, v in sorted(vars(args).items())
              if k not in field_types() and k not in ("command", "config", "out", "func") and v is not None}
    lines += [f"arg.{k}={v}" for k, v in extras.items()]
    if exp is not None:
        lines += exp.canonical().splitlines()
    (out / "run.meta").write_text("\n".join(lines) + "\n")


def _experiment(args) -> ExperimentConfig:
    overrides = {k: getattr(args, k) for k in field_types() if getattr(args, k, None) is not None}
    return load_config(args.config, overrides, COMMAND_DEFAULTS.get(args.command))


# -- commands ---------------------------------------------------------------

def cmd_train(args, out: Path) -> int:
    exp = _experiment(args)
    corpus = make_corpus(exp)
    model = build_model(exp.model)
    _write_meta(out, args, exp)
    status = EXIT_OK
    try:
        records = train(model, corpus, exp.optim, sink=_log_record)
    except DivergenceError as exc:
        log.error("%s", exc)
        records, status = exc.records, EXIT_FAIL
    write_records(out / "metrics.csv", records)
    if args.command == "gradnorm":
        write_gradnorm(out / "gradnorm.csv", records)
    return status


def _log_record(rec) -> None:
    ppl = "" if rec.valid_ppl is None else f" valid_ppl={rec.valid_ppl:.4f}"
    log.info("step %d loss=%.4f%s lr=%.3g", rec.step, rec.loss, ppl, rec.lr)


def cmd_odecheck(args, out: Path) -> int:
    if args.problem not in PROBLEMS:
        raise ConfigError(f"unknown problem {args.problem!r}; choose from {sorted(PROBLEMS)}")
    schemes = [s.strip() for s in (args.schemes or "euler,rk2,rk4").split(",") if s.strip()]
    for s in schemes:
        if s not in ORDER_BANDS:
            raise ConfigError(f"odecheck supports {sorted(ORDER_BANDS)}, got {s!r}")
    rows = odecheck(args.problem, _floats(args.h_list), schemes)
    _write_csv(out / "odecheck.csv", ["scheme", "h", "error", "fitted_order"],
               [(r.scheme, r.h, r.error, r.fitted_order) for r in rows])
    _write_meta(out, args, None)
    ok = True
    for s in schemes:
        row = next(r for r in rows if r.scheme == s)
        lo, hi = ORDER_BANDS[s]
        verdict = "ok" if row.in_band else "FAIL"
        ok &= row.in_band
        print(f"{s:6s} order {row.fitted_order:.4f}  band [{lo}, {hi}]  {verdict}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gradcheck(args, out: Path) -> int:
    schemes = _schemes(args.schemes, ALL_SCHEMES)
    results = [gradcheck_scheme(s, seed=args.seed or 0) for s in schemes]
    _write_csv(out / "gradcheck.csv", ["scheme", "max_rel_error", "n_coords", "passed"],
               [(r.scheme, r.max_rel_error, r.n_coords, int(r.passed)) for r in results])
    _write_meta(out, args, None)
    for r in results:
        print(f"{r.scheme:10s} max_rel_error {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.scheme for r in results if not r.passed]
    if failed:
        log.error("gradient check above %g for: %s", GRADCHECK_TOL, ", ".join(failed))
    return EXIT_FAIL if failed else EXIT_OK


def cmd_gradfactor(args, out: Path) -> int:
    depth = args.depth if args.depth is not None else 6
    try:
        depth = int(depth)
    except ValueError:
        raise ConfigError(f"depth must be an integer, got {depth!r}") from None
    if depth < 1:
        raise ConfigError("gradfactor needs depth >= 1")
    if not abs(args.a) < 1:
        raise ConfigError(f"gradfactor needs |a| < 1, got {args.a}")
    rows = gradfactor_table(args.a, depth)
    _write_csv(out / "gradfactor.csv",
               ["t", "rk2_autodiff", "rk2_analytic", "rk2_g1_autodiff", "rk2_g1_analytic", "ratio",
                "max_rel_error"],
               [(r.t, r.rk2_autodiff, r.rk2_analytic, r.rk2_g1_autodiff, r.rk2_g1_analytic, r.ratio,
                 r.max_rel_error) for r in rows])
    _write_meta(out, args, None)
    print(f"{'t':>3s} {'rk2':>14s} {'rk2-g1':>14s} {'ratio':>10s} {'rel err':>10s}")
    for r in rows:
        print(f"{r.t:3d} {r.rk2_autodiff:14.10f} {r.rk2_g1_autodiff:14.10f} {r.ratio:10.6f} "
              f"{r.max_rel_error:10.2e}")
    worst = max(r.max_rel_error for r in rows)
    return EXIT_OK if worst < GRADFACTOR_TOL else EXIT_FAIL


def cmd_compare(args, out: Path) -> int:
    exp = _experiment(args)
    corpus = make_corpus(exp)
    schemes = _schemes(args.schemes, ALL_SCHEMES)
    seeds = _ints(args.seeds) if args.seeds else [exp.model.seed]
    if not seeds:
        raise ConfigError("compare-schemes needs at least one seed")
    _write_meta(out, args, exp)
    runs = compare_schemes(exp.model, exp.optim, corpus, schemes, seeds)
    _write_csv(out / "compare.csv",
               ["scheme", "seed", "params", "final_loss", "valid_ppl", "accuracy", "diverged"],
               [(r.scheme, r.seed, r.params, r.final_loss, r.valid_ppl, r.accuracy, int(r.diverged))
                for r in runs])
    for r in runs:
        flag = "  DIVERGED" if r.diverged else ""
        print(f"{r.scheme:10s} seed {r.seed}  params {r.params}  valid_ppl {r.valid_ppl:.4f}  "
              f"acc {r.accuracy:.4f}{flag}")
    _report_rk_trend(runs)
    return EXIT_FAIL if runs and all(r.diverged for r in runs) else EXIT_OK


def _report_rk_trend(runs) -> None:
    """Soft check: how many seeds have each RK scheme at or below the Euler PPL."""
    base = {r.seed: r.valid_ppl for r in runs if r.scheme == "euler" and not r.diverged}
    if not base:
        return
    for scheme in dict.fromkeys(r.scheme for r in runs if r.scheme.startswith("rk")):
        paired = [(r.valid_ppl, base[r.seed]) for r in runs
                  if r.scheme == scheme and r.seed in base and not r.diverged]
        wins = sum(p <= b for p, b in paired)
        print(f"soft: {scheme} valid_ppl <= euler in {wins}/{len(paired)} seeds")


def cmd_truncation(args, out: Path) -> int:
    exp = _experiment(args)
    corpus = make_corpus(exp)
    schemes = _schemes(args.schemes, TRUNCATION_SCHEMES)
    depths = _ints(args.depths) if args.depths else [1, 2]
    seeds = _ints(args.seeds) if args.seeds else [exp.model.seed]
    _write_meta(out, args, exp)
    try:
        runs = truncation_study(schemes, depths, corpus, exp.model, exp.optim, seeds)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    _write_csv(out / "truncation.csv",
               ["scheme", "depth", "seed", "params", "valid_ppl", "best_valid_ppl", "diverged"],
               [(r.scheme, r.depth, r.seed, r.params, r.valid_ppl, r.best_valid_ppl, int(r.diverged))
                for r in runs])
    for r in runs:
        print(f"depth {r.depth}  {r.scheme:10s} seed {r.seed}  valid_ppl {r.valid_ppl:.4f}")
    return EXIT_FAIL if runs and all(r.diverged for r in runs) else EXIT_OK


COMMANDS = {
    "train": (cmd_train, "train one model and write metrics.csv"),
    "odecheck": (cmd_odecheck, "convergence orders of the classical integrators"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient check of every block scheme"),
    "gradfactor": (cmd_gradfactor, "analytic vs autodiff gradient factors on the scalar surrogate"),
    "compare-schemes": (cmd_compare, "train every scheme on a shared configuration"),
    "truncation-study": (cmd_truncation, "1- and 2-block char LMs across RK schemes"),
    "gradnorm": (cmd_train, "train and write per-block gradient norms to gradnorm.csv"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rkblocks", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key=value config file")
    shared.add_argument("--out", default="out", help="output directory (default: out)")
    shared.add_argument("-v", "--verbose", action="store_true")
    cfg_group = shared.add_argument_group("config overrides")
    for key, (section, typ) in field_types().items():
        cfg_group.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar=typ.__name__.upper(),
                               help=f"{section}.{key}")

    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[shared], help=help_text)
        if name == "odecheck":
            p.add_argument("--problem", default="forced", help=f"one of {sorted(PROBLEMS)}")
            p.add_argument("--h-list", default="0.1,0.05,0.025,0.0125")
            p.add_argument("--schemes", default=None, help="comma-separated subset of euler,rk2,rk4")
        elif name == "gradfactor":
            p.add_argument("--a", type=float, default=0.1, help="surrogate slope, |a| < 1")
        elif name == "gradcheck":
            p.add_argument("--schemes", default=None)
        elif name in ("compare-schemes", "truncation-study"):
            p.add_argument("--schemes", default=None)
            p.add_argument("--seeds", default=None, help="comma-separated seeds")
            if name == "truncation-study":
                p.add_argument("--depths", default=None, help="subset of 1,2")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None:
        try:
            args.seed = int(args.seed)
        except ValueError:
            print(f"rkblocks: error: --seed must be an integer, got {args.seed!r}", file=sys.stderr)
            return EXIT_CONFIG
    out = Path(args.out)
    func = COMMANDS[args.command][0]
    try:
        out.mkdir(parents=True, exist_ok=True)
        return func(args, out)
    except (ConfigError, DataError) as exc:
        print(f"rkblocks: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"rkblocks: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
