"""Command-line entry point: ``cebass run | bench | calibrate | preset``.

Exit codes: 0 on success, 2 for configuration errors and 3 for data errors.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .calibration import calibrate
from .config import PRESETS, RunConfig, preset
from .engine import CEBASS
from .errors import CebassError, ConfigError, ConvergenceError, DataError, UnobservableModelError
from .simulation import FILTERS, REGIMES, SUMMARY_FIELDS, TIDY_FIELDS, SuiteConfig, run_suite, summarise, write_csv

log = logging.getLogger("cebass")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3


def output_header(p: int, q: int) -> list[str]:
    return (
        ["t"]
        + [f"pred_mean_{i}" for i in range(1, p + 1)]
        + ["pred_loglik"]
        + [f"p_add_{i}" for i in range(1, p + 1)]
        + [f"p_inn_{j}" for j in range(1, q + 1)]
        + ["flag"]
    )


def _num(x) -> str:
    return repr(float(x))


def read_observations(fh, p: int):
    """Iterator of ``(t_text, y)`` over a CSV stream with header ``t,y1..yp``.

    The header is checked immediately and rows are parsed lazily. Raises
    :class:`DataError` on a malformed header, a wrong column count, missing
    or non-numeric values, or times that do not increase.
    """
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("input is empty; expected a header row 't,y1,...,yp'") from None
    header = [h.strip() for h in header]
    if not header or header[0] != "t":
        raise DataError("input header must start with 't'")
    n_cols = len(header) - 1
    if n_cols != p:
        raise DataError(f"input has {n_cols} observation column(s) but the model expects p={p}")
    expected = [f"y{i}" for i in range(1, p + 1)]
    if header[1:] != expected:
        raise DataError(f"input header must be {','.join(['t'] + expected)}")
    return _rows(reader, p)


def _rows(reader, p: int):
    last_t = -math.inf
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != p + 1:
            raise DataError(f"line {lineno}: expected {p + 1} fields, got {len(row)}")
        try:
            t = float(row[0])
            y = np.array([float(v) for v in row[1:]])
        except ValueError:
            raise DataError(f"line {lineno}: missing or non-numeric value") from None
        if not np.all(np.isfinite(y)) or not math.isfinite(t):
            raise DataError(f"line {lineno}: missing or non-finite value")
        if t <= last_t:
            raise DataError(f"line {lineno}: time {row[0]} does not increase")
        last_t = t
        yield row[0].strip(), y


def _resolve_seed(arg_seed):
    if arg_seed is not None:
        return arg_seed
    env = os.environ.get("CEBASS_SEED")
    if env is not None and env != "":
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"CEBASS_SEED must be an integer, got {env!r}") from None
    return None


def _load_config(args) -> RunConfig:
    if getattr(args, "preset", None):
        return preset(args.preset)
    if not getattr(args, "config", None):
        raise ConfigError("either --config or --preset is required")
    return RunConfig.load(args.config)


@contextlib.contextmanager
def _open(path, mode, std):
    if path is None or path == "-":
        yield std
    else:
        try:
            fh = open(path, mode, newline="")
        except OSError as exc:
            raise DataError(f"cannot open {path}: {exc.strerror}") from exc
        with fh:
            yield fh


def cmd_run(args) -> int:
    cfg = _load_config(args)
    model = cfg.build_model()
    fcfg = cfg.build_filter(model, seed=_resolve_seed(args.seed))
    prior = cfg.build_prior(model)
    inp = args.input or cfg.input
    out = args.output or cfg.output
    if inp is None:
        raise ConfigError("no input given (use --input or the config's 'input')")
    filt = CEBASS(model, fcfg, prior)
    with _open(inp, "r", sys.stdin) as fin:
        rows = read_observations(fin, model.p)
        with _open(out, "w", sys.stdout) as fout:
            _write_reports(filt, rows, fout, model)
    return EXIT_OK


def _write_reports(filt, rows, fout, model):
    writer = csv.writer(fout, lineterminator="\n")
    writer.writerow(output_header(model.p, model.q))
    for t_text, y in rows:
        rep = filt.step(y)
        writer.writerow(
            [t_text]
            + [_num(v) for v in rep.predictive_mean]
            + [_num(rep.predictive_log_lik)]
            + [_num(v) for v in rep.p_additive]
            + [_num(v) for v in rep.p_innovative]
            + [rep.flag_string()]
        )


def _parse_horizons(text: str) -> list[list[int]]:
    """``"1,2;2"`` -> ``[[1, 2], [2]]``; ranges ``a-b`` are allowed."""
    out = []
    for part in text.split(";"):
        B = []
        for tok in part.split(","):
            tok = tok.strip()
            if not tok:
                continue
            try:
                if "-" in tok:
                    lo, hi = (int(v) for v in tok.split("-", 1))
                    B.extend(range(lo, hi + 1))
                else:
                    B.append(int(tok))
            except ValueError:
                raise ConfigError(f"--horizons: cannot parse {tok!r}") from None
        out.append(B)
    return out


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    if args.horizons:
        cfg.horizons = _parse_horizons(args.horizons)
    model = cfg.build_model()
    fcfg = cfg.build_filter(model)
    hp, horizons, ss, k_star = calibrate(
        model, horizons=fcfg.horizons, r=fcfg.hp.r, s=fcfg.hp.s, shape=float(cfg.filter.get("shape", 3.0))
    )
    np.set_printoptions(precision=10, suppress=False)
    print(f"p = {model.p}, q = {model.q}")
    print(f"observability index k* = {k_star}")
    print("steady-state predictive covariance:")
    print(ss.Sigma_hat_limit)
    print("steady-state filtering covariance:")
    print(ss.Sigma_limit)
    for j, B in enumerate(fcfg.horizons):
        print(f"horizons B_{j + 1} = {sorted(B)}")
    print(f"sigma_tilde = {hp.sigma_tilde.tolist()}")
    print(f"sigma_hat = {hp.sigma_hat.tolist()}")
    print(f"r = {fcfg.hp.r.tolist()}")
    print(f"s = {fcfg.hp.s.tolist()}")
    return EXIT_OK


def cmd_preset(args) -> int:
    if args.name is None:
        for name in sorted(PRESETS):
            print(name)
        return EXIT_OK
    print(preset(args.name).dumps())
    return EXIT_OK


def _csv_ints(text, name):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"--{name}: expected comma-separated integers") from None


def cmd_bench(args) -> int:
    if args.suite != "paper":
        raise ConfigError(f"unknown suite {args.suite!r}")
    seed = _resolve_seed(args.seed)
    models = _csv_ints(args.models, "models")
    regimes = tuple(args.regimes.split(","))
    filters = tuple(args.filters.split(","))
    if any(m not in (1, 2, 3, 4) for m in models):
        raise ConfigError("--models: ids must be in 1..4")
    if any(r not in REGIMES for r in regimes):
        raise ConfigError(f"--regimes: choose from {','.join(REGIMES)}")
    if any(f not in FILTERS for f in filters):
        raise ConfigError(f"--filters: choose from {','.join(FILTERS)}")
    if args.reps < 1 or args.N < 1 or args.M < 1:
        raise ConfigError("--reps, --N and --M must be positive")
    cfg = SuiteConfig(
        models=models, regimes=regimes, reps=args.reps, seed=0 if seed is None else seed,
        T=args.T, N=args.N, M=args.M, huber_clip=args.clip, filters=filters,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    def progress(done, total):
        if args.verbose:
            print(f"\r{done}/{total} replications", end="", file=sys.stderr)

    rows = run_suite(cfg, workers=args.workers, progress=progress)
    if args.verbose:
        print(f"\ndone in {time.time() - t0:.1f}s", file=sys.stderr)
    summary = summarise(rows)
    write_csv(out / "metrics.csv", rows, TIDY_FIELDS)
    write_csv(out / "summary.csv", summary, SUMMARY_FIELDS)
    print(f"{'model':>5} {'regime':>6} {'metric':>12} " + " ".join(f"{f:>10}" for f in filters))
    table = {(d["model"], d["regime"], d["metric"], d["filter"]): d["mean"] for d in summary}
    for m in models:
        for r in regimes:
            for met in ("pred_loglik", "pred_mse"):
                vals = " ".join(f"{table[(m, r, met, f)]:>10.4f}" for f in filters)
                print(f"{m:>5} {r:>6} {met:>12} {vals}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cebass", description="Robust streaming filtering and anomaly detection.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="filter a CSV stream and report anomalies")
    src = run.add_mutually_exclusive_group()
    src.add_argument("--config", help="JSON run configuration")
    src.add_argument("--preset", choices=sorted(PRESETS), help="named configuration")
    run.add_argument("--input", help="CSV with header t,y1,...,yp ('-' for stdin)")
    run.add_argument("--output", help="output CSV ('-' or omitted for stdout)")
    run.add_argument("--seed", type=int, default=None, help="overrides the config and CEBASS_SEED")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="run the simulation study")
    bench.add_argument("--suite", default="paper")
    bench.add_argument("--reps", type=int, default=50)
    bench.add_argument("--out", required=True, help="output directory")
    bench.add_argument("--seed", type=int, default=None)
    bench.add_argument("--workers", type=int, default=1)
    bench.add_argument("--models", default="1,2,3,4")
    bench.add_argument("--regimes", default=",".join(REGIMES))
    bench.add_argument("--filters", default=",".join(FILTERS))
    bench.add_argument("--T", type=int, default=1000)
    bench.add_argument("--N", type=int, default=20)
    bench.add_argument("--M", type=int, default=1)
    bench.add_argument("--clip", type=float, default=1.345, help="Huber threshold")
    bench.set_defaults(func=cmd_bench)

    cal = sub.add_parser("calibrate", help="print calibrated hyperparameters")
    src = cal.add_mutually_exclusive_group()
    src.add_argument("--config")
    src.add_argument("--preset", choices=sorted(PRESETS))
    cal.add_argument("--horizons", help="override horizon sets, e.g. '1-40;2-40'")
    cal.set_defaults(func=cmd_calibrate)

    pre = sub.add_parser("preset", help="list presets or print one as JSON")
    pre.add_argument("name", nargs="?")
    pre.set_defaults(func=cmd_preset)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, UnobservableModelError, ConvergenceError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CebassError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
