"""Command-line interface: gradient/multiplier maps, gamma curves, checks, training.

Every CSV starts with one provenance line ``# cmd=... key=value ...`` holding
all parameters that determine the file; ``marginnce replay FILE`` re-runs it.

Exit codes: 0 success, 1 failed verification, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import itertools
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import gradients, schemes, simulator, verification
from .errors import ConfigError, MarginNCEError
from .loss import MarginParams

DEFAULT_C_LIST = "1/3,0.5,0.7,1,1.5,2.5,5"
# parameters that never change file content
NOT_PROVENANCE = {"cmd", "out", "config", "workers", "sweep", "func", "csv", "source"}


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.9g}"


def provenance_line(cmd: str, params: dict) -> str:
    items = [f"cmd={cmd}"]
    for key in sorted(params):
        if key in NOT_PROVENANCE or params[key] is None:
            continue
        value = params[key]
        text = repr(value) if isinstance(value, float) else str(value)
        items.append(f"{key}={text}")
    return "# " + " ".join(items) + "\n"


def read_provenance(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if not first.startswith("# "):
        raise MarginNCEError(f"{path} has no provenance header")
    return dict(item.split("=", 1) for item in first[2:].split())


def write_csv(path, header_line, columns, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header_line)
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def parse_float(text: str) -> float:
    text = text.strip()
    if text.lower() in ("inf", "infinity"):
        return math.inf
    return float(Fraction(text)) if "/" in text else float(text)


def parse_c_list(text: str):
    try:
        values = [parse_float(t) for t in text.split(",") if t.strip()]
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad c list {text!r}: {exc}") from None
    if not values or any(not v > 0 for v in values):
        raise ConfigError("each c must be > 0 or inf")
    return values


def _params(args):
    return MarginParams(m1=args.m1, m2=args.m2, tau=args.tau, beta=args.beta)


def cmd_gradmap(args):
    if args.grid < 2:
        raise MarginNCEError("grid must be >= 2")
    params = _params(args)
    theta = np.linspace(0.0, math.pi, args.grid)
    q = np.linspace(0.0, 1.0, args.grid)
    rows = []
    for p in (0.0, 1.0):
        for t in theta:
            g = (p - params.beta * q) * math.sin(t + params.m1 * p) / params.tau
            rows.extend((t, qq, p, abs(gg)) for qq, gg in zip(q, g))
    write_csv(args.out, provenance_line("gradmap", vars(args)), ["theta", "q", "p", "grad_abs"], rows)
    return 0


def cmd_multmap(args):
    if args.grid < 2:
        raise MarginNCEError("grid must be >= 2")
    params = _params(args)
    theta = np.linspace(0.0, math.pi, args.grid)
    q_tilde = np.linspace(0.0, 1.0, args.grid + 2)[1:-1]
    rows = []
    for t in theta:
        low, high = gradients.feasible_qtilde_range(t, args.batch_size, params.tau)
        prob, _, sin_term = gradients.multiplier_terms(t, q_tilde, params)
        rows.extend((t, qt, pt, sin_term, low < qt < high) for qt, pt in zip(q_tilde, prob))
    write_csv(args.out, provenance_line("multmap", vars(args)),
              ["theta_pos", "q_tilde_pos", "prob_term", "sin_term", "feasible"], rows)
    return 0


def cmd_curve(args):
    if args.points < 2:
        raise MarginNCEError("points must be >= 2")
    x = np.linspace(0.0, 1.0, args.points)
    rows = []
    for c in parse_c_list(args.c_list):
        rows.extend((xx, c, g) for xx, g in zip(x, schemes.gamma(x, c)))
    write_csv(args.out, provenance_line("curve", vars(args)), ["x", "c", "gamma"], rows)
    return 0


def cmd_verify(args):
    reports = verification.run_all_checks(args.seed)
    sys.stdout.write(verification.report_table(reports))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(provenance_line("verify", vars(args)))
            fh.write(verification.report_csv(reports))
    failed = [r.name for r in reports if not r.passed]
    if failed:
        sys.stdout.write("FAILED: " + ", ".join(failed) + "\n")
        return 1
    return 0


TRAIN_KEYS = ("mode", "scheme", "s", "c", "alpha", "m1", "m2", "beta", "tau", "steps", "seed",
              "lr", "ema", "batch", "sigma_view", "k", "n", "dim_in", "dim_out", "sigma_class",
              "n_eval", "log_every")


def train_config(p: dict) -> simulator.TrainConfig:
    return simulator.TrainConfig(
        mode=p["mode"],
        margin_params=MarginParams(m1=p["m1"], m2=p["m2"], tau=p["tau"], beta=p["beta"]),
        scheme=schemes.SchemeConfig(p["scheme"], s=p["s"], c=p["c"], alpha=p["alpha"]),
        lr=p["lr"], ema_momentum=p["ema"], batch=p["batch"], steps=p["steps"],
        sigma_view=p["sigma_view"], seed=p["seed"], k=p["k"], n=p["n"], dim_in=p["dim_in"],
        dim_out=p["dim_out"], sigma_class=p["sigma_class"], n_eval=p["n_eval"],
    ).validated()


def _train_one(job):
    params, out = job
    config = train_config(params)
    metrics = simulator.run(config, log_every=params["log_every"])
    rows = [(r.step, r.loss, r.align, r.spread, r.acc, r.collapsed) for r in metrics.rows]
    write_csv(out, provenance_line("train", params), ["step", "loss", "align", "spread", "acc", "collapsed"], rows)
    return out, metrics.final


def parse_sweep(items):
    grid = {}
    for item in items or ():
        key, _, values = item.partition("=")
        if key not in ("s", "c", "alpha", "m1", "m2"):
            raise MarginNCEError(f"cannot sweep over {key!r}")
        grid[key] = [parse_float(v) for v in values.split(",") if v]
        if not grid[key]:
            raise MarginNCEError(f"empty sweep list for {key}")
    return grid


def cmd_train(args):
    base = {k: getattr(args, k) for k in TRAIN_KEYS}
    grid = parse_sweep(args.sweep)
    if not grid:
        train_config(base)
        jobs = [(base, args.out)]
    else:
        out = Path(args.out)
        jobs = []
        keys = sorted(grid)
        for combo in itertools.product(*(grid[k] for k in keys)):
            params = dict(base, **dict(zip(keys, combo)))
            train_config(params)
            stamp = "_".join(f"{k}{fmt(v)}" for k, v in zip(keys, combo))
            jobs.append((params, str(out.with_name(f"{out.stem}_{stamp}{out.suffix or '.csv'}"))))
    workers = max(1, min(args.workers or os.cpu_count() or 1, len(jobs)))
    if workers == 1:
        results = [_train_one(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_one, jobs))
    for out, final in results:
        sys.stdout.write(f"{out}: step={final.step} loss={fmt(final.loss)} acc={fmt(final.acc)} "
                         f"collapsed={int(final.collapsed)}\n")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="marginnce", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", required=True)
    subs = {}

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key=value file; flags override it")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    def margins(p, beta=1.0, m1=0.0, grid=101, out=None):
        p.add_argument("--beta", type=float, default=beta)
        p.add_argument("--tau", type=float, default=0.25)
        p.add_argument("--m1", type=float, default=m1)
        p.add_argument("--m2", type=float, default=0.0)
        p.add_argument("--batch-size", type=int, default=256)
        p.add_argument("--grid", type=int, default=grid)
        p.add_argument("--out", default=out)

    margins(add("gradmap", cmd_gradmap, "|dL/dtheta| over a (theta, q) lattice"), out="gradmap.csv")
    margins(add("multmap", cmd_multmap, "margin multiplier terms over (theta+, q~+)"),
            m1=0.2, grid=99, out="multmap.csv")

    p = add("curve", cmd_curve, "gamma(x, c) curves")
    p.add_argument("--c-list", default=DEFAULT_C_LIST)
    p.add_argument("--points", type=int, default=101)
    p.add_argument("--out", default="curve.csv")

    p = add("verify", cmd_verify, "run every analytic-vs-oracle check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="also write the reports as CSV")

    d = simulator.TrainConfig()
    p = add("train", cmd_train, "desk-scale training run(s) of the simulator")
    p.add_argument("--mode", choices=simulator.MODES, default=d.mode)
    p.add_argument("--scheme", choices=schemes.SCHEMES, default="none")
    p.add_argument("--s", type=parse_float, default=1.0)
    p.add_argument("--c", type=parse_float, default=math.inf)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--m1", type=float, default=0.0)
    p.add_argument("--m2", type=float, default=0.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=0.25)
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--ema", type=float, default=d.ema_momentum)
    p.add_argument("--batch", type=int, default=d.batch)
    p.add_argument("--sigma-view", type=float, default=d.sigma_view)
    p.add_argument("--k", type=int, default=d.k)
    p.add_argument("--n", type=int, default=d.n)
    p.add_argument("--dim-in", type=int, default=d.dim_in)
    p.add_argument("--dim-out", type=int, default=d.dim_out)
    p.add_argument("--sigma-class", type=float, default=d.sigma_class)
    p.add_argument("--n-eval", type=int, default=d.n_eval)
    p.add_argument("--log-every", type=int, default=1)
    p.add_argument("--sweep", nargs="+", metavar="KEY=V1,V2", help="e.g. --sweep s=1,5,20 c=0.7,1,2.5")
    p.add_argument("--workers", type=int, default=None, help="parallel sweep workers (default: all cores)")
    p.add_argument("--out", default="train.csv")

    p = add("replay", cmd_replay, "re-run the command recorded in a CSV provenance header")
    p.add_argument("source")
    p.add_argument("--out", required=True)
    return parser, subs


def load_config(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise MarginNCEError(f"bad config line {line!r}")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def cmd_replay(args):
    params = read_provenance(args.source)
    cmd = params.pop("cmd")
    argv = [cmd]
    for key, value in params.items():
        argv += [f"--{key.replace('_', '-')}", value]
    return main(argv + ["--out", args.out])


def main(argv=None) -> int:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            sp = subs[args.cmd]
            known = {a.dest for a in sp._actions}
            values = load_config(args.config)
            unknown = set(values) - known
            if unknown:
                raise MarginNCEError(f"unknown config keys: {', '.join(sorted(unknown))}")
            sp.set_defaults(**values)
            args = parser.parse_args(argv)
        return args.func(args)
    except MarginNCEError as exc:
        sys.stderr.write(f"marginnce: error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
