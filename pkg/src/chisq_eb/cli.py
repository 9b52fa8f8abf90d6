"""Command line front end.

Subcommands: ``estimate``, ``bh``, ``simulate {fig4,fig5,xor}``, ``curves`` and
``fit-gradients``.  Tables are written as CSV with a JSON sidecar holding the
configuration, the library version and any raised flags.  Exit codes: 0 ok,
2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, tweedie
from .exceptions import ChisqEBError, ConfigError, DomainError, ParseError
from .gradest import FitConfig, fit_gradients, fit_lindsey, gradient_model_from_dict
from .model import MarginalModel, exact_log_gradients, marginal_density, prior_from_dict
from .mtest import Battery, bh_select, empirical_fdr, p_values, posterior_significance

__all__ = ["ingest", "build_parser", "run", "main"]

OUTPUT_ENV = "CHISQ_EB_OUTPUT_DIR"
ESTIMATE_COLUMNS = ("id", "x", "k", "mean", "var", "lo", "hi", "fdr", "significant", "flags")
BH_COLUMNS = ("id", "x", "k", "p", "rejected")


def _parse_float(text, what, row):
    try:
        return float(text)
    except (TypeError, ValueError):
        raise ParseError(f"cannot parse {what} {text!r}", row) from None


def ingest(path, k=None):
    """Read a CSV with header ``id,x[,k]`` and optional ``is_null,lambda``.

    Rows are numbered from 1 (the header is row 0).  A missing or empty
    ``k`` cell falls back to ``k``.

    Raises
    ------
    ParseError
        Malformed header, duplicate id or unparseable cell (names the row).
    DomainError
        ``x <= 0`` (names the row).
    ConfigError
        No ``k`` column and no default.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise ConfigError(f"cannot open input {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if "id" not in cols or "x" not in cols:
            raise ParseError("header must contain 'id' and 'x'", 0)
        if "k" not in cols and k is None:
            raise ConfigError("input has no k column; pass --k")
        has_truth = "is_null" in cols
        has_lam = "lambda" in cols
        ids, xs, ks, nulls, lams = [], [], [], [], []
        seen = set()
        for row, rec in enumerate(reader, start=1):
            cid = (rec.get("id") or "").strip()
            if not cid:
                raise ParseError("empty id", row)
            if cid in seen:
                raise ParseError(f"duplicate id {cid!r}", row)
            seen.add(cid)
            x = _parse_float(rec.get("x"), "x", row)
            if not (math.isfinite(x) and x > 0):
                raise DomainError(f"row {row}: x must be finite and > 0, got {x}")
            kk = rec.get("k")
            kv = _parse_float(kk, "k", row) if kk not in (None, "") else k
            if kv is None:
                raise ConfigError(f"row {row}: no k value and no --k default")
            if not kv > 0:
                raise DomainError(f"row {row}: k must be > 0")
            ids.append(cid)
            xs.append(x)
            ks.append(float(kv))
            if has_truth:
                v = (rec.get("is_null") or "").strip().lower()
                if v not in ("0", "1", "true", "false"):
                    raise ParseError(f"is_null must be 0/1/true/false, got {v!r}", row)
                nulls.append(v in ("1", "true"))
            if has_lam:
                lams.append(_parse_float(rec.get("lambda"), "lambda", row))
    if not ids:
        raise ParseError("input has no data rows", 1)
    return Battery(
        tuple(ids), np.array(xs), np.array(ks),
        np.array(nulls) if has_truth else None,
        np.array(lams) if has_lam else None,
    )


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _out_path(arg, default_name):
    base = Path(os.environ.get(OUTPUT_ENV, "."))
    p = Path(arg) if arg else base / default_name
    if not p.is_absolute() and arg and os.environ.get(OUTPUT_ENV):
        p = base / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, columns, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (float, np.floating)):
        o = float(o)
        return o if math.isfinite(o) else None
    return o


def _write_json(path, obj):
    with Path(path).open("w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sidecar(path):
    return Path(str(path) + ".json")


def _config_echo(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


def _load_prior(text):
    if text is None:
        raise ConfigError("exact mode needs --prior")
    p = Path(text)
    try:
        d = json.loads(p.read_text()) if p.exists() else json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--prior is neither a JSON file nor JSON text: {exc}") from exc
    try:
        return prior_from_dict(d)
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _gradients_for(args, x, k):
    """Gradient model plus an optional density callable for the local fdr."""
    if args.gradients:
        d = json.loads(Path(args.gradients).read_text())
        g = gradient_model_from_dict(d)
        return g, getattr(g, "density", None)
    if args.method == "exact":
        M = MarginalModel(_load_prior(args.prior), k)
        return exact_log_gradients(M), (lambda v: marginal_density(M, v))
    cfg = FitConfig(method=args.method, seed=args.seed)
    g = fit_gradients(x, cfg)
    density = getattr(g, "density", None)
    if density is None and args.pi0 is not None:
        density = fit_lindsey(x, FitConfig(method="lindsey", basis_size=8)).density
    return g, density


def _pi0_value(args, p):
    if args.pi0 is None:
        return None
    if args.pi0 == "auto":
        return tweedie.estimate_pi0(p)
    try:
        v = float(args.pi0)
    except ValueError:
        raise ConfigError(f"--pi0 must be a number or 'auto', got {args.pi0!r}") from None
    if not 0.0 <= v <= 1.0:
        raise ConfigError("--pi0 must lie in [0, 1]")
    return v


def cmd_estimate(args):
    b = ingest(args.input, args.k)
    out = _out_path(args.output, "estimate.csv")
    pv = p_values(b)
    results = [None] * len(b)
    flag_counts = {}
    groups = {}
    for kv in np.unique(b.k):
        idx = np.nonzero(b.k == kv)[0]
        g, density = _gradients_for(args, b.x[idx], kv)
        pi0 = _pi0_value(args, pv[idx])
        summ = tweedie.summarize(g, b.x[idx], kv, args.level, pi0=pi0, density=density)
        groups[repr(float(kv))] = {"n": int(idx.size), "method": g.method, "pi0": pi0}
        for i, s in zip(idx, summ):
            results[i] = s
            for f in s.flags:
                flag_counts[f] = flag_counts.get(f, 0) + 1
    rows = []
    for cid, s in zip(b.ids, results):
        sig = posterior_significance(s.mean, s.k, args.sig_alpha)
        rows.append((cid, s.x, s.k, s.mean, s.variance, s.interval_lo, s.interval_hi,
                     s.fdr, sig, ";".join(sorted(s.flags))))
    _write_csv(out, ESTIMATE_COLUMNS, rows)
    _write_json(_sidecar(out), {
        "version": __version__, "command": "estimate", "config": _config_echo(args),
        "groups": groups, "flags": flag_counts, "n": len(b),
    })
    return 0


def cmd_bh(args):
    b = ingest(args.input, args.k)
    out = _out_path(args.output, "bh.csv")
    pv = p_values(b)
    res = bh_select(pv, args.alpha, x=b.x)
    mask = res.mask()
    _write_csv(out, BH_COLUMNS, zip(b.ids, b.x, b.k, pv, mask))
    meta = {
        "version": __version__, "command": "bh", "config": _config_echo(args),
        "count": res.count, "cutoff_x": res.cutoff_x, "threshold_p": res.threshold,
    }
    if b.has_truth:
        fdr, tp = empirical_fdr(res, b)
        meta.update(empirical_fdr=fdr, true_positives=tp)
    _write_json(_sidecar(out), meta)
    return 0


def cmd_simulate(args):
    from .experiments import XorConfig, coverage_experiment, xor_study

    out = _out_path(args.output, f"{args.scenario}.json")
    if args.scenario == "xor":
        seeds = range(args.seed, args.seed + args.seeds)
        reports = [
            xor_study(XorConfig(n=args.n, p=args.p, seed=s, threads=args.threads))
            for s in seeds
        ]
        _write_json(out, {"version": __version__, "config": _config_echo(args), "seeds": reports})
        return 0
    rep = coverage_experiment(args.scenario, args.reps, args.seed)
    meta = {"version": __version__, "config": _config_echo(args), **rep.to_dict()}
    _write_json(out, meta)
    if rep.cases:
        cols = list(rep.cases)
        n = len(rep.cases[cols[0]])
        _write_csv(Path(str(out).removesuffix(".json") + ".csv"), cols,
                   zip(*[rep.cases[c] for c in cols]) if n else [])
    return 0


def cmd_curves(args):
    from .experiments import curve_emit

    prior = _load_prior(args.prior)
    if args.xmin <= 0 or args.xmax <= args.xmin or args.points < 2:
        raise ConfigError("need 0 < xmin < xmax and points >= 2")
    table = curve_emit(prior, args.k, np.linspace(args.xmin, args.xmax, args.points))
    out = _out_path(args.output, "curves.csv")
    _write_csv(out, table.columns, table.rows().tolist())
    _write_json(_sidecar(out), {
        "version": __version__, "command": "curves", "config": _config_echo(args),
        "log_concave_on_grid": table.log_concave,
    })
    return 0


def cmd_fit(args):
    b = ingest(args.input, args.k)
    ks = np.unique(b.k)
    if ks.size != 1:
        raise ConfigError("fit-gradients needs a battery with a single k")
    if args.method == "exact":
        g = exact_log_gradients(MarginalModel(_load_prior(args.prior), ks[0]))
    else:
        g = fit_gradients(b.x, FitConfig(method=args.method, seed=args.seed))
    out = _out_path(args.output, "gradients.json")
    d = g.to_dict()
    d["k"] = float(ks[0])
    _write_json(out, d)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="chisq-eb", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, with_input=True):
        if with_input:
            p.add_argument("--input", "-i", required=True, help="CSV with id,x[,k]")
            p.add_argument("--k", type=float, help="default null degrees of freedom")
        p.add_argument("--output", "-o", help=f"output path (default under ${OUTPUT_ENV} or .)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes (default: all cores; 1 = serial)")

    p = sub.add_parser("estimate", help="posterior summaries per case")
    common(p)
    p.add_argument("--method", choices=("score-matching", "lindsey", "exact"),
                   default="score-matching")
    p.add_argument("--prior", help="prior JSON (text or file) for --method exact")
    p.add_argument("--gradients", help="saved gradient model from fit-gradients")
    p.add_argument("--pi0", help="null proportion, or 'auto'; enables the local fdr")
    p.add_argument("--level", type=float, default=0.9)
    p.add_argument("--sig-alpha", type=float, default=0.1,
                   help="level for posterior significance")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bh", help="Benjamini-Hochberg selection")
    common(p)
    p.add_argument("--alpha", type=float, default=0.1)
    p.set_defaults(func=cmd_bh)

    p = sub.add_parser("simulate", help="run a simulation experiment")
    p.add_argument("scenario", choices=("fig4", "fig5", "xor"))
    common(p, with_input=False)
    p.add_argument("--reps", type=int, default=None,
                   help="draws (fig4, default 1000) or cases (fig5, default 5000)")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds (xor)")
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--p", type=int, default=100)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("curves", help="adjustment curves under a known prior")
    common(p, with_input=False)
    p.add_argument("--prior", required=True)
    p.add_argument("--k", type=float, default=7.0)
    p.add_argument("--xmin", type=float, default=0.5)
    p.add_argument("--xmax", type=float, default=40.0)
    p.add_argument("--points", type=int, default=200)
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("fit-gradients", help="fit and serialize a gradient model")
    common(p)
    p.add_argument("--method", choices=("score-matching", "lindsey", "exact"),
                   default="score-matching")
    p.add_argument("--prior")
    p.set_defaults(func=cmd_fit)
    return ap


def run(argv=None):
    """Parse ``argv`` and execute; returns the exit status."""
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ChisqEBError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
