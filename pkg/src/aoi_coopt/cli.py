"""Command-line front end: ``errgen``, ``solve``, ``simulate``, ``sweep`` and ``verify``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error, 3 solver non-convergence.
``AOI_COOPT_THREADS`` caps the worker pool used by ``sweep``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import errmodel
from .baselines import BaselineSpec, parse_baseline
from .core import SourceConfig, parse_transmission

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NOCONV = 0, 1, 2, 3

log = logging.getLogger("aoi_coopt")


class UsageError(Exception):
    pass


# helpers ---------------------------------------------------------------------------------------------


def _emit(text: str, out) -> None:
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        try:
            Path(out).write_text(text)
        except OSError as exc:
            raise UsageError(f"cannot write {out}: {exc.strerror}") from None


def _check_writable(out) -> None:
    if out is None or str(out) == "-":
        return
    parent = Path(out).resolve().parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise UsageError(f"cannot write {out}: directory {parent} is not writable")


def _check_readable(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def _jakes_from_args(a) -> errmodel.JakesParams:
    try:
        if a.fd is not None:
            return errmodel.JakesParams(b=a.b, fd=a.fd, ts=a.ts, sigma2=a.sigma2)
        return errmodel.JakesParams.from_velocity(a.v, a.fc, ts=a.ts, b=a.b, sigma2=a.sigma2)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _add_jakes_flags(p, delta_bound=50, B=10):
    p.add_argument("--b", type=float, default=1.0, help="process variance")
    p.add_argument("--v", type=float, default=15.0, help="velocity [m/s]")
    p.add_argument("--fc", type=float, default=2e9, help="carrier frequency [Hz]")
    p.add_argument("--fd", type=float, default=None, help="Doppler shift [Hz] (overrides --v/--fc)")
    p.add_argument("--ts", type=float, default=1e-3, help="sampling period [s]")
    p.add_argument("--sigma2", type=float, default=1e-6, help="observation-noise variance")
    p.add_argument("--B", type=int, default=B, help="buffer size")
    p.add_argument("--delta-bound", type=int, default=delta_bound, help="AoI truncation")


def _source(a) -> SourceConfig:
    if getattr(a, "table", None):
        table = errmodel.load_csv(_check_readable(a.table))
    else:
        table = errmodel.jakes_error_table(_jakes_from_args(a), a.B, a.delta_bound)
    return SourceConfig(table, parse_transmission(a.trans, table.B))


def _split_policies(text: str) -> list[str]:
    """Split ``tifl,periodic:tp=4,l=1`` at commas that start a new policy name."""
    out: list[str] = []
    for tok in filter(None, (t.strip() for t in text.split(","))):
        if out and ":" not in tok and "=" in tok:
            out[-1] += "," + tok
        else:
            out.append(tok)
    return out


def _threads() -> int:
    raw = os.environ.get("AOI_COOPT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"AOI_COOPT_THREADS must be an integer, got {raw!r}") from None


# errgen ----------------------------------------------------------------------------------------------


def cmd_errgen(a) -> int:
    _check_writable(a.out)
    if a.kind == "jakes":
        p = _jakes_from_args(a)
        table = errmodel.jakes_error_table(p, a.B, a.delta_bound)
        notes = [f"jakes b={p.b!r} fd={p.fd!r} ts={p.ts!r} sigma2={p.sigma2!r}", f"B={a.B}"]
    elif a.kind == "constant":
        table = errmodel.synthetic_table("constant", a.B, a.delta_bound, a.c)
        notes = [f"constant c={a.c!r}", f"B={a.B}"]
    else:
        table = errmodel.synthetic_table("linear", a.B, a.delta_bound, a.slope)
        notes = [f"linear slope={a.slope!r}", f"B={a.B}"]
    errmodel.save_csv(table, a.out, notes)
    v = table.values
    mono = bool(np.all(np.diff(v, axis=1) <= 1e-12))
    print(f"rows={table.delta_bound + 1} B={table.B} min={table.min:.6g} max={table.max:.6g} "
          f"non-increasing-in-l={'yes' if mono else 'no'}", file=sys.stderr)
    return EXIT_OK


# solve -----------------------------------------------------------------------------------------------


def cmd_solve(a) -> int:
    _check_writable(a.out)
    if a.what == "multi":
        from .multi import MultiConfig, dual_ascent

        cfg = MultiConfig.from_json(_check_readable(a.config))
        pol = dual_ascent(cfg)
        if a.out:
            _emit(pol.dumps() + "\n", a.out)
        print(f"lambda_star={pol.lam!r} iterations={pol.iterations} dual_bound={pol.dual_bound()!r}")
        return EXIT_OK
    cfg = _source(a)
    if a.what == "tifl":
        from .tifl import solve_tifl

        pol = solve_tifl(cfg)
        if a.out:
            _emit(pol.dumps() + "\n", a.out)
        print(f"beta_star={pol.beta_star!r} l_star={pol.l_star} b_star={pol.b_star}")
    else:
        from .tvfl import solve_tvfl

        pol = solve_tvfl(cfg)
        if a.out:
            _emit(pol.dumps() + "\n", a.out)
        print(f"p_bar={pol.p_bar!r} rounds={len(pol.history)}")
    return EXIT_OK


# simulate / sweep ------------------------------------------------------------------------------------


def _single_policy(name: str, cfg: SourceConfig, policy_file=None):
    if name == "tifl":
        from .tifl import TiflPolicy, solve_tifl

        if policy_file:
            return TiflPolicy.from_json(json.loads(Path(policy_file).read_text()), cfg)
        return solve_tifl(cfg)
    if name == "tvfl":
        from .tvfl import TvflPolicy, solve_tvfl

        if policy_file:
            pol = TvflPolicy.from_json(json.loads(Path(policy_file).read_text()))
            if (pol.delta_bound, pol.B) != (cfg.delta_bound, cfg.B):
                raise UsageError("policy file dimensions do not match the table")
            return pol
        return solve_tvfl(cfg)
    spec = parse_baseline(name)
    if spec.kind == "maf":
        raise UsageError("maf is a multi-source policy; use --config")
    return spec


def _run_single(name, cfg, horizon, seed, param, policy_file=None):
    from .sim import simulate_single

    res = simulate_single(_single_policy(name, cfg, policy_file), cfg, horizon, seed=seed)
    res.policy = name
    return res.row(param)


def _run_multi(names, cfg, horizon, seed, param, policy_file=None):
    from .multi import MultiPolicy, dual_ascent
    from .sim import simulate_multi

    pol = None
    rows = []
    for name in names:
        if name in ("netgain", "net_gain", "lowerbound", "relaxed"):
            if pol is None:
                pol = (MultiPolicy.from_json(json.loads(Path(policy_file).read_text()), cfg) if policy_file
                       else dual_ascent(cfg))
            kind = "net_gain" if name.startswith("net") else "relaxed"
            res = simulate_multi(kind, cfg, pol, horizon=horizon, seed=seed)
        else:
            spec = parse_baseline(name)
            if spec.kind != "maf":
                raise UsageError(f"{name} is a single-source policy")
            res = simulate_multi(spec, cfg, horizon=horizon, seed=seed)
        res.policy = name
        rows.append(res.row(param))
    return rows


MULTI_NAMES = ("netgain", "net_gain", "lowerbound", "relaxed")


def _is_multi(name: str) -> bool:
    return name in MULTI_NAMES or name.startswith("maf")


def cmd_simulate(a) -> int:
    from .sim import write_results

    _check_writable(a.out)
    names = _split_policies(a.policy)
    if all(_is_multi(n) for n in names):
        if not a.config:
            raise UsageError("multi-source policies need --config")
        from .multi import MultiConfig

        cfg = MultiConfig.from_json(_check_readable(a.config))
        rows = _run_multi(names, cfg, a.horizon, a.seed, "", a.policy_file)
    elif any(_is_multi(n) for n in names):
        raise UsageError("cannot mix single- and multi-source policies")
    else:
        cfg = _source(a)
        rows = [_run_single(n, cfg, a.horizon, a.seed, "", a.policy_file) for n in names]
    write_results(rows, a.out or "-")
    return EXIT_OK


def _sweep_values(a):
    if a.param in ("alpha",):
        steps = a.steps or 10
        return [float(x) for x in np.linspace(a.start, a.stop, steps)]
    lo, hi = int(round(a.start)), int(round(a.stop))
    if a.steps:
        return sorted({int(round(x)) for x in np.linspace(lo, hi, a.steps)})
    return list(range(lo, hi + 1))


def _sweep_point(task):
    param, value, names, opts = task
    if param in ("alpha", "buffer"):
        from .core import TransmissionModel

        table = opts["table"]
        if param == "buffer":
            table = table.truncate(int(value))
            alpha = opts["alpha"]
        else:
            alpha = value
        trans = TransmissionModel.det(alpha, table.B)
        try:
            cfg = SourceConfig(table, trans)
        except ValueError as exc:
            raise UsageError(f"{param}={value}: {exc}") from None
        return [_run_single(n, cfg, opts["horizon"], opts["seed"], repr(value)) for n in names]
    from .multi import three_type_config

    if param == "sources":
        cfg = three_type_config(1, B=opts["B"], delta_bound=opts["delta_bound"], M=int(value), N=opts["N"])
    else:
        cfg = three_type_config(int(value), B=opts["B"], delta_bound=opts["delta_bound"])
    return _run_multi(names, cfg, opts["horizon"], opts["seed"], repr(value))


def cmd_sweep(a) -> int:
    from .sim import write_results

    _check_writable(a.out)
    names = _split_policies(a.policies)
    values = _sweep_values(a)
    if not values:
        raise UsageError("empty sweep range")
    opts = {"horizon": a.horizon, "seed": a.seed, "B": a.B, "delta_bound": a.delta_bound, "N": a.N,
            "alpha": a.alpha}
    if a.param in ("alpha", "buffer"):
        if any(_is_multi(n) for n in names):
            raise UsageError(f"sweep {a.param} takes single-source policies")
        for n in names:
            if n not in ("tifl", "tvfl"):
                parse_baseline(n)
        opts["table"] = (errmodel.load_csv(_check_readable(a.table)) if a.table
                         else errmodel.jakes_error_table(_jakes_from_args(a), a.B, a.delta_bound))
        if a.param == "buffer" and max(values) > opts["table"].B:
            raise UsageError(f"buffer sweep reaches B={max(values)} but the table has B={opts['table'].B}")
    else:
        if not all(_is_multi(n) for n in names):
            raise UsageError(f"sweep {a.param} takes multi-source policies")
    tasks = [(a.param, v, names, opts) for v in values]
    workers = min(_threads(), len(tasks))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(t) for t in tasks]
    rows = [r for chunk in results for r in chunk]
    write_results(rows, a.out or "-")
    return EXIT_OK


# verify ----------------------------------------------------------------------------------------------


def _random_small_config(rng: np.random.Generator):
    from .core import TransmissionModel
    from .errmodel import InferenceErrorTable

    B = int(rng.integers(1, 3))
    db = 8
    alpha = float(rng.choice([0.5, 1.0, 1.5, 2.0, 3.0]))
    trans = TransmissionModel.det(alpha, B)
    kind = int(rng.integers(3))
    if kind == 0:
        v = rng.uniform(0, 1, (db + 1, B))
    elif kind == 1:
        v = np.sort(rng.uniform(0, 1, (db + 1, B)), axis=0)
    else:
        v = rng.integers(0, 5, (db + 1, B)).astype(float)
    return SourceConfig(InferenceErrorTable(v), trans)


def cmd_verify(a) -> int:
    from . import oracle
    from .index import GammaTable, gamma
    from .multi import knapsack_select
    from .tifl import solve_tifl
    from .tvfl import solve_tvfl

    if a.table:
        errmodel.load_csv(_check_readable(a.table))
        print(f"table {a.table}: ok")
    rng = np.random.default_rng(a.seed)
    failures = 0

    def report(name, worst, tol):
        nonlocal failures
        ok = worst <= tol
        failures += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: worst residual {worst:.3g} (tolerance {tol:g})")

    if a.entropy:
        worst = -np.inf
        for _ in range(a.trials):
            j = oracle.random_joint(rng, K=4, ny=int(rng.integers(2, 4)), nv=2)
            for loss in ("quadratic", "log"):
                for delta in range(0, 2):
                    for l in range(1, 4 - delta):
                        worst = max(worst, oracle.l_conditional_entropy(j, delta, l + 1, loss)
                                    - oracle.l_conditional_entropy(j, delta, l, loss))
        report("L-conditional entropy non-increasing in l", max(worst, 0.0), 1e-12)
        return EXIT_OK if failures == 0 else EXIT_VERIFY

    worst_tv = worst_ord = worst_g = 0.0
    for _ in range(a.trials):
        cfg = _random_small_config(rng)
        best = oracle.exhaustive_single_source(cfg)
        tv = solve_tvfl(cfg)
        ti = solve_tifl(cfg)
        worst_tv = max(worst_tv, abs(tv.p_bar - best) / max(1.0, abs(best)))
        worst_ord = max(worst_ord, tv.p_bar - ti.beta_star)
        gt = GammaTable(cfg.table, cfg.trans)
        for _ in range(5):
            l, d = int(rng.integers(1, cfg.B + 1)), int(rng.integers(1, cfg.B + 1))
            delta = int(rng.integers(0, cfg.delta_bound + 1))
            worst_g = max(worst_g, abs(gt(l, delta, d) - gamma(cfg.table, cfg.trans, l, delta, d)))
    report("policy iteration vs exhaustive policy search", worst_tv, 1e-6)
    report("time-variant average <= time-invariant average", max(worst_ord, 0.0), 1e-9)
    report("index table vs direct index", worst_g, 0.0)
    mism = 0
    for _ in range(a.trials * 10):
        M = int(rng.integers(1, 5))
        N = int(rng.integers(0, 7))
        gains = [np.concatenate(([0.0], rng.integers(-3, 6, int(rng.integers(1, 5))).astype(float)))
                 for _ in range(M)]
        mism += knapsack_select(gains, N) != oracle.exhaustive_knapsack(gains, N)
    report("knapsack DP vs enumeration (mismatches)", float(mism), 0.0)
    return EXIT_OK if failures == 0 else EXIT_VERIFY


# parser ----------------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aoi-coopt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("errgen", help="generate an inference-error table CSV")
    gk = g.add_subparsers(dest="kind", required=True)
    j = gk.add_parser("jakes", help="linear-MMSE error of a Jakes fading process")
    _add_jakes_flags(j)
    c = gk.add_parser("constant", help="err = c everywhere")
    c.add_argument("--c", type=float, required=True)
    li = gk.add_parser("linear", help="err = slope * delta")
    li.add_argument("--slope", type=float, default=1.0)
    for p in (c, li):
        p.add_argument("--B", type=int, required=True)
        p.add_argument("--delta-bound", type=int, required=True)
    for p in (j, c, li):
        p.add_argument("--out", default="-", help="output CSV path ('-' for stdout)")

    s = sub.add_parser("solve", help="solve for an optimal policy")
    sk = s.add_subparsers(dest="what", required=True)
    for name in ("tifl", "tvfl"):
        p = sk.add_parser(name)
        p.add_argument("--table", help="error table CSV (default: Jakes table from the flags below)")
        p.add_argument("--trans", default="det:alpha=0.2", help="det:alpha=<a> or table:<json>")
        _add_jakes_flags(p)
        p.add_argument("--out", help="write the policy JSON here ('-' for stdout)")
    p = sk.add_parser("multi")
    p.add_argument("--config", required=True, help="multi-source JSON config")
    p.add_argument("--out", help="write the policy JSON here ('-' for stdout)")

    m = sub.add_parser("simulate", help="simulate policies and write a results CSV")
    m.add_argument("--policy", required=True,
                   help="comma list: tifl, tvfl, zero-wait:l=1, periodic:tp=4,l=1, netgain, lowerbound, maf:l=B")
    m.add_argument("--table")
    m.add_argument("--trans", default="det:alpha=0.2")
    _add_jakes_flags(m)
    m.add_argument("--config", help="multi-source JSON config")
    m.add_argument("--policy-file", help="previously solved policy JSON")
    m.add_argument("--horizon", type=int, default=100_000)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", default="-")

    w = sub.add_parser("sweep", help="solve and simulate over a parameter range")
    w.add_argument("param", choices=("alpha", "buffer", "sources", "scale"))
    w.add_argument("--from", dest="start", type=float, required=True)
    w.add_argument("--to", dest="stop", type=float, required=True)
    w.add_argument("--steps", type=int, default=None)
    w.add_argument("--policies", default=None)
    w.add_argument("--table")
    w.add_argument("--alpha", type=float, default=0.2, help="transmission scale for buffer sweeps")
    w.add_argument("--N", type=int, default=100, help="channels for source sweeps")
    _add_jakes_flags(w)
    w.add_argument("--horizon", type=int, default=100_000)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out", default="-")

    v = sub.add_parser("verify", help="cross-check solvers against brute-force oracles")
    v.add_argument("--trials", type=int, default=20)
    v.add_argument("--entropy", action="store_true", help="check entropy monotonicity only")
    v.add_argument("--table", help="also validate this table CSV")
    v.add_argument("--seed", type=int, default=0)
    return ap


DEFAULT_POLICIES = {"alpha": "tifl,tvfl,zero-wait:l=1,periodic:tp=4,l=1",
                    "buffer": "tifl,tvfl,zero-wait:l=1,periodic:tp=4,l=1",
                    "sources": "netgain,maf:l=1,maf:l=B",
                    "scale": "netgain,lowerbound"}


def main(argv=None) -> int:
    from .multi import NotConverged as MultiNotConverged
    from .tvfl import NotConverged as TvflNotConverged

    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if a.cmd == "sweep" and a.policies is None:
        a.policies = DEFAULT_POLICIES[a.param]
    handlers = {"errgen": cmd_errgen, "solve": cmd_solve, "simulate": cmd_simulate, "sweep": cmd_sweep,
                "verify": cmd_verify}
    t0 = time.perf_counter()
    try:
        code = handlers[a.cmd](a)
    except (TvflNotConverged, MultiNotConverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    except (UsageError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    log.info("%s finished in %.2fs", a.cmd, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
