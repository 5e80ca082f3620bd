"""Command-line interface.

    nestedot <group> <command> [args] [--seed S] [--out FILE] [--format json|csv] [--config FILE]

Exit codes: 0 success, 2 validation error (JSON diagnostic on stderr),
64 usage error such as an unknown flag, 66 missing input file.
Output is deterministic: rerunning the same argv gives identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .measures import (
    SOLVER_TOL,
    WEIGHT_TOL,
    DiscreteMeasure,
    InvalidMeasureError,
    NestedMeasure,
    ProcessTree,
    load,
    measure_from_dict,
    measure_to_dict,
    process_to_dict,
)

EX_OK = 0
EX_VALIDATION = 2
EX_USAGE = 64
EX_NOINPUT = 66

THREADS_ENV = "NESTEDOT_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# output helpers


def _jsonable(x: Any) -> Any:
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return x


def _tolerances(args, **extra) -> dict:
    tol = {"weight": WEIGHT_TOL, "solver": SOLVER_TOL}
    if getattr(args, "merge_tol", None) is not None:
        tol["mergeTol"] = args.merge_tol
    tol.update(extra)
    return tol


def _envelope(args, result: Any, tolerances: dict, seeded: bool = False) -> dict:
    out = {
        "command": args.command_name,
        "version": __version__,
        "tolerances": tolerances,
        "result": result,
    }
    if seeded:
        out["seed"] = args.seed if args.seed is not None else 0
        out["seedSource"] = "argv" if args.seed is not None else "default"
    return out


def _emit_json(args, payload: dict) -> None:
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True, allow_nan=False) + "\n"
    _write(args, text)


def _emit_csv(args, meta: dict, rows: Sequence[Sequence[Any]]) -> None:
    buf = io.StringIO()
    for k in sorted(meta):
        buf.write(f"# {k}={json.dumps(_jsonable(meta[k]), sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    _write(args, buf.getvalue())


def _write(args, text: str) -> None:
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _read(path: str):
    if not Path(path).is_file():
        raise FileNotFoundError(path)
    return load(path)


def _read_json(path: str) -> dict:
    if not Path(path).is_file():
        raise FileNotFoundError(path)
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _expect(obj, kind, path: str):
    if not isinstance(obj, kind):
        names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ValueError(f"{path}: expected {names}, got {type(obj).__name__}")
    return obj


# --------------------------------------------------------------------------
# commands


def cmd_ot(args) -> None:
    from .otcore import mc, w2

    mu = _expect(_read(args.mu), DiscreteMeasure, args.mu)
    nu = _expect(_read(args.nu), DiscreteMeasure, args.nu)
    if args.op == "w2":
        value, sol = w2(mu, nu)
        res = {"value": value, "w2": value, "w2Squared": sol.value}
    else:
        value, sol = mc(mu, nu)
        res = {"value": value, "mc": value}
    res.update(
        coupling=sol.matrix,
        dualPhi=sol.dual_phi,
        dualPsi=sol.dual_psi,
        dualityGap=sol.duality_gap(),
        marginalError=sol.coupling.marginal_error(),
    )
    _emit_json(args, _envelope(args, res, _tolerances(args)))


def cmd_nested(args) -> None:
    from .nested import nested_mc, nested_w2_report

    kinds = (DiscreteMeasure, NestedMeasure)
    P = _expect(_read(args.p), kinds, args.p)
    Q = _expect(_read(args.q), kinds, args.q)
    if args.op == "w2":
        r = nested_w2_report(P, Q)
        res = {
            "value": r.value,
            "w2": r.value,
            "w2Squared": r.squared,
            "identitySquared": r.identity_squared,
            "identityResidual": r.identity_residual,
            "topCoupling": r.solution.matrix,
        }
    else:
        value, sol, _ = nested_mc(P, Q)
        res = {"value": value, "mc": value, "topCoupling": sol.matrix}
    _emit_json(args, _envelope(args, res, _tolerances(args)))


def _map_summary(bmap) -> Optional[dict]:
    if bmap is None:
        return None
    return {
        "adapted": bmap.adapted,
        "injective": bmap.injective,
        "resolvedInjective": bmap.resolved_injective,
        "biAdapted": bmap.bi_adapted,
        "stages": [
            {"sources": s, "targets": t} for s, t in zip(bmap.sources, bmap.targets)
        ],
    }


def cmd_adapted(args) -> None:
    from .adapted import (
        adapted_law,
        aw2,
        check_bicausal,
        extract_biadapted_monge,
        path_coupling,
        plain_w2,
        verify_isometry,
    )

    if args.op == "example":
        _example(args)
        return
    A = _expect(_read(args.a), ProcessTree, args.a)
    if args.op == "canon":
        canon = adapted_law(A, args.merge_tol)
        _emit_json(args, _envelope(args, {"tree": process_to_dict(canon)}, _tolerances(args)))
        return
    B = _expect(_read(args.b), ProcessTree, args.b)
    if args.merge_tol > 0:
        A, B = adapted_law(A, args.merge_tol), adapted_law(B, args.merge_tol)
    res = aw2(A, B)
    ok, msg = check_bicausal(path_coupling(res, A, B), A, B)
    out = {
        "value": res.value,
        "aw2": res.value,
        "aw2Squared": res.squared,
        "plainW2": plain_w2(A, B),
        "isometryResidual": verify_isometry(A, B),
        "bicausal": ok,
        "bicausalViolation": msg,
        "map": _map_summary(extract_biadapted_monge(A, B, res)),
    }
    _emit_json(args, _envelope(args, out, _tolerances(args)))


def _example(args) -> None:
    from .brenier import reproduce_example

    rep = reproduce_example(args.n, args.m).to_dict()
    rep.pop("seconds")  # wall time would break byte-identical reruns
    _emit_json(args, _envelope(args, rep, _tolerances(args)))


def cmd_example(args) -> None:
    _example(args)


def cmd_convexity(args) -> None:
    from .convexity import mc_convexity_residual, mc_order_test, mc_subdifferential_pairs, mc_transform, table_from_dict

    if args.op == "transform":
        phi = table_from_dict(_read_json(args.table))
        if args.eval:
            d = _read_json(args.eval)
            evals = [measure_from_dict(x) for x in (d["measures"] if isinstance(d, dict) else d)]
        else:
            evals = list(phi.supports)
        conj = mc_transform(phi, evals)
        rep = mc_convexity_residual(phi)
        out = {
            "transform": conj.values,
            "biconjugate": rep.biconjugate,
            "residual": rep.residual,
            "inequalityHolds": rep.inequality_holds,
            "tripleResidual": rep.triple_residual,
            "fenchelYoungViolation": rep.fenchel_young_violation,
            "subdifferentialPairs": mc_subdifferential_pairs(phi),
        }
        _emit_json(args, _envelope(args, out, _tolerances(args, subdifferential=1e-9)))
        return
    kinds = (DiscreteMeasure, NestedMeasure)
    P = _expect(_read(args.p), kinds, args.p)
    Q = _expect(_read(args.q), kinds, args.q)
    v = mc_order_test(P, Q, args.probes, _seed(args))
    out = {
        "verdict": v.label,
        "gap": v.gap,
        "probesUsed": v.probes,
        "witness": None if v.witness is None else measure_to_dict(v.witness),
    }
    _emit_json(args, _envelope(args, out, _tolerances(args, order=1e-9), seeded=True))


def cmd_regularity(args) -> None:
    from .regularity import (
        FW_GAP_TOL,
        TAU_ZERO,
        SamplerSpec,
        TargetSpec,
        monge_rate_experiment,
        solve_tau,
        tau_R,
    )

    tol = _tolerances(args, fwGap=FW_GAP_TOL, tauZero=TAU_ZERO)
    if args.op == "tau":
        mu = _expect(_read(args.mu), DiscreteMeasure, args.mu)
        if args.nu is not None:
            nu = _expect(_read(args.nu), DiscreteMeasure, args.nu)
            r = solve_tau(mu, nu, args.cost)
            out = {"tau": r.value, "fwGap": r.gap, "iterations": r.iterations, "coupling": r.coupling, "monge": r.is_zero}
            _emit_json(args, _envelope(args, out, tol))
            return
        if args.radius is None:
            raise ValueError("give a target measure or --radius for the tau_R estimate")
        r = tau_R(mu, args.radius, args.targets, _seed(args))
        out = {"tauR": r.value, "argmax": r.argmax, "probes": [list(p) for p in r.probes], "lowerBound": True}
        _emit_json(args, _envelope(args, out, tol, seeded=True))
        return

    sampler = SamplerSpec(kind=args.sampler, grid=args.grid, dim=args.dim)
    targets = TargetSpec(kind=args.target_kind, atoms=args.atoms, radius=args.radius or 3.0)
    workers = args.workers or int(os.environ.get(THREADS_ENV, "1") or 1)
    res = monge_rate_experiment(sampler, args.samples, targets, args.targets, _seed(args), workers=workers)
    meta = {
        "command": args.command_name,
        "version": __version__,
        "seed": _seed(args),
        "tolerances": tol,
        "rate": res.rate,
        "sampler": vars(sampler),
        "targets": vars(targets),
    }
    if args.format == "json":
        out = {"rate": res.rate, "records": [vars(r) for r in res.records]}
        _emit_json(args, _envelope(args, out, tol, seeded=True) | {"sampler": vars(sampler), "targetSpec": vars(targets)})
    else:
        _emit_csv(args, meta, res.to_csv_rows())


def cmd_sample(args) -> None:
    from .samplers import QSpec, nested_occupation, occupation_measure, sample_sheet

    seed = _seed(args)
    if args.op == "qwiener":
        s = sample_sheet(1, QSpec.power_law(args.modes), args.grid, seed, args.index)
    else:
        s = sample_sheet(args.parameters, args.dim, args.grid, seed, args.index)
    if args.op == "occupation":
        if args.blocks:
            m = nested_occupation(s, [int(b) for b in args.blocks.split(",")])
        else:
            m = occupation_measure(s)
        _emit_json(args, _envelope(args, {"measure": measure_to_dict(m), "index": args.index}, _tolerances(args), seeded=True))
        return
    if args.format == "csv" and s.N == 1:
        meta = {"command": args.command_name, "version": __version__, "seed": seed, "index": args.index, "grid": args.grid, "tolerances": _tolerances(args)}
        rows = [["t"] + [f"x{k + 1}" for k in range(s.dim)]]
        for t, v in zip(s.grid, s.values):
            rows.append([repr(float(t))] + [repr(float(x)) for x in v])
        _emit_csv(args, meta, rows)
        return
    out = {"parameters": s.N, "grid": s.m, "dim": s.dim, "index": args.index, "values": s.values}
    if s.q is not None:
        out["eigenvalues"] = s.q.eigenvalues
        out["trace"] = s.q.trace
    _emit_json(args, _envelope(args, out, _tolerances(args), seeded=True))


# --------------------------------------------------------------------------
# parser


def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="64-bit seed (default 0, logged)")
    p.add_argument("--out", default=None, help="output file (default stdout)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--config", default=None, help="JSON file whose keys mirror the flags")
    return p


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    common = _common()
    parser = _Parser(prog="nestedot", description="Nested and adapted optimal transport toolkit.")
    parser.add_argument("--version", action="version", version=f"nestedot {__version__}")
    groups = parser.add_subparsers(dest="group", required=True, parser_class=_Parser)
    leaves: dict[str, argparse.ArgumentParser] = {}

    def leaf(sub, name: str, func, group: str, **kw) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], **kw)
        full = f"{group} {name}"
        p.set_defaults(func=func, command_name=full, op=name)
        leaves[full] = p
        return p

    g = groups.add_parser("ot", help="plain W2 / MC between discrete measures")
    sub = g.add_subparsers(dest="op_", required=True, parser_class=_Parser)
    for op in ("w2", "mc"):
        p = leaf(sub, op, cmd_ot, "ot")
        p.add_argument("mu")
        p.add_argument("nu")

    g = groups.add_parser("nested", help="iterated W2 / MC between nested measures")
    sub = g.add_subparsers(dest="op_", required=True, parser_class=_Parser)
    for op in ("w2", "mc"):
        p = leaf(sub, op, cmd_nested, "nested")
        p.add_argument("p")
        p.add_argument("q")

    g = groups.add_parser("adapted", help="adapted W2, canonical adapted laws")
    sub = g.add_subparsers(dest="op_", required=True, parser_class=_Parser)
    p = leaf(sub, "aw2", cmd_adapted, "adapted")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--merge-tol", type=float, default=0.0)
    p = leaf(sub, "canon", cmd_adapted, "adapted")
    p.add_argument("a")
    p.add_argument("--merge-tol", type=float, default=0.0)
    p = leaf(sub, "example", cmd_adapted, "adapted")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--m", type=int, default=None)

    g = groups.add_parser("convexity", help="MC-transform and MC-order")
    sub = g.add_subparsers(dest="op_", required=True, parser_class=_Parser)
    p = leaf(sub, "transform", cmd_convexity, "convexity")
    p.add_argument("table", help="JSON functional table {supports, values}")
    p.add_argument("--eval", default=None, help="JSON list of measures to evaluate at")
    p = leaf(sub, "order", cmd_convexity, "convexity")
    p.add_argument("p")
    p.add_argument("q")
    p.add_argument("--probes", type=int, default=64)

    g = groups.add_parser("regularity", help="tau functional and Monge-rate experiments")
    sub = g.add_subparsers(dest="op_", required=True, parser_class=_Parser)
    p = leaf(sub, "tau", cmd_regularity, "regularity")
    p.add_argument("mu")
    p.add_argument("nu", nargs="?", default=None)
    p.add_argument("--cost", choices=("sq", "inner"), default="sq")
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--targets", type=int, default=32)
    p = leaf(sub, "experiment", cmd_regularity, "regularity")
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--targets", type=int, default=5)
    p.add_argument("--sampler", choices=("brownian", "sheet", "qwiener"), default="brownian")
    p.add_argument("--grid", type=int, default=50)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--target-kind", choices=("random", "dirac"), default="random")
    p.add_argument("--atoms", type=int, default=5)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--workers", type=int, default=None, help=f"threads (default ${THREADS_ENV} or 1)")
    p.set_defaults(format="csv")

    g = groups.add_parser("sample", help="seeded sheet / Q-Wiener / occupation samples")
    sub = g.add_subparsers(dest="op_", required=True, parser_class=_Parser)
    for op in ("sheet", "qwiener", "occupation"):
        p = leaf(sub, op, cmd_sample, "sample")
        p.add_argument("--grid", type=int, default=64)
        p.add_argument("--index", type=int, default=0)
        if op == "qwiener":
            p.add_argument("--modes", type=int, default=16)
        else:
            p.add_argument("--parameters", type=int, default=1)
            p.add_argument("--dim", type=int, default=1)
        if op == "occupation":
            p.add_argument("--blocks", default=None, help="comma-separated block counts, one per axis but the last")

    g = groups.add_parser("example", help="worked examples")
    sub = g.add_subparsers(dest="op_", required=True, parser_class=_Parser)
    p = leaf(sub, "brenier-failure", cmd_example, "example")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--m", type=int, default=None)

    return parser, leaves


def _apply_config(parser, leaves, argv, args):
    cfg = _read_json(args.config)
    if not isinstance(cfg, dict):
        raise ValueError(f"{args.config}: config must be a JSON object")
    known = set(vars(args))
    unknown = sorted(k for k in cfg if k.replace("-", "_") not in known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    leaves[args.command_name].set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    return parser.parse_args(argv)


def _diagnostic(kind: str, message: str, **extra) -> None:
    sys.stderr.write(json.dumps(_jsonable({"error": kind, "message": message, **extra}), sort_keys=True) + "\n")


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, leaves = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            args = _apply_config(parser, leaves, argv, args)
        args.func(args)
    except UsageError as e:
        _diagnostic("usage", str(e))
        return EX_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except FileNotFoundError as e:
        _diagnostic("file-not-found", str(e.filename or e))
        return EX_NOINPUT
    except InvalidMeasureError as e:
        _diagnostic("validation", "invalid measure", violations=e.violations)
        return EX_VALIDATION
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
        _diagnostic("validation", str(e))
        return EX_VALIDATION
    return EX_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
