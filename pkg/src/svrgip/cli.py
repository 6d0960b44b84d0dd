"""Command line interface: ``svrgip {generate,solve,study,verify}``.

Every artifact is written atomically (temporary file, then rename) and
carries a provenance block with the package version and the fully resolved
configuration.  CSV files hold it in a leading ``#`` comment line.  Data
files contain no timestamps, so identical inputs give identical bytes.

Exit codes: 0 success, 1 usage or validation error, 2 divergence or a
failed verification.
"""

from __future__ import annotations

import argparse
import ast
import csv
import functools
import io
import json
import math
import operator as _op
import os
import subprocess
import sys
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .linop import InvalidOperatorError, TruncationRule, save_operator
from .oracle import SUITES, run_suite
from .problems import PROBLEMS, InverseProblem, make_problem
from .solvers import (
    METHODS,
    DivergenceError,
    SolverConfig,
    StoppingRule,
    compute_step_constants,
    default_truncation,
    solve,
)
from .study import CALIBRATED_C1, table_cell

__all__ = ["run_cli", "main", "resolve_c0", "load_study_spec", "OUTPUT_ENV"]

OUTPUT_ENV = "SVRGIP_OUTPUT_DIR"
TRAJECTORY_COLUMNS = ("epoch", "rel_error", "residual")
STUDY_COLUMNS = ("problem", "method", "nu", "eps", "c0", "M", "stopping", "reps",
                 "e_star", "k_star", "plateau", "lim_e", "e_star_sd")


class UsageError(Exception):
    """Bad command line; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- provenance

@functools.lru_cache(maxsize=1)
def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5, check=True).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        out = ""
    return f"svrgip {__version__}" + (f" ({out})" if out else "")


def _provenance(command: str, config: dict) -> dict:
    return {"tool": "svrgip", "version": version_string(), "command": command, "config": config}


# ---------------------------------------------------------------- atomic I/O

def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path: Path, obj) -> None:
    _atomic_write(path, _dumps(_finite(obj)).encode())


def _finite(obj):
    # NaN/inf become null so reports stay valid JSON
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else ""
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows, provenance: dict) -> None:
    buf = io.StringIO()
    buf.write("# " + json.dumps(_finite(provenance), sort_keys=True, default=_json_default) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        values = [row.get(c) for c in columns] if isinstance(row, dict) else row
        w.writerow([_cell(v) for v in values])
    _atomic_write(path, buf.getvalue().encode())


def _trajectory_rows(epochs, errors, residuals):
    return [[round(float(e), 3), float(r), float(s)] for e, r, s in zip(epochs, errors, residuals)]


# ---------------------------------------------------------------- c0 expressions

_BINOPS = {ast.Add: _op.add, ast.Sub: _op.sub, ast.Mult: _op.mul, ast.Div: _op.truediv, ast.Pow: _op.pow}
_UNARY = {ast.USub: _op.neg, ast.UAdd: _op.pos}


def c0_symbols(problem: InverseProblem, M: int) -> dict:
    op = problem.operator
    k = compute_step_constants(op, M)
    return {"c": 1.0 / k.L, "L": k.L, "normA": float(op.op_norm), "C0bar": k.C0_bar, "C0": k.C0,
            "n": float(op.n), "M": float(M)}


def resolve_c0(expr, symbols: dict) -> float:
    """Evaluate a step-size expression such as ``c/4``, ``normA^-2`` or ``0.5*C0bar``.

    Only numbers, the names in ``symbols`` and ``+ - * / ^ **`` are allowed.
    """
    if isinstance(expr, (int, float)):
        value = float(expr)
    else:
        text = str(expr).strip().replace("^", "**")
        try:
            tree = ast.parse(text, mode="eval")
        except SyntaxError:
            raise ValueError(f"cannot parse c0 expression {expr!r}") from None
        value = float(_eval(tree.body, symbols, expr))
    if not (math.isfinite(value) and value > 0):
        raise ValueError(f"c0 expression {expr!r} must resolve to a positive number, got {value!r}")
    return value


def _eval(node, symbols, expr):
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return node.value
    if isinstance(node, ast.Name):
        if node.id not in symbols:
            raise ValueError(f"unknown symbol {node.id!r} in c0 expression {expr!r}; "
                             f"known: {', '.join(sorted(symbols))}")
        return symbols[node.id]
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval(node.left, symbols, expr), _eval(node.right, symbols, expr))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
        return _UNARY[type(node.op)](_eval(node.operand, symbols, expr))
    raise ValueError(f"unsupported construct in c0 expression {expr!r}")


# ---------------------------------------------------------------- shared helpers

DEFAULT_C0 = {"landweber": "normA^-2", "svrg": "c", "rsvrg": "c"}


def _stopping(spec: Optional[dict], method: str) -> StoppingRule:
    spec = dict(spec or {})
    kind = spec.pop("kind", "discrepancy" if method == "landweber" else "max_epochs")
    if kind == "a_priori" and "exponent" not in spec:
        raise ValueError("a_priori stopping needs an exponent (or use nu via the solve command)")
    known = {"tau", "C", "exponent", "window", "tol", "lm_reference"}
    extra = set(spec) - known
    if extra:
        raise ValueError(f"unknown stopping fields {sorted(extra)}")
    return StoppingRule(kind=kind, **spec)


def _truncation(problem: InverseProblem, c1: Optional[float], a: Optional[float],
                b: Optional[float]) -> TruncationRule:
    if a is not None:
        return TruncationRule(a=a, b=1.0 / (1 + 2 * (problem.nu + problem.nu_e)) if b is None else b)
    if c1 is None:
        c1 = CALIBRATED_C1.get(problem.name, 1.0)
    return default_truncation(problem, c1=c1)


def _output_dir(arg: Optional[str]) -> Path:
    return Path(arg or os.environ.get(OUTPUT_ENV) or ".")


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    prob = make_problem(args.problem, args.size, nu=args.nu, eps=args.eps, seed=args.seed, nu_e=args.nu_e)
    out = _output_dir(args.out) / (args.name or f"{args.problem}_n{args.size}_nu{args.nu:g}_eps{args.eps:g}_s{args.seed}")
    meta = prob.metadata()
    config = {"problem": args.problem, "size": args.size, "nu": args.nu, "eps": args.eps, "seed": args.seed,
              "nu_e": args.nu_e}
    buf = io.BytesIO()
    save_operator(prob.operator, buf)
    _atomic_write(out / "operator.bin", buf.getvalue())
    prov = _provenance("generate", config)
    write_csv(out / "vectors.csv", ("x_exact", "y_exact", "y_noisy"),
              [list(r) for r in zip(prob.x_exact, prob.y_exact, prob.y_noisy)], prov)
    write_json(out / "meta.json", {**prov, **meta, "op_norm": float(prob.operator.op_norm),
                                   "L": float(prob.operator.L)})
    print(out)
    return 0


# ---------------------------------------------------------------- solve

def cmd_solve(args) -> int:
    prob = make_problem(args.problem, args.size, nu=args.nu, eps=args.eps, seed=args.noise_seed, nu_e=args.nu_e)
    M = args.M if args.M is not None else 2 * prob.n
    c0_expr = args.c0 if args.c0 is not None else DEFAULT_C0[args.method]
    c0 = resolve_c0(c0_expr, c0_symbols(prob, M))
    stop = {"kind": args.stop, "tau": args.tau, "window": args.window, "tol": args.tol}
    if args.stop == "a_priori":
        stop.update(C=args.C, exponent=2.0 / (1 + 2 * (args.nu + args.nu_e)))
    if args.lm_reference is not None:
        stop["lm_reference"] = args.lm_reference
    trunc = _truncation(prob, args.c1, args.trunc_a, args.trunc_b) if args.method == "rsvrg" else None
    cfg = SolverConfig(method=args.method, c0=c0, M=args.M if args.method != "landweber" else None,
                       max_epochs=args.epochs, stopping=_stopping(stop, args.method), truncation=trunc,
                       seed=args.seed, replication=args.replication, snapshot_every=args.snapshot_every)
    resolved = {"problem": prob.metadata(), "c0_expression": str(c0_expr), "solver": cfg.to_dict()}
    prov = _provenance("solve", resolved)
    rec = solve(prob, cfg)
    out = _output_dir(args.out)
    stem = args.name or f"{args.problem}_{args.method}"
    report = {**prov, "record": rec.to_dict()}
    write_json(out / f"{stem}.json", report)
    write_csv(out / f"{stem}_trajectory.csv", TRAJECTORY_COLUMNS,
              _trajectory_rows(rec.epochs, rec.rel_error, rec.residual_norm), prov)
    print(f"{args.method}: e_* = {rec.e_star:.4g} at k_* = {rec.k_star_epochs:.3f} epochs "
          f"(stopped by {rec.stopped_by})")
    return 0


# ---------------------------------------------------------------- study

def load_study_spec(path: Path) -> dict:
    """Read a YAML or JSON study spec and fill in defaults."""
    text = Path(path).read_text()
    if Path(path).suffix.lower() == ".json":
        spec = json.loads(text)
    else:
        import yaml
        spec = yaml.safe_load(text)
    if not isinstance(spec, dict):
        raise ValueError("study spec must be a mapping")
    allowed = {"name", "problems", "size", "nu", "eps", "methods", "reps", "base_seed", "noise_seed",
               "output", "c1"}
    extra = set(spec) - allowed
    if extra:
        raise ValueError(f"unknown study spec fields {sorted(extra)}")
    for key in ("problems", "eps", "methods"):
        if not spec.get(key):
            raise ValueError(f"study spec needs a non-empty {key!r}")
    out = {
        "name": str(spec.get("name") or Path(path).stem),
        "problems": [str(p) for p in _as_list(spec["problems"])],
        "size": int(spec.get("size", 1000)),
        "nu": [float(v) for v in _as_list(spec.get("nu", [0.0]))],
        "eps": [float(v) for v in _as_list(spec["eps"])],
        "reps": int(spec.get("reps", 10)),
        "base_seed": int(spec.get("base_seed", 0)),
        "noise_seed": int(spec.get("noise_seed", spec.get("base_seed", 0))),
        "output": spec.get("output"),
        "c1": {**CALIBRATED_C1, **(spec.get("c1") or {})},
        "methods": [],
    }
    for p in out["problems"]:
        if p not in PROBLEMS:
            raise ValueError(f"unknown problem {p!r}")
    if out["reps"] < 1:
        raise ValueError("reps must be at least 1")
    for m in spec["methods"]:
        m = dict(m)
        method = m.pop("method", None)
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        entry = {"method": method, "c0": m.pop("c0", DEFAULT_C0[method]), "M": m.pop("M", None),
                 "max_epochs": float(m.pop("max_epochs", 1e5 if method == "landweber" else 300)),
                 "stopping": m.pop("stopping", None) or {}, "label": m.pop("label", None)}
        if m:
            raise ValueError(f"unknown method fields {sorted(m)}")
        _stopping(entry["stopping"], method)  # validate early
        out["methods"].append(entry)
    return out


def _as_list(v):
    return v if isinstance(v, (list, tuple)) else [v]


def _slug(v: float) -> str:
    return f"{v:g}".replace("+", "")


def cmd_study(args) -> int:
    spec = load_study_spec(Path(args.spec))
    out = _output_dir(args.out or spec["output"])
    workers = args.threads
    prov = _provenance("study", spec)
    # Landweber cells go first so rSVRG/SVRG rules can compare against them.
    order = sorted(range(len(spec["methods"])), key=lambda i: spec["methods"][i]["method"] != "landweber")
    rows, cells = [], []
    diverged = False
    for name in spec["problems"]:
        for nu in spec["nu"]:
            base = make_problem(name, spec["size"], nu=nu)
            for eps in spec["eps"]:
                prob = base.with_noise(eps, spec["noise_seed"])
                lm_e = None
                for i in order:
                    m = spec["methods"][i]
                    M = m["M"] if m["M"] is not None else 2 * prob.n
                    c0 = resolve_c0(m["c0"], c0_symbols(prob, M))
                    stop = dict(m["stopping"])
                    if stop.get("kind") == "oracle_plateau" and lm_e is not None and "lm_reference" not in stop:
                        stop["lm_reference"] = lm_e
                    trunc = None
                    if m["method"] == "rsvrg":
                        trunc = _truncation(prob, spec["c1"].get(name, 1.0), None, None)
                    cfg = SolverConfig(method=m["method"], c0=c0, M=m["M"] if m["method"] != "landweber" else None,
                                       max_epochs=m["max_epochs"], stopping=_stopping(stop, m["method"]),
                                       truncation=trunc, seed=spec["base_seed"])
                    label = m["label"] or str(m["c0"])
                    cell = table_cell(prob, cfg, spec["reps"], spec["base_seed"], c0_label=label, workers=workers)
                    diverged |= cell.diverged
                    if m["method"] == "landweber" and not cell.diverged:
                        lm_e = cell.e_star
                    row = cell.row()
                    row["c0_value"] = c0
                    rows.append(row)
                    tag = f"{name}_{m['method']}{i}_nu{_slug(nu)}_eps{_slug(eps)}"
                    cells.append({**row, "config": cfg.to_dict(), "trajectory_csv": f"trajectories/{tag}.csv"})
                    write_csv(out / "trajectories" / f"{tag}.csv", TRAJECTORY_COLUMNS,
                              _trajectory_rows(cell.epochs, cell.trajectory, cell.residual),
                              {**prov, "cell": row})
                    print(f"{name} nu={nu:g} eps={eps:g} {m['method']:9s} c0={label:10s} "
                          f"e_*={_cell(cell.e_star) or 'nan'} k_*={_cell(cell.k_star) or 'nan'}"
                          + (f" plateau={cell.plateau:.4g}" if cell.plateau is not None else ""))
    stem = spec["name"]
    write_csv(out / f"{stem}.csv", STUDY_COLUMNS, rows, prov)
    write_json(out / f"{stem}.json", {**prov, "cells": cells, "diverged": diverged})
    return 2 if diverged else 0


# ---------------------------------------------------------------- verify

def cmd_verify(args) -> int:
    config = {"suite": args.suite, "kernel_full_grid": args.kernel_full_grid, "seed": args.seed}
    report = run_suite(args.suite, kernel_full_grid=args.kernel_full_grid, workers=args.threads, seed=args.seed)
    write_json(_output_dir(args.out) / (args.name or "verify.json"), {**_provenance("verify", config), **report})
    for name, rep in report["suites"].items():
        print(f"{name}: {'PASS' if rep['passed'] else 'FAIL'}")
    return 0 if report["passed"] else 2


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="svrgip", description="Stochastic variance reduced iterative regularization.")
    p.add_argument("--version", action="version", version=version_string())
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or the current directory)")
        sp.add_argument("--threads", type=int, default=1, help="maximum worker threads (default 1)")
        sp.add_argument("--name", help="output file stem")

    def problem_args(sp):
        sp.add_argument("--problem", choices=PROBLEMS, required=True)
        sp.add_argument("--size", type=int, default=1000)
        sp.add_argument("--nu", type=float, default=0.0, help="source power of the synthesized solution")
        sp.add_argument("--nu-e", type=float, default=0.0, help="regularity already present in x_e")
        sp.add_argument("--eps", type=float, default=0.0, help="relative noise level")

    g = sub.add_parser("generate", help="write a problem bundle")
    problem_args(g)
    g.add_argument("--seed", type=int, default=0, help="noise seed")
    common(g)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="run one solver")
    problem_args(s)
    s.add_argument("--method", choices=METHODS, required=True)
    s.add_argument("--c0", help="step size: number or expression in c, L, normA, C0bar, C0, n, M "
                                "(e.g. c/4, normA^-2); default normA^-2 for landweber, c otherwise")
    s.add_argument("--M", type=int, help="inner loop length (default 2n)")
    s.add_argument("--epochs", type=float, default=1000.0, help="epoch cap")
    s.add_argument("--stop", choices=StoppingRule.KINDS, default=None)
    s.add_argument("--tau", type=float, default=1.01)
    s.add_argument("--C", type=float, default=1.0, help="a priori stopping constant")
    s.add_argument("--window", type=int, default=10)
    s.add_argument("--tol", type=float, default=1e-3)
    s.add_argument("--lm-reference", type=float, help="Landweber e_* for the rSVRG plateau rule")
    s.add_argument("--c1", type=float, help="rSVRG truncation constant (default: per-problem calibration)")
    s.add_argument("--trunc-a", type=float, help="explicit truncation level a")
    s.add_argument("--trunc-b", type=float, help="explicit truncation exponent b")
    s.add_argument("--seed", type=int, default=0, help="index stream seed")
    s.add_argument("--noise-seed", type=int, default=0)
    s.add_argument("--replication", type=int, default=0)
    s.add_argument("--snapshot-every", type=int, default=1)
    common(s)
    s.set_defaults(func=cmd_solve)

    t = sub.add_parser("study", help="reproduce table cells from a YAML/JSON spec")
    t.add_argument("--spec", required=True)
    common(t)
    t.set_defaults(func=cmd_study)

    v = sub.add_parser("verify", help="run the oracle verification suite")
    v.add_argument("--suite", choices=SUITES + ("all",), default="all")
    v.add_argument("--kernel-full-grid", action="store_true",
                   help="check the third kernel bound also for k < t")
    v.add_argument("--seed", type=int, default=0)
    common(v)
    v.set_defaults(func=cmd_verify)
    return p


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if getattr(args, "threads", 1) < 1:
        print("svrgip: error: --threads must be at least 1", file=sys.stderr)
        return 1
    if args.command == "solve" and args.stop is None:
        args.stop = "discrepancy" if args.method == "landweber" else "max_epochs"
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"svrgip: diverged: {exc}", file=sys.stderr)
        return 2
    except (ValueError, InvalidOperatorError, OSError, KeyError, TypeError, _yaml_error()) as exc:
        print(f"svrgip: error: {exc}", file=sys.stderr)
        return 1


def _yaml_error():
    try:
        import yaml
    except ImportError:  # pragma: no cover
        return ValueError
    return yaml.YAMLError


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
