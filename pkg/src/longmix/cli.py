"""Command-line front end.

Subcommands: ``fit``, ``select``, ``classify``, ``simulate``, ``bench``.
A flat key=value config file can seed any flag; explicit flags win.
All artifacts land under ``--out`` together with a manifest listing the
resolved configuration, and nothing is written until the computation has
finished, so a failing run leaves no partial outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import ColumnSchema, load_csv, write_csv
from .em import EmSettings, MixtureFit, sandwich_covariance
from .exceptions import ArgumentError, LongmixError
from .families import get_family
from .gee import refine
from .selection import LambdaGrid, classify, default_lambda_grid, e_step, select_lambda
from .simulate import FitConfig, design_from_name, generate, run_replications

EXIT_CODES = {
    "argument": 2,
    "settings": 2,
    "schema": 2,
    "parse": 3,
    "empty-input": 3,
    "degenerate-column": 3,
    "domain": 4,
    "numerical": 4,
    "rank-deficiency": 4,
    "inner-solver": 4,
    "near-singular": 4,
    "collapse": 5,
    "class-collapse": 5,
    "selection": 5,
    "error": 1,
}


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _load_config_file(path: str, valid_keys: set[str]) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ArgumentError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in valid_keys:
            raise ArgumentError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value.strip()
    return out


def _schema_from_args(args) -> ColumnSchema:
    if not (args.id_col and args.y_col and args.x_cols):
        raise ArgumentError("--id-col, --y-col and --x-cols are required")
    return ColumnSchema(
        id_col=args.id_col,
        y_col=args.y_col,
        x_cols=[c.strip() for c in args.x_cols.split(",") if c.strip()],
    )


def _settings_from_args(args) -> EmSettings:
    return EmSettings(
        max_iter=int(args.max_iter),
        tol_obj=float(args.tol_obj),
        tol_param=float(args.tol_param),
        seed=int(args.seed),
    )


def _grid_from_args(args, n: int) -> LambdaGrid:
    lam = getattr(args, "lambda", None)
    if lam is not None:
        return LambdaGrid((float(lam),))
    if args.grid == "auto":
        return default_lambda_grid(n, int(args.k_init))
    vals = tuple(float(v) for v in args.grid.split(","))
    return LambdaGrid(vals)


def _write_manifest(
    out: Path, args, artifacts: list[str], skip=("config", "jobs", "out")
) -> None:
    """Record the resolved configuration and artifact names.

    ``--jobs`` is omitted because the worker count cannot affect results,
    and ``--out`` because it is the directory holding the manifest itself;
    runs differing only in those produce byte-identical output trees.
    """
    lines = []
    for key, value in sorted(vars(args).items()):
        if key in ("func", *skip) or value is None:
            continue
        lines.append(f"{key.replace('_', '-')}={value}")
    for name in artifacts:
        lines.append(f"artifact={name}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _fit_to_json(fit: MixtureFit, family_name: str, columns: list[str]) -> dict:
    return {
        "family": family_name,
        "columns": columns,
        "pi": fit.pi.tolist(),
        "beta": fit.beta.tolist(),
        "phi": fit.phi.tolist(),
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
    }


def _fit_from_json(payload: dict) -> tuple[MixtureFit, str, list[str]]:
    fit = MixtureFit(
        pi=np.asarray(payload["pi"], dtype=float),
        beta=np.asarray(payload["beta"], dtype=float),
        phi=np.asarray(payload["phi"], dtype=float),
        converged=payload.get("converged", True),
    )
    return fit, payload["family"], payload["columns"]


# --------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------- #


def cmd_fit(args) -> int:
    schema = _schema_from_args(args)
    data = load_csv(args.data, schema)
    family = get_family(args.family)
    settings = _settings_from_args(args)
    grid = _grid_from_args(args, data.n)
    result = select_lambda(
        data, family, grid, settings, k_init=int(args.k_init), seed=int(args.seed)
    )
    fit = result.fit
    try:
        cov = sandwich_covariance(data, fit, family)
        se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    except LongmixError:
        se = np.full(fit.K * fit.p + max(fit.K - 1, 0), np.nan)
    refined = None
    if args.refine and args.refine != "none":
        kind = {"cs": "exchangeable", "ind": "independence"}.get(args.refine, args.refine)
        refined = refine(data, fit, family, kind)
    u = e_step(data, fit, family)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = ["parameter,estimate,se"]
    idx = 0
    for k in range(fit.K):
        for j in range(fit.p):
            summary.append(
                f"beta{k + 1}_{schema.x_cols[j]},{_fmt(fit.beta[k, j])},{_fmt(se[idx])}"
            )
            idx += 1
    for k in range(fit.K):
        se_pi = se[fit.K * fit.p + k] if k < fit.K - 1 else float("nan")
        summary.append(f"pi{k + 1},{_fmt(fit.pi[k])},{_fmt(se_pi)}")
    for k in range(fit.K):
        summary.append(f"phi{k + 1},{_fmt(fit.phi[k])},nan")
    if refined is not None:
        for k in range(fit.K):
            for j in range(fit.p):
                summary.append(
                    f"refined_beta{k + 1}_{schema.x_cols[j]},{_fmt(refined.beta[k, j])},nan"
                )
        for k in range(fit.K):
            summary.append(f"refined_phi{k + 1},{_fmt(refined.phi[k])},nan")
            summary.append(f"refined_rho{k + 1},{_fmt(refined.rho[k])},nan")
    (out / "summary.csv").write_text("\n".join(summary) + "\n")

    post = ["subject_id," + ",".join(f"u{k + 1}" for k in range(fit.K))]
    for s, row in zip(data.subjects, u):
        post.append(s.subject_id + "," + ",".join(_fmt(v) for v in row))
    (out / "posteriors.csv").write_text("\n".join(post) + "\n")

    table = ["lambda,K,BIC,converged"]
    for lam, K, crit, conv in result.table:
        table.append(f"{_fmt(lam)},{K},{_fmt(crit)},{str(conv).lower()}")
    (out / "bic_table.csv").write_text("\n".join(table) + "\n")

    trace = ["iteration,objective"]
    for i, v in enumerate(fit.objective_trace, start=1):
        trace.append(f"{i},{_fmt(v)}")
    (out / "trace.csv").write_text("\n".join(trace) + "\n")

    (out / "fit.json").write_text(
        json.dumps(_fit_to_json(fit, args.family, schema.x_cols), indent=2) + "\n"
    )
    _write_manifest(
        out,
        args,
        ["summary.csv", "posteriors.csv", "bic_table.csv", "trace.csv", "fit.json"],
    )
    return 0


def cmd_select(args) -> int:
    schema = _schema_from_args(args)
    data = load_csv(args.data, schema)
    family = get_family(args.family)
    settings = _settings_from_args(args)
    grid = _grid_from_args(args, data.n)
    result = select_lambda(
        data, family, grid, settings, k_init=int(args.k_init), seed=int(args.seed)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = ["lambda,K,BIC,converged"]
    for lam, K, crit, conv in result.table:
        table.append(f"{_fmt(lam)},{K},{_fmt(crit)},{str(conv).lower()}")
    (out / "bic_table.csv").write_text("\n".join(table) + "\n")
    (out / "fit.json").write_text(
        json.dumps(_fit_to_json(result.fit, args.family, schema.x_cols), indent=2)
        + "\n"
    )
    _write_manifest(out, args, ["bic_table.csv", "fit.json"])
    return 0


def cmd_classify(args) -> int:
    payload = json.loads(Path(args.fit).read_text())
    fit, family_name, columns = _fit_from_json(payload)
    family = get_family(family_name)
    schema = ColumnSchema(id_col=args.id_col, y_col=args.y_col, x_cols=columns)
    data = load_csv(args.data, schema)
    rows = ["subject_id,class," + ",".join(f"u{k + 1}" for k in range(fit.K))]
    for s in data.subjects:
        k_star, post = classify(fit, family, s)
        rows.append(
            s.subject_id + f",{k_star}," + ",".join(_fmt(v) for v in post)
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "assignments.csv").write_text("\n".join(rows) + "\n")
    _write_manifest(out, args, ["assignments.csv"])
    return 0


def cmd_simulate(args) -> int:
    design = design_from_name(args.example)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    reps = int(args.reps)
    for r in range(reps):
        seed = np.random.SeedSequence(entropy=int(args.seed), spawn_key=(r,))
        data, labels = generate(design, seed)
        schema = ColumnSchema(id_col="id", y_col="y", x_cols=data.columns)
        name = f"rep{r:04d}_data.csv"
        write_csv(data, out / name, schema)
        lname = f"rep{r:04d}_labels.csv"
        lines = ["subject_id,label"]
        lines.extend(
            f"{s.subject_id},{lab}" for s, lab in zip(data.subjects, labels)
        )
        (out / lname).write_text("\n".join(lines) + "\n")
        artifacts.extend([name, lname])
    _write_manifest(out, args, artifacts)
    return 0


def cmd_bench(args) -> int:
    design = design_from_name(args.example)
    refine_kind = None
    if args.refine and args.refine != "none":
        refine_kind = {"cs": "exchangeable", "ind": "independence"}.get(
            args.refine, args.refine
        )
    grid = None
    if args.grid != "auto":
        grid = tuple(float(v) for v in args.grid.split(","))
    lam = getattr(args, "lambda", None)
    if lam is not None:
        grid = (float(lam),)
    config = FitConfig(
        k_init=int(args.k_init),
        grid=grid,
        settings=_settings_from_args(args),
        refine_kind=refine_kind,
        test_per_component=int(args.test_per_component),
    )
    report = run_replications(
        design, int(args.reps), config, seed=int(args.seed), jobs=int(args.jobs)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []

    hist = ["K,count,rate"]
    total = sum(report.k_histogram.values())
    for k, c in report.k_histogram.items():
        hist.append(f"{k},{c},{_fmt(c / total)}")
    (out / "selection_hist.csv").write_text("\n".join(hist) + "\n")
    artifacts.append("selection_hist.csv")

    for label, tab in (("pql", report.pql), ("pql2", report.pql2)):
        if tab is None:
            continue
        lines = ["parameter,true,mean,bias100,mse100"]
        for name, tr, mn, b, m in zip(
            report.parameter_names,
            tab["true"],
            tab["mean"],
            tab["bias100"],
            tab["mse100"],
        ):
            lines.append(f"{name},{_fmt(tr)},{_fmt(mn)},{_fmt(b)},{_fmt(m)}")
        fname = f"aggregate_{label}.csv"
        (out / fname).write_text("\n".join(lines) + "\n")
        artifacts.append(fname)

    mis = [
        "median,p2.5,p97.5,n_conditioned",
        f"{_fmt(report.mis_median)},{_fmt(report.mis_p025)},"
        f"{_fmt(report.mis_p975)},{report.n_conditioned}",
    ]
    (out / "misclassification.csv").write_text("\n".join(mis) + "\n")
    artifacts.append("misclassification.csv")

    per = ["rep,k_hat,lambda,misclassification,failure"]
    for r in report.per_rep:
        per.append(
            f"{r['rep']},{r['k_hat'] if r['k_hat'] is not None else ''},"
            f"{_fmt(r['lambda']) if r['lambda'] is not None else ''},"
            f"{_fmt(r['mis']) if r['mis'] is not None else ''},"
            f"{r['failure'] or ''}"
        )
    (out / "per_rep.csv").write_text("\n".join(per) + "\n")
    artifacts.append("per_rep.csv")

    summary = [
        "selection_rate,failures,achieved_rho",
        f"{_fmt(report.selection_rate)},{report.failures},{_fmt(report.achieved_rho)}",
    ]
    (out / "summary.csv").write_text("\n".join(summary) + "\n")
    artifacts.append("summary.csv")
    _write_manifest(out, args, artifacts)
    return 0


# --------------------------------------------------------------------- #
# parser
# --------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longmix",
        description="Mixtures of marginal regression models for longitudinal data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="flat key=value config file")
        sp.add_argument("--out", default="longmix-out")
        sp.add_argument("--seed", default=0)
        sp.add_argument("--jobs", default=1)

    def em_flags(sp):
        sp.add_argument("--family", default="gaussian")
        sp.add_argument("--k-init", default=10)
        sp.add_argument(
            "--lambda", default=None, help="fixed tuning value; overrides --grid"
        )
        sp.add_argument("--grid", default="auto", help='"auto" or comma list')
        sp.add_argument("--max-iter", default=500)
        sp.add_argument("--tol-obj", default=1e-8)
        sp.add_argument("--tol-param", default=1e-6)

    def schema_flags(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--id-col", default="id")
        sp.add_argument("--y-col", default="y")
        sp.add_argument("--x-cols", default=None)

    p_fit = sub.add_parser("fit", help="fit and select on a CSV dataset")
    common(p_fit)
    em_flags(p_fit)
    schema_flags(p_fit)
    p_fit.add_argument("--refine", default="none", choices=["ar1", "cs", "ind", "none"])
    p_fit.set_defaults(func=cmd_fit)

    p_sel = sub.add_parser("select", help="tuning-parameter search only")
    common(p_sel)
    em_flags(p_sel)
    schema_flags(p_sel)
    p_sel.set_defaults(func=cmd_select)

    p_cls = sub.add_parser("classify", help="classify subjects with a saved fit")
    common(p_cls)
    p_cls.add_argument("--fit", required=True, help="fit.json from a previous run")
    p_cls.add_argument("--data", required=True)
    p_cls.add_argument("--id-col", default="id")
    p_cls.add_argument("--y-col", default="y")
    p_cls.set_defaults(func=cmd_classify)

    p_sim = sub.add_parser("simulate", help="write synthetic datasets")
    common(p_sim)
    p_sim.add_argument("--example", required=True, help="ex1 | ex2:RHO | ex3")
    p_sim.add_argument("--reps", default=1)
    p_sim.set_defaults(func=cmd_simulate)

    p_bench = sub.add_parser("bench", help="replication study with aggregates")
    common(p_bench)
    em_flags(p_bench)
    p_bench.add_argument("--example", required=True, help="ex1 | ex2:RHO | ex3")
    p_bench.add_argument("--reps", default=100)
    p_bench.add_argument("--refine", default="none", choices=["ar1", "cs", "ind", "none"])
    p_bench.add_argument("--test-per-component", default=100)
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        # config file seeds defaults; explicit flags win because argparse
        # re-parses argv after set_defaults
        if "--config" in argv:
            cfg_path = argv[argv.index("--config") + 1]
            probe = parser.parse_args(argv)
            valid = {k for k in vars(probe) if k not in ("func", "command", "config")}
            cfg = _load_config_file(cfg_path, valid)
            for sub_action in parser._subparsers._group_actions:
                for sp in sub_action.choices.values():
                    sp.set_defaults(**cfg)
        args = parser.parse_args(argv)
        return args.func(args)
    except LongmixError as exc:
        print(f"error_category={exc.category}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)


if __name__ == "__main__":
    sys.exit(main())
