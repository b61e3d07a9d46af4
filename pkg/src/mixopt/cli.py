"""Command-line entry point.

Commands:
  synth         generate a synthetic mixture (manifest + JSONL files)
  run           execute a strategy on a manifest, writing a run directory
  oracle-check  compare analytic influence against retraining oracles
  report        merge run directories into a comparison table (csv/json)
  sweep         repeat `run` over a list of m or sigma values

Exit codes: 0 success; 1 runtime/validation failure (threshold missed,
non-convergence, numerical failure); 2 usage, schema, or IO errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import influence as infl
from . import loop, model as mo, oracle
from .errors import (ConfigError, InvalidInputError, ManifestError,
                     MixoptError, NumericalFailureError, OracleInvalidError)
from .jsonio import canonical_dumps, read_json, write_json
from .mixture import (SCENARIO_KINDS, load_manifest, synth_scenario,
                      write_dataset_files)

REL_ERR_THRESHOLD = 0.05
SPEARMAN_THRESHOLD = 0.8


def _parse_sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise InvalidInputError(f"bad sizes {text!r}: {e}") from e
    if not sizes:
        raise InvalidInputError("empty sizes list")
    return sizes


def cmd_synth(args) -> int:
    state = synth_scenario(args.kind, _parse_sizes(args.sizes), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = write_dataset_files(state, out)
    print(f"synth: wrote {len(written)} files for kind={args.kind} "
          f"sizes={state.sizes} to {out}")
    return 0


def _load_config(path, overrides: dict) -> loop.RunConfig:
    raw = read_json(path)
    cfg = loop.config_from_dict(raw)
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


def _print_run_table(records: list[loop.IterationRecord]) -> None:
    print(f"{'t':>3}  {'sizes':<28} {'max|beta| domain':<20} {'Q':>12}")
    for rec in records:
        sizes = ",".join(str(v) for v in rec.sizes_after.values())
        if rec.beta:
            top = max(rec.beta, key=lambda k: abs(rec.beta[k]))
            top_txt = f"{top}={rec.beta[top]:+.4f}"
        else:
            top_txt = "-"
        print(f"{rec.t:>3}  {sizes:<28} {top_txt:<20} {rec.q:>12.6f}")


def _write_run_dir(out: Path, cfg: loop.RunConfig,
                   result: loop.RunResult) -> None:
    write_json(out / "config.json", loop.config_to_dict(cfg))
    for rec, trained, report in zip(result.records, result.models,
                                    result.influence_reports):
        it_dir = out / f"iter_{rec.t}"
        write_json(it_dir / "model.json", mo.state_to_json_dict(trained))
        if report is not None:
            write_json(it_dir / "influence.json", report.to_json_dict())
    write_json(out / "report.json", {
        "strategy": cfg.strategy,
        "records": [r.to_json_dict() for r in result.records],
        "best_iteration": (result.records[result.best_index].t
                           if result.records else None),
        "aborted": result.aborted,
    })
    write_json(out / "timings.json", {
        "per_iteration_sec": [r.wall_time_sec for r in result.records],
    })
    write_dataset_files(result.final_state, out / "datasets")


def cmd_run(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.strategy is not None:
        overrides["strategy"] = args.strategy
    cfg = _load_config(args.config, overrides)
    state = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = loop.run(state, cfg)
    except NumericalFailureError as e:
        write_json(out / "report.json",
                   {"strategy": cfg.strategy, "records": [],
                    "best_iteration": None, "aborted": str(e)})
        print(f"error: run aborted: {e}", file=sys.stderr)
        return 1
    _write_run_dir(out, cfg, result)
    _print_run_table(result.records)
    if result.aborted:
        print(f"error: run aborted after {len(result.records)} iterations: "
              f"{result.aborted}", file=sys.stderr)
        return 1
    print(f"run: strategy={cfg.strategy} iterations={len(result.records)} "
          f"best_t={result.records[result.best_index].t} -> {out}")
    return 0


def _spearman(a: np.ndarray, b: np.ndarray) -> float:
    def ranks(v):
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1.0, len(v) + 1.0)
        # average tied ranks
        for value in np.unique(v):
            mask = v == value
            if mask.sum() > 1:
                r[mask] = r[mask].mean()
        return r

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra @ ra) * (rb @ rb))
    if denom == 0.0:
        return 1.0 if np.allclose(ra, rb) else 0.0
    return float((ra @ rb) / denom)


def cmd_oracle_check(args) -> int:
    cfg = _load_config(args.config, {"seed": args.seed} if args.seed is not None
                       else {})
    state = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.model.build_spec(state.feature_dim, state.n_classes)

    epsilon = args.epsilon
    fd_alphas = []
    for j in range(len(state.domains)):
        res = oracle.fd_influence(state, spec, cfg.train, j, epsilon)
        fd_alphas.append(res.fd_alpha)
    fd_alphas = np.asarray(fd_alphas)

    trained = mo.train_to_convergence(spec, state.union(), cfg.train)
    domains = [d.examples for d in state.domains]
    ref = state.reference.examples
    rng_exact = loop._iteration_rng(cfg.seed, 1, 11)
    rng_kfac = loop._iteration_rng(cfg.seed, 1, 12)
    exact = infl.dq_dbeta(trained, ref, domains, "exact", cfg.sigma,
                          rng_exact, rho=cfg.rho)
    kfac = infl.dq_dbeta(trained, ref, domains, "kfac", cfg.sigma,
                         rng_kfac, rho=cfg.rho)

    rel_errs = np.abs(exact.alpha - fd_alphas) / np.maximum(np.abs(fd_alphas),
                                                            1e-300)
    rho_sp = _spearman(kfac.alpha, exact.alpha)
    top = int(np.argmax(np.abs(exact.alpha)))
    sign_agree = bool(np.sign(kfac.alpha[top]) == np.sign(exact.alpha[top]))
    ok = bool(np.all(rel_errs <= REL_ERR_THRESHOLD)
              and rho_sp >= SPEARMAN_THRESHOLD and sign_agree)
    write_json(out / "oracle.json", {
        "epsilon": epsilon,
        "domains": [{
            "name": d.name,
            "fd_alpha": float(fd_alphas[j]),
            "exact_alpha": float(exact.alpha[j]),
            "kfac_alpha": float(kfac.alpha[j]),
            "rel_err_exact_vs_fd": float(rel_errs[j]),
        } for j, d in enumerate(state.domains)],
        "spearman_kfac_vs_exact": rho_sp,
        "sign_of_top_coordinate_agrees": sign_agree,
        "thresholds": {"rel_err": REL_ERR_THRESHOLD,
                       "spearman": SPEARMAN_THRESHOLD},
        "pass": ok,
    })
    worst = int(np.argmax(rel_errs))
    print(f"oracle-check: worst rel err {rel_errs[worst]:.4f} "
          f"({state.domains[worst].name}), spearman {rho_sp:.3f}, "
          f"sign agree {sign_agree} -> {'PASS' if ok else 'FAIL'}")
    if not ok:
        failing = [state.domains[j].name for j in
                   np.flatnonzero(rel_errs > REL_ERR_THRESHOLD)]
        if failing:
            print(f"error: relative error above {REL_ERR_THRESHOLD:.0%} for "
                  f"domains: {', '.join(failing)}", file=sys.stderr)
        if rho_sp < SPEARMAN_THRESHOLD:
            print(f"error: spearman {rho_sp:.3f} below "
                  f"{SPEARMAN_THRESHOLD}", file=sys.stderr)
        return 1
    return 0


def _report_rows(run_dirs: list[str]) -> list[dict]:
    rows = []
    for run_dir in run_dirs:
        rd = Path(run_dir)
        report_path = rd / "report.json"
        if not report_path.exists():
            raise ManifestError(f"no report.json in {rd}")
        try:
            report = read_json(report_path)
            records = report["records"]
            strategy = report["strategy"]
        except (KeyError, ValueError) as e:
            raise ManifestError(f"corrupt report in {rd}: {e}") from e
        for rec in records:
            row = {"run": rd.name, "strategy": strategy, "iteration": rec["t"],
                   "q": rec["q"]}
            for name in sorted(rec["sizes_after"]):
                row[f"size:{name}"] = rec["sizes_after"][name]
            for name in sorted(rec["beta"]):
                row[f"beta:{name}"] = rec["beta"][name]
            for name in sorted(rec["ref_slices"]):
                row[f"ref_loss:{name}"] = rec["ref_slices"][name]
            rows.append(row)
    return rows


def cmd_report(args) -> int:
    rows = _report_rows(args.run_dirs)
    if args.format == "json":
        text = canonical_dumps(rows) + "\n"
    else:
        fixed = ["run", "strategy", "iteration", "q"]
        extra = sorted({k for row in rows for k in row} - set(fixed))
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=fixed + extra, restval="")
        writer.writeheader()
        writer.writerows(rows)
        text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"report: wrote {len(rows)} rows to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_sweep(args) -> int:
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise InvalidInputError("empty sweep values")
    if args.param not in ("m", "sigma"):
        raise InvalidInputError("sweep param must be 'm' or 'sigma'")
    cfg = _load_config(args.config, {})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for value in values:
        sub_cfg = replace(cfg, **{args.param: value})
        sub_dir = out / f"{args.param}_{value:g}"
        sub_dir.mkdir(parents=True, exist_ok=True)
        state = load_manifest(args.manifest)
        result = loop.run(state, sub_cfg)
        _write_run_dir(sub_dir, sub_cfg, result)
        sizes = [r.sizes_after for r in result.records]
        runs.append({"value": value, "dir": sub_dir.name,
                     "q_trajectory": [r.q for r in result.records],
                     "sizes_before": [r.sizes_before for r in result.records],
                     "sizes_after": sizes,
                     "aborted": result.aborted})
        print(f"sweep {args.param}={value:g}: "
              f"Q = {[round(r.q, 6) for r in result.records]}")
    write_json(out / "sweep.json",
               {"param": args.param, "values": values, "runs": runs})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixopt")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic mixture")
    p.add_argument("--kind", required=True, choices=SCENARIO_KINDS)
    p.add_argument("--sizes", required=True,
                   help="comma-separated per-domain sizes, e.g. 500,500,500")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="execute one strategy on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--strategy", default=None, choices=loop.STRATEGIES,
                   help="override the config strategy")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("oracle-check",
                       help="validate influence against retraining oracles")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=1e-2)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("report", help="tabulate finished runs")
    p.add_argument("run_dirs", nargs="+", metavar="RUN_DIR")
    p.add_argument("--format", default="csv", choices=("csv", "json"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="repeat run over m or sigma values")
    p.add_argument("--param", required=True, choices=("m", "sigma"))
    p.add_argument("--values", required=True,
                   help="comma-separated values, e.g. 0.1,0.15,0.3")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ManifestError, InvalidInputError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OracleInvalidError, NumericalFailureError, MixoptError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
