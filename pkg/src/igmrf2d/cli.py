"""Command-line entry point: simulate, fit, crossval, diagnose, export.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from .diagnostics import diagnose
from .errors import NumericalError, ValidationError
from .gaussian import make_rng
from .io import (
    FLOAT_FORMAT,
    RunConfig,
    check_run_dir,
    chain_files,
    ingest_csv,
    load_config,
    read_chain,
    sha256_file,
    write_chain,
    write_dataset_csv,
    write_hierarchy_csv,
)
from .mcmc import run_chain
from .model import LEVELS
from .sim import CoverageTable, FoldResult, cross_validate, export_fit_curve, score_folds, simulate_dataset

log = logging.getLogger("igmrf2d")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
RUN_FILE = "run.json"


@contextlib.contextmanager
def staged_dir(final: Path):
    """Yield a scratch directory next to ``final``; move it into place on success."""
    final = Path(final)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{final.name}-", dir=final.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _config(args) -> RunConfig:
    rc = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        rc.chain = dataclasses.replace(rc.chain, seed=args.seed)
        rc.design = dataclasses.replace(rc.design, seed=args.seed)
        rc.seeds = (args.seed,)
    if getattr(args, "T", None) is not None:
        rc.T = args.T
    if getattr(args, "chains", None) is not None:
        rc.chains = args.chains
    if getattr(args, "jobs", None) is not None:
        rc.jobs = args.jobs
    return rc


def _load_data(args, rc: RunConfig):
    dataset, report = ingest_csv(args.data, T=rc.T, year_origin=rc.year_origin,
                                 hierarchy_path=getattr(args, "hierarchy", None))
    for issue in report.flagged:
        log.warning("%s: %s", args.data, issue.message)
    return dataset, report


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    rc = _config(args)
    design = rc.design if rc.T is None else dataclasses.replace(rc.design, T=rc.T)
    dataset, truth = simulate_dataset(design)
    with staged_dir(Path(args.out)) as tmp:
        write_dataset_csv(dataset, tmp / "data.csv")
        write_hierarchy_csv(dataset.hierarchy, tmp / "hierarchy.csv")
        for lev in LEVELS:
            np.save(tmp / f"truth_u_{lev.value}.npy", truth.state.u[lev])
        _write_json(tmp / "truth.json", {
            "seed": design.seed, "T": design.T,
            "lambda": truth.lam.tolist(), "tau": np.asarray(truth.tau).tolist(),
            "config_text": rc.text,
        })
    print(f"simulated {dataset.N} studies in {dataset.hierarchy.J} countries -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- fit

def _fit_job(job):
    config, dataset, seed_seq, final, inputs, text, extra = job
    out = run_chain(config, dataset, rng=make_rng(seed_seq))
    with staged_dir(final) as tmp:
        write_chain(out, tmp, inputs=inputs, config_text=text, extra=extra)
    return final.name, out.acceptance_rates()


def _map(fn, jobs: list, n_jobs: int) -> list:
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, len(jobs))) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def cmd_fit(args) -> int:
    rc = _config(args)
    dataset, report = _load_data(args, rc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {"data": args.data}
    if args.hierarchy:
        inputs["hierarchy"] = args.hierarchy
    if args.config:
        inputs["config"] = args.config
    children = np.random.SeedSequence(rc.chain.seed).spawn(rc.chains)
    jobs = [(rc.chain, dataset, ss, out / f"chain_{i}", inputs, rc.text,
             {"chain_index": i, "n_chains": rc.chains}) for i, ss in enumerate(children)]
    for name, rates in _map(_fit_job, jobs, rc.jobs):
        print(name, " ".join(f"{b}={r:.3f}" for b, r in rates.items()))
    with staged_dir(out / "data") as tmp:
        write_dataset_csv(dataset, tmp / "data.csv", year_origin=report.year_origin)
        write_hierarchy_csv(dataset.hierarchy, tmp / "hierarchy.csv")
    _write_json(out / RUN_FILE, {
        "kind": "fit", "chains": rc.chains, "T": report.T, "year_origin": report.year_origin,
        "seed": rc.chain.seed, "inputs": {k: sha256_file(v) for k, v in sorted(inputs.items())},
    })
    return EXIT_OK


# ---------------------------------------------------------------- crossval

def cmd_crossval(args) -> int:
    rc = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        dataset, _ = _load_data(args, rc)
    else:
        design = rc.design if rc.T is None else dataclasses.replace(rc.design, T=rc.T)
        dataset, _ = simulate_dataset(design)
    frames, tables = [], []
    for seed in rc.seeds:
        table, results = cross_validate(dataset, rc.chain, k=rc.folds, seed=seed, jobs=rc.jobs)
        with staged_dir(out / f"seed_{seed}") as tmp:
            table.to_frame().to_csv(tmp / "coverage.csv", index=False, float_format=FLOAT_FORMAT,
                                    lineterminator="\n")
            pred = _predictions_frame(results, seed)
            pred.to_csv(tmp / "predictions.csv", index=False, float_format=FLOAT_FORMAT,
                        lineterminator="\n")
        frames.append(pred)
        tables.append(table)
        cov, err = table.total()
        print(f"seed {seed}: coverage D={cov[0]:.3f} S={cov[1]:.3f} I={cov[2]:.3f} "
              f"error D={err[0]:.3f} S={err[1]:.3f} I={err[2]:.3f}")
    with staged_dir(out / "data") as tmp:
        write_dataset_csv(dataset, tmp / "data.csv")
        write_hierarchy_csv(dataset.hierarchy, tmp / "hierarchy.csv")
    pooled = pd.concat(frames, ignore_index=True)
    pooled.to_csv(out / "predictions.csv", index=False, float_format=FLOAT_FORMAT,
                  lineterminator="\n")
    coverage_from_predictions(pooled, dataset).to_frame().to_csv(
        out / "coverage.csv", index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    _write_json(out / RUN_FILE, {"kind": "crossval", "seeds": list(rc.seeds), "folds": rc.folds,
                                 "T": dataset.grid.T, "config_text": rc.text})
    return EXIT_OK


def _predictions_frame(results: list[FoldResult], seed: int) -> pd.DataFrame:
    rows = []
    for r in results:
        for i, row in enumerate(r.test_rows):
            rec = {"seed": seed, "fold": r.fold, "row": int(row)}
            for k, c in enumerate(("D", "S", "I")):
                rec[f"q025_{c}"], rec[f"q500_{c}"], rec[f"q975_{c}"] = r.quantiles[i, k]
            rows.append(rec)
    return pd.DataFrame(rows)


def coverage_from_predictions(pred: pd.DataFrame, dataset) -> CoverageTable:
    results = []
    for (seed, fold), g in pred.groupby(["seed", "fold"], sort=True):
        q = np.stack([g[[f"q025_{c}", f"q500_{c}", f"q975_{c}"]].to_numpy()
                      for c in ("D", "S", "I")], axis=1)
        results.append(FoldResult(int(fold), int(seed), g["row"].to_numpy(), q, {}))
    return score_folds(dataset, results)


# ---------------------------------------------------------------- diagnose

def _chain_dirs(run: Path) -> list[Path]:
    dirs = sorted(p for p in run.glob("chain_*") if p.is_dir())
    if not dirs:
        check_run_dir(run, chain_files())
        dirs = [run]
    return dirs


def cmd_diagnose(args) -> int:
    outputs = [read_chain(d) for run in args.runs for d in _chain_dirs(Path(run))]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # warnings are printed below
        report = diagnose(outputs)
    with pd.option_context("display.max_rows", None, "display.width", 120):
        print(report.table.to_string(index=False))
        print(report.acceptance.to_string(index=False))
    if report.degenerate:
        print(f"degenerate (constant) parameters: {', '.join(report.degenerate)}")
    for msg in report.warnings:
        print(f"warning: {msg}")
    if args.out:
        with staged_dir(Path(args.out)) as tmp:
            report.table.to_csv(tmp / "diagnostics.csv", index=False, float_format=FLOAT_FORMAT,
                                lineterminator="\n")
            report.acceptance.to_csv(tmp / "acceptance.csv", index=False,
                                     float_format=FLOAT_FORMAT, lineterminator="\n")
    return EXIT_OK


# ---------------------------------------------------------------- export

def _run_dataset(run: Path):
    check_run_dir(run, [RUN_FILE, "data/data.csv", "data/hierarchy.csv"])
    meta = json.loads((run / RUN_FILE).read_text(encoding="utf-8"))
    dataset, _ = ingest_csv(run / "data" / "data.csv", T=meta["T"],
                            year_origin=meta.get("year_origin", 1),
                            hierarchy_path=run / "data" / "hierarchy.csv")
    return dataset, meta


def cmd_export(args) -> int:
    run = Path(args.run)
    dest = Path(args.out)
    if args.what == "fit-curves":
        dataset, _ = _run_dataset(run)
        outputs = [read_chain(d) for d in _chain_dirs(run)]
        pooled = dataclasses.replace(outputs[0], draws={
            k: np.concatenate([o.draws[k] for o in outputs]) for k in outputs[0].draws})
        units = [args.unit] if args.unit else list(dataset.hierarchy.countries)
        frames = []
        for unit in units:
            df = export_fit_curve(pooled, unit, dataset)
            if not args.unit:
                df.insert(0, "unit", unit)
            frames.append(df)
        _atomic_csv(pd.concat(frames, ignore_index=True), dest)
    elif args.what == "coverage":
        check_run_dir(run, [RUN_FILE, "predictions.csv", "data/data.csv"])
        dataset, _ = _run_dataset(run)
        pred = pd.read_csv(run / "predictions.csv", float_precision="round_trip")
        _atomic_csv(coverage_from_predictions(pred, dataset).to_frame(), dest)
    else:
        dirs = _chain_dirs(run)
        with staged_dir(dest) as tmp:
            for d in dirs:
                out = read_chain(d)
                manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
                target = tmp if d == run else tmp / d.name
                write_chain(out, target, config_text=manifest.get("config_text", ""))
                # keep the recorded input hashes rather than rehashing
                m2 = json.loads((target / "manifest.json").read_text(encoding="utf-8"))
                m2["inputs"] = manifest.get("inputs", {})
                for k in ("chain_index", "n_chains"):
                    if k in manifest:
                        m2[k] = manifest[k]
                _write_json(target / "manifest.json", m2)
    print(f"wrote {dest}")
    return EXIT_OK


def _atomic_csv(df: pd.DataFrame, dest: Path) -> None:
    dest.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{dest.name}-", dir=dest.parent)
    os.close(fd)
    try:
        df.to_csv(tmp, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        os.replace(tmp, dest)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="igmrf2d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, data_required=False):
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--T", type=int, help="grid size (default: span of the data years)")
        if data:
            sp.add_argument("--data", required=data_required, help="study-level CSV")
            sp.add_argument("--hierarchy", help="CSV declaring extra countries (country,region,super_region)")

    s = sub.add_parser("simulate", help="generate a synthetic panel from the model")
    common(s, data=False)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="run MCMC chains on a data file")
    common(f, data_required=True)
    f.add_argument("--chains", type=int)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("crossval", help="k-fold posterior-predictive cross-validation")
    common(c)
    c.set_defaults(func=cmd_crossval)

    d = sub.add_parser("diagnose", help="ESS, split-Rhat and acceptance rates")
    d.add_argument("runs", nargs="+", help="fit output or chain directories")
    d.add_argument("--out", help="directory for diagnostics.csv and acceptance.csv")
    d.set_defaults(func=cmd_diagnose)

    e = sub.add_parser("export", help="plot-ready CSVs from a finished run")
    e.add_argument("run", help="fit or crossval output directory")
    e.add_argument("--what", choices=("fit-curves", "coverage", "chains"), required=True)
    e.add_argument("--unit", help="country name for fit-curves (default: every country)")
    e.add_argument("--out", required=True, help="destination file (directory for chains)")
    e.set_defaults(func=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
