"""Command-line entry points.

Subcommands: simulate, fit, diagnose, study, ingest, predict. Exit codes:
0 success, 2 usage error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .errors import DataError, NumericalError, OccufieldError, UsageError
from .fields import SiteCoords
from .harness import ExperimentConfig, diagnose_fit, run_experiment
from .ingest import CellGrid, RecordTable, build_empirical_design, ingest_records
from .mcmc import MCMCConfig, PosteriorSamples, PriorSpec, fit, predict
from .simulate import ScenarioSpec, simulate_dataset


def _load_json_arg(path):
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    return json.loads(path.read_text())


def _cmd_simulate(args) -> int:
    if args.out is None:
        raise UsageError("simulate requires --out")
    overrides = _load_json_arg(args.config)
    spec = ScenarioSpec.build(
        args.scenario,
        sub=overrides.get("sub", args.sub),
        I=overrides.get("I", args.sites),
        T=overrides.get("T", args.primary),
        J=overrides.get("J", args.secondary),
    )
    ds = simulate_dataset(spec, args.seed)
    dataio.write_dataset(ds, args.out)
    print(f"wrote dataset {spec.study_scenario}/{spec.sub_label} (I={spec.I}, T={spec.T}, J={spec.J}) to {args.out}")
    return 0


def _cmd_fit(args) -> int:
    if args.out is None:
        raise UsageError("fit requires --out")
    bundle = dataio.read_dataset(args.data)
    cfg = _load_json_arg(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    config = MCMCConfig(**cfg) if cfg else MCMCConfig(seed=args.seed or 0)
    priors = None
    if args.priors:
        priors = PriorSpec.from_dict(json.loads(Path(args.priors).read_text()))
    samples = fit(bundle.data, bundle.cov, bundle.coords, priors=priors, config=config)
    samples.meta["dataset"] = str(args.data)
    samples.to_dir(args.out, include_fields=args.full_draws)
    print(f"fit complete: {samples.n_chains} chains x {samples.n_draws} draws -> {args.out}")
    return 0


def _cmd_diagnose(args) -> int:
    if args.out is None:
        raise UsageError("diagnose requires --out")
    bundle = dataio.read_dataset(args.data)
    samples = PosteriorSamples.from_dir(args.samples, cov=bundle.cov)
    row = diagnose_fit(samples, bundle, args.out, plots=args.plots)
    print(f"diagnostics written to {args.out}")
    if row.get("mse_psi") is not None:
        print(f"mse_psi={row['mse_psi']:.5f}")
    return 0


def _cmd_study(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    if args.out is not None:
        config = ExperimentConfig(runs=config.runs, out_dir=args.out, base_seed=config.base_seed, parallelism=config.parallelism)
    if args.seed is not None:
        config = ExperimentConfig(runs=config.runs, out_dir=config.out_dir, base_seed=args.seed, parallelism=config.parallelism)
    out = run_experiment(config)
    n_rows = 0
    summary = Path(out) / "summary.csv"
    if summary.exists():
        n_rows = sum(1 for _ in open(summary)) - 1
    print(f"study complete: {n_rows} summary rows in {out}")
    return 0


def _parse_range(text, name):
    try:
        lo, hi = text.split(":")
        return int(lo), int(hi)
    except ValueError:
        raise UsageError(f"--{name} must look like FIRST:LAST") from None


def _cmd_ingest(args) -> int:
    if args.out is None:
        raise UsageError("ingest requires --out")
    records = RecordTable.from_csv(args.records)
    cells = CellGrid.from_csv(args.cells, cell_size=args.cell_size)
    years = _parse_range(args.years, "years")
    months = _parse_range(args.months, "months")
    result = ingest_records(records, args.species, years, months, cells)
    cell_cov = None
    occ_columns = ("latitude",)
    if args.covariates:
        import pandas as pd

        cell_cov = pd.read_csv(args.covariates)
        if args.occ_columns:
            occ_columns = tuple(args.occ_columns.split(","))
    cov, stats = build_empirical_design(result, cell_covariates=cell_cov, occ_columns=occ_columns)
    bundle = dataio.DatasetBundle(
        data=result.data,
        cov=cov,
        coords=cells.site_coords(),
        manifest={
            "kind": "ingested",
            "focal_species": args.species,
            "years": list(result.years),
            "months": list(result.months),
            "n_records_used": result.n_records_used,
            "n_rejected": int(len(result.rejected)),
            "standardization": stats,
        },
    )
    out = dataio.write_dataset(bundle, args.out)
    result.rejected.to_csv(Path(out) / "rejected_records.csv", index=False)
    print(
        f"ingested {result.n_records_used} records for {args.species!r}: "
        f"I={result.data.I}, T={result.data.T}, J={result.data.J}; "
        f"{len(result.rejected)} rows rejected -> {out}"
    )
    return 0


def _cmd_predict(args) -> int:
    if args.out is None:
        raise UsageError("predict requires --out")
    import pandas as pd

    bundle = dataio.read_dataset(args.data)
    samples = PosteriorSamples.from_dir(args.samples, cov=bundle.cov)
    sites = pd.read_csv(args.sites)
    for col in ("lat", "lon"):
        if col not in sites.columns:
            raise DataError(f"sites CSV needs a {col!r} column")
    new_coords = SiteCoords(sites[["lat", "lon"]].to_numpy(float))
    n_new = new_coords.n_sites
    n_t = samples.eta.shape[2]
    k_beta = samples.beta.shape[2]
    occ_cols = [c for c in sites.columns if c.startswith("occ_")]
    if len(occ_cols) != k_beta - 1:
        raise DataError(f"sites CSV must carry occ_1..occ_{k_beta - 1} columns (got {len(occ_cols)})")
    design = np.ones((n_new, n_t, k_beta))
    for k, c in enumerate(sorted(occ_cols, key=lambda s: int(s.split("_")[1]))):
        design[:, :, k + 1] = sites[c].to_numpy(float)[:, None]
    from .core import Covariates

    new_cov = Covariates(occ_design=design, det_design=np.zeros((n_new, n_t, 1, samples.alpha.shape[2])))
    rng = np.random.default_rng(args.seed or 0)
    psi = predict(samples, bundle.coords, new_coords, new_cov, rng=rng)
    flat = psi.reshape(-1, n_new, n_t)
    with open(args.out, "w") as fh:
        fh.write("site,primary,mean,q2.5,q97.5\n")
        for s in range(n_new):
            for t in range(n_t):
                draws = flat[:, s, t]
                fh.write(
                    f"{s},{t},{float(draws.mean())!r},"
                    f"{float(np.quantile(draws, 0.025))!r},{float(np.quantile(draws, 0.975))!r}\n"
                )
    print(f"predictions for {n_new} sites x {n_t} occasions -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occufield", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="random seed")
        p.add_argument("--out", type=str, default=None, help="output path")
        p.add_argument("--config", type=str, default=None, help="JSON config file")

    p = sub.add_parser("simulate", help="generate one synthetic dataset")
    p.add_argument("--scenario", required=True)
    p.add_argument("--sub", default="low", help="sub-scenario: low, high, index or label")
    p.add_argument("--sites", type=int, default=None, help="override I")
    p.add_argument("--primary", type=int, default=None, help="override T")
    p.add_argument("--secondary", type=int, default=None, help="override J")
    common(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit", help="run MCMC on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--priors", default=None, help="JSON prior spec")
    p.add_argument("--full-draws", action="store_true", help="also persist z and psi draws")
    common(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("diagnose", help="diagnostics for a fit against a dataset")
    p.add_argument("--samples", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--plots", action="store_true", help="also render SVG figures")
    common(p)
    p.set_defaults(func=_cmd_diagnose)

    p = sub.add_parser("study", help="run a full experiment config")
    common(p)
    p.set_defaults(func=_cmd_study)

    p = sub.add_parser("ingest", help="turn occurrence records into a dataset")
    p.add_argument("--records", required=True)
    p.add_argument("--cells", required=True)
    p.add_argument("--species", required=True)
    p.add_argument("--years", required=True, help="FIRST:LAST inclusive")
    p.add_argument("--months", required=True, help="FIRST:LAST inclusive")
    p.add_argument("--cell-size", type=float, default=1.0)
    p.add_argument("--covariates", default=None, help="per-cell covariate CSV")
    p.add_argument("--occ-columns", default=None, help="comma-separated covariate columns")
    common(p)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("predict", help="out-of-sample psi for new sites")
    p.add_argument("--samples", required=True)
    p.add_argument("--data", required=True, help="the fitted dataset directory")
    p.add_argument("--sites", required=True, help="CSV with lat, lon and occ_* columns")
    common(p)
    p.set_defaults(func=_cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    except OccufieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
