"""Config-driven study runner: simulate -> fit -> diagnose per replicate.

The output tree is resumable (a replicate whose manifest hash matches the
requested task is skipped), failures are recorded without aborting the
run, and the aggregated tables are order-normalized so serial and
parallel executions produce identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import dataio
from .diagnostics import (
    RunSummary,
    bias_curve,
    kde2d,
    naive_occupancy,
    occupancy_summaries,
    prior_posterior_overlap,
    write_mse_table,
    write_pair_density,
    write_ppo,
    write_trends,
)

# parameter pairs whose joint point-estimate densities diagnose linkage:
# intercepts, intercept/slope, detection slopes, and the two
# autocorrelation parameter pairs
PAIR_DENSITY_PARAMS = (
    ("beta[0]", "alpha[0]"),
    ("beta[0]", "beta[1]"),
    ("alpha[0]", "alpha[1]"),
    ("alpha[0]", "alpha[2]"),
    ("alpha[1]", "alpha[2]"),
    ("phi", "sigma2"),
    ("rho", "sigma2T"),
)
from .errors import OccufieldError, UsageError
from .mcmc import MCMCConfig, PosteriorSamples, PriorSpec, fit
from .simulate import ScenarioSpec, SCENARIO_IDS, simulate_dataset, sub_scenario_grid


@dataclass(frozen=True)
class ScenarioRun:
    """One scenario block of an experiment config."""

    scenario: str
    sub_scenarios: tuple            # resolved sub labels
    replicates: int
    I: int = None
    T: int = None
    J: int = None
    mcmc: dict = field(default_factory=dict)
    priors: dict = None
    save_draws: bool = True

    def __post_init__(self):
        if self.scenario not in SCENARIO_IDS:
            raise UsageError(f"unknown scenario {self.scenario!r}")
        if self.replicates < 1:
            raise UsageError("replicates must be >= 1")

    @classmethod
    def from_dict(cls, d) -> "ScenarioRun":
        d = dict(d)
        scenario = d.pop("scenario")
        subs = d.pop("sub_scenarios", "low")
        labels = [label for label, _ in sub_scenario_grid(scenario)]
        if subs == "all":
            resolved = tuple(labels)
        else:
            if isinstance(subs, (str, int)):
                subs = [subs]
            resolved = []
            for s in subs:
                if s == "low":
                    resolved.append(labels[0])
                elif s == "high":
                    resolved.append(labels[-1])
                elif isinstance(s, int):
                    resolved.append(labels[s])
                elif s in labels:
                    resolved.append(s)
                else:
                    raise UsageError(f"unknown sub-scenario {s!r} for {scenario}")
            resolved = tuple(resolved)
        return cls(scenario=scenario, sub_scenarios=resolved, **d)

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "sub_scenarios": list(self.sub_scenarios),
            "replicates": self.replicates,
            "I": self.I,
            "T": self.T,
            "J": self.J,
            "mcmc": dict(self.mcmc),
            "priors": self.priors,
            "save_draws": self.save_draws,
        }


@dataclass(frozen=True)
class ExperimentConfig:
    runs: tuple
    out_dir: str
    base_seed: int = 0
    parallelism: int = 1

    def __post_init__(self):
        if self.parallelism < 1:
            raise UsageError("parallelism must be >= 1")

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        return cls(
            runs=tuple(ScenarioRun.from_dict(r) for r in d["scenarios"]),
            out_dir=d["out_dir"],
            base_seed=int(d.get("base_seed", 0)),
            parallelism=int(d.get("parallelism", 1)),
        )

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return {
            "scenarios": [r.to_dict() for r in self.runs],
            "out_dir": self.out_dir,
            "base_seed": self.base_seed,
            "parallelism": self.parallelism,
        }


def derive_seeds(base_seed: int, scenario_idx: int, sub_idx: int, replicate: int):
    """Deterministic, collision-free (simulation, fit) seed pair per task."""
    seq = np.random.SeedSequence(entropy=base_seed, spawn_key=(scenario_idx, sub_idx, replicate))
    sim, fit_seed = seq.generate_state(2)
    return int(sim), int(fit_seed)


def diagnose_fit(samples: PosteriorSamples, bundle, out_dir, plots: bool = False) -> dict:
    """Write the per-replicate diagnostics CSVs; returns the digest row."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    truth_psi = bundle.latent.psi if bundle.latent is not None else None
    truth_params = bundle.params
    spec = bundle.spec
    scenario = spec.study_scenario if spec is not None else "empirical"
    sub_label = spec.sub_label if spec is not None else ""

    if truth_psi is not None:
        psi_hat = samples.psi_mean()
        with open(out_dir / "psi_pairs.csv", "w") as fh:
            fh.write("site,primary,psi_true,psi_hat\n")
            for i in range(psi_hat.shape[0]):
                for t in range(psi_hat.shape[1]):
                    fh.write(f"{i},{t},{float(truth_psi[i, t])!r},{float(psi_hat[i, t])!r}\n")
        binned = bias_curve(psi_hat, truth_psi)
        with open(out_dir / "bias_bins.csv", "w") as fh:
            fh.write("bin_mid,mean_estimate,mean_truth,count\n")
            for mid, m_est, m_tru, cnt in zip(
                binned.midpoints, binned.mean_estimate, binned.mean_truth, binned.count
            ):
                est = "" if not np.isfinite(m_est) else repr(float(m_est))
                tru = "" if not np.isfinite(m_tru) else repr(float(m_tru))
                fh.write(f"{float(mid)!r},{est},{tru},{int(cnt)}\n")
        if plots:
            from .diagnostics import render_bias_curve

            render_bias_curve(psi_hat, truth_psi, binned, out_dir / "bias_curve.svg")

    ppo_entries = []
    for name in samples.scalar_parameter_names():
        draws = samples.parameter_array(name).ravel()
        if draws.size >= 100:
            ppo_entries.append((name, prior_posterior_overlap(samples.priors.entry(name), draws)))
    write_ppo(out_dir / "ppo.csv", ppo_entries)

    summ = occupancy_summaries(samples)
    naive = naive_occupancy(bundle.data)
    write_trends(out_dir / "trends.csv", year_summary=summ, naive=naive)
    if plots:
        from .diagnostics import render_trends

        render_trends(summ, naive, out_dir / "trends.svg")

    digest = RunSummary.from_fit(
        samples, truth_params, truth_psi, scenario, sub_label, replicate=-1
    )
    return digest.to_row()


def _task_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _emit_pair_densities(out_dir: Path, rows):
    """Joint densities of replicate point estimates for the linkage pairs;
    skipped for groups with too few replicates or degenerate spread."""
    from .errors import DataError

    by_group = {}
    for row in rows:
        by_group.setdefault((row["scenario"], row["sub_scenario"]), []).append(row)
    for (scenario, sub), group in by_group.items():
        if len(group) < 3:
            continue
        for p1, p2 in PAIR_DENSITY_PARAMS:
            c1, c2 = f"mean_{p1}", f"mean_{p2}"
            if c1 not in group[0] or c2 not in group[0]:
                continue
            pts = np.array([[row[c1], row[c2]] for row in group], dtype=float)
            try:
                grid = kde2d(pts, grid_n=64)
            except DataError:
                continue
            write_pair_density(out_dir / scenario / sub, p1, p2, grid)


def _replicate_job(job: dict):
    """Worker: run one (scenario, sub, replicate) task; returns its row."""
    run = ScenarioRun.from_dict(job["run"])
    sub_label = job["sub_label"]
    replicate = job["replicate"]
    rep_dir = Path(job["rep_dir"])
    sim_seed, fit_seed = job["sim_seed"], job["fit_seed"]

    spec = ScenarioSpec.build(run.scenario, sub=sub_label, I=run.I, T=run.T, J=run.J)
    ds = simulate_dataset(spec, sim_seed)
    dataio.write_dataset(ds, rep_dir / "dataset")

    mcmc_kwargs = dict(run.mcmc)
    mcmc_kwargs["seed"] = fit_seed
    config = MCMCConfig(**mcmc_kwargs)
    priors = PriorSpec.from_dict(run.priors) if run.priors else None
    samples = fit(ds.data, ds.cov, ds.coords, priors=priors, config=config)
    if run.save_draws:
        samples.to_dir(rep_dir / "fit")
    else:
        (rep_dir / "fit").mkdir(parents=True, exist_ok=True)
        samples.summary_table().to_csv(rep_dir / "fit" / "summary.csv", index=False)

    bundle = dataio.DatasetBundle(
        data=ds.data, cov=ds.cov, coords=ds.coords, manifest={},
        params=ds.params, effects=ds.effects, latent=ds.latent, spec=ds.spec,
    )
    row = diagnose_fit(samples, bundle, rep_dir / "diagnose")
    row["replicate"] = replicate
    row["sim_seed"] = sim_seed
    row["fit_seed"] = fit_seed
    return row


def _run_job_guarded(job):
    try:
        row = _replicate_job(job)
        return {"key": job["key"], "status": "ok", "row": row, "task_hash": job["task_hash"], "rep_dir": job["rep_dir"]}
    except Exception as exc:  # replicate failures are recorded, never fatal
        return {
            "key": job["key"],
            "status": "failed",
            "error": f"{type(exc).__name__}: {exc}",
            "task_hash": job["task_hash"],
            "rep_dir": job["rep_dir"],
        }


def run_experiment(config: ExperimentConfig, progress=None) -> Path:
    """Execute the study grid; returns the output directory.

    Completed replicates (matching manifest hash on disk) are skipped.
    OCC_THREADS overrides the configured parallelism degree.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "experiment.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")

    jobs = []
    finished = []
    for s_idx, run in enumerate(config.runs):
        for u_idx, sub_label in enumerate(run.sub_scenarios):
            for r in range(run.replicates):
                sim_seed, fit_seed = derive_seeds(config.base_seed, s_idx, u_idx, r)
                rep_dir = out_dir / run.scenario / sub_label / f"rep_{r:04d}"
                payload = {
                    "run": run.to_dict(),
                    "sub_label": sub_label,
                    "replicate": r,
                    "sim_seed": sim_seed,
                    "fit_seed": fit_seed,
                }
                th = _task_hash(payload)
                marker = rep_dir / "replicate.json"
                if marker.exists():
                    prev = json.loads(marker.read_text())
                    if prev.get("task_hash") == th:
                        finished.append(prev)
                        continue
                jobs.append({**payload, "rep_dir": str(rep_dir), "task_hash": th, "key": (run.scenario, sub_label, r)})

    parallelism = int(os.environ.get("OCC_THREADS", config.parallelism))
    results = []
    if jobs:
        if parallelism > 1:
            ctx = get_context("spawn")
            with ctx.Pool(processes=parallelism) as pool:
                results = pool.map(_run_job_guarded, jobs)
        else:
            results = [_run_job_guarded(job) for job in jobs]
    for res in results:
        marker = Path(res["rep_dir"]) / "replicate.json"
        marker.parent.mkdir(parents=True, exist_ok=True)
        marker.write_text(json.dumps(res, sort_keys=True, indent=2, default=str) + "\n")
        finished.append(res)
        if progress is not None:
            progress(res)

    ok = [r for r in finished if r["status"] == "ok"]
    failed = [r for r in finished if r["status"] != "ok"]
    rows = sorted((r["row"] for r in ok), key=lambda x: (x["scenario"], x["sub_scenario"], x["replicate"]))
    if rows:
        import pandas as pd

        fieldnames = sorted({k for row in rows for k in row}, key=lambda k: (k not in ("study", "scenario", "sub_scenario", "replicate"), k))
        pd.DataFrame(rows, columns=fieldnames).to_csv(out_dir / "summary.csv", index=False)
        mse_rows = [
            {c: row.get(c) for c in ("study", "scenario", "sub_scenario", "replicate", "mse_psi", "mse_phi", "mse_rho")}
            for row in rows
        ]
        import csv as _csv

        with open(out_dir / "mse_table.csv", "w", newline="") as fh:
            w = _csv.DictWriter(fh, fieldnames=["study", "scenario", "sub_scenario", "replicate", "mse_psi", "mse_phi", "mse_rho"])
            w.writeheader()
            for row in mse_rows:
                w.writerow(row)
        _emit_pair_densities(out_dir, rows)
    if failed:
        import pandas as pd

        fr = [{"scenario": r["key"][0], "sub_scenario": r["key"][1], "replicate": r["key"][2], "error": r["error"]} for r in failed]
        pd.DataFrame(sorted(fr, key=lambda x: (x["scenario"], x["sub_scenario"], x["replicate"]))).to_csv(
            out_dir / "failures.csv", index=False
        )
    return out_dir
