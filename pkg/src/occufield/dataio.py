"""Dataset directory layout shared by the simulator, ingestion and the CLI.

A dataset directory holds:
  encounter.csv / encounter_header.json   long-format histories + dims
  covariates.csv                          occupancy and detection design rows
  coords.csv                              site locations
  truth.json                              generative truth (simulated only)
  manifest.json                           provenance (no timestamps, so a
                                          rerun with one seed is byte-identical)
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Covariates, EncounterArray, LatentStates, ModelParams, RandomEffects
from .errors import DataError
from .fields import SiteCoords
from .simulate import ScenarioSpec, SimulatedDataset


def _fmt(v) -> str:
    return repr(float(v))


def _nan_to_none(arr):
    return [[None if not np.isfinite(v) else float(v) for v in row] for row in np.atleast_2d(arr)]


@dataclass
class DatasetBundle:
    """A dataset loaded from disk; truth fields present only for simulated data."""

    data: EncounterArray
    cov: Covariates
    coords: SiteCoords
    manifest: dict
    params: ModelParams = None
    effects: RandomEffects = None
    latent: LatentStates = None
    spec: ScenarioSpec = None


def write_dataset(ds, path) -> Path:
    """Write a SimulatedDataset (or DatasetBundle) to a directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ds.data.to_csv(path / "encounter.csv", path / "encounter_header.json")

    with open(path / "coords.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "x", "y"])
        for i, (x, y) in enumerate(ds.coords.coords):
            w.writerow([i, _fmt(x), _fmt(y)])

    occ = ds.cov.occ_design
    det = ds.cov.det_design
    kb, ka = occ.shape[2], det.shape[3]
    with open(path / "covariates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["site_id", "primary", "secondary"]
            + [f"occ_{k}" for k in range(kb)]
            + [f"det_{k}" for k in range(ka)]
        )
        for i in range(occ.shape[0]):
            for t in range(occ.shape[1]):
                occ_vals = [_fmt(v) for v in occ[i, t]]
                for j in range(det.shape[2]):
                    det_vals = ["" if not np.isfinite(v) else _fmt(v) for v in det[i, t, j]]
                    w.writerow([i, t, j] + occ_vals + det_vals)

    spec = getattr(ds, "spec", None)
    seed = getattr(ds, "seed", None)
    manifest = dict(getattr(ds, "manifest", None) or {})
    manifest.setdefault("kind", "simulated" if spec is not None else "dataset")
    manifest.update(
        {
            "I": ds.data.I,
            "T": ds.data.T,
            "J": ds.data.J,
            "layout": "unit_lattice_convention" if spec is not None else manifest.get("layout", "explicit"),
        }
    )
    if spec is not None:
        manifest["spec"] = spec.to_dict()
    if seed is not None:
        manifest["seed"] = int(seed)
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")

    params = getattr(ds, "params", None)
    if params is not None:
        truth = {
            "params": params.to_dict(),
            "omega": [float(v) for v in ds.effects.omega],
            "eta": [float(v) for v in ds.effects.eta],
            "psi": _nan_to_none(ds.latent.psi),
            "z": ds.latent.z.astype(int).tolist(),
            "p": [_nan_to_none(ds.latent.p[i]) for i in range(ds.latent.p.shape[0])],
        }
        (path / "truth.json").write_text(json.dumps(truth, sort_keys=True) + "\n")
    return path


def read_dataset(path) -> DatasetBundle:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise DataError(f"missing manifest.json in {path}")
    manifest = json.loads((path / "manifest.json").read_text())
    data = EncounterArray.from_csv(path / "encounter.csv", path / "encounter_header.json")

    coords_rows = []
    with open(path / "coords.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            coords_rows.append((int(row["site_id"]), float(row["x"]), float(row["y"])))
    coords_rows.sort()
    coords = SiteCoords(np.array([[x, y] for _, x, y in coords_rows]))

    with open(path / "covariates.csv", newline="") as fh:
        rd = csv.DictReader(fh)
        occ_cols = [c for c in rd.fieldnames if c.startswith("occ_")]
        det_cols = [c for c in rd.fieldnames if c.startswith("det_")]
        occ = np.empty((data.I, data.T, len(occ_cols)))
        det = np.empty((data.I, data.T, data.J, len(det_cols)))
        for row in rd:
            i, t, j = int(row["site_id"]), int(row["primary"]), int(row["secondary"])
            for k, c in enumerate(occ_cols):
                occ[i, t, k] = float(row[c])
            for k, c in enumerate(det_cols):
                det[i, t, j, k] = float(row[c]) if row[c] != "" else np.nan
    cov = Covariates(occ_design=occ, det_design=det)

    params = effects = latent = spec = None
    if (path / "truth.json").exists():
        truth = json.loads((path / "truth.json").read_text())
        params = ModelParams.from_dict(truth["params"])
        effects = RandomEffects(omega=np.array(truth["omega"]), eta=np.array(truth["eta"]))
        psi = np.array(truth["psi"], dtype=float)
        p = np.array(
            [[[np.nan if v is None else v for v in row] for row in site] for site in truth["p"]], dtype=float
        )
        latent = LatentStates(z=np.array(truth["z"], dtype=np.uint8), psi=psi, p=p)
    if "spec" in manifest:
        spec = ScenarioSpec.from_dict(manifest["spec"])
    return DatasetBundle(
        data=data, cov=cov, coords=coords, manifest=manifest,
        params=params, effects=effects, latent=latent, spec=spec,
    )
