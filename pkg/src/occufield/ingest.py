"""Occurrence-record ingestion into encounter arrays.

Records carry (species, cell or lat/lon point, year, month, observer).
Within the declared study window, a cell-month with any record counts as
surveyed; the focal species' presence there gives y=1, other species'
records alone give y=0, and cell-months without records stay missing.
The per-cell-month count of unique observers is kept as an effort
covariate for the detection model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .core import Covariates, EncounterArray
from .errors import DataError, UsageError
from .fields import SiteCoords

_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class CellGrid:
    """Explicit study cells: ids plus square-cell centers (lat, lon)."""

    cell_ids: tuple
    centers: np.ndarray
    cell_size: float = 1.0

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        if centers.shape != (len(self.cell_ids), 2):
            raise UsageError("centers must be (n_cells, 2) matching cell_ids")
        if len(set(self.cell_ids)) != len(self.cell_ids):
            raise UsageError("duplicate cell ids")
        if not self.cell_size > 0:
            raise UsageError("cell_size must be > 0")
        object.__setattr__(self, "cell_ids", tuple(self.cell_ids))
        object.__setattr__(self, "centers", centers)

    @classmethod
    def from_csv(cls, path, cell_size: float = 1.0) -> "CellGrid":
        df = pd.read_csv(path)
        for col in ("cell_id", "lat", "lon"):
            if col not in df.columns:
                raise DataError(f"cells CSV must have columns cell_id, lat, lon (missing {col!r})")
        return cls(
            cell_ids=tuple(df["cell_id"].tolist()),
            centers=df[["lat", "lon"]].to_numpy(float),
            cell_size=cell_size,
        )

    def site_coords(self) -> SiteCoords:
        return SiteCoords(self.centers)

    def index_of(self, cell_id):
        try:
            return self.cell_ids.index(cell_id)
        except ValueError:
            return None

    def _grid_index(self) -> dict:
        if not hasattr(self, "_grid_index_cache"):
            half = self.cell_size / 2.0
            origin = self.centers.min(axis=0) - half
            index = {}
            for idx, (clat, clon) in enumerate(self.centers):
                key = (
                    round((clat - half - origin[0]) / self.cell_size),
                    round((clon - half - origin[1]) / self.cell_size),
                )
                index[key] = idx
            object.__setattr__(self, "_grid_index_cache", (origin, index))
        return self._grid_index_cache

    def locate_point(self, lat: float, lon: float):
        """Site index of the cell containing the point; points on a shared
        boundary go to the cell with the smaller id."""
        origin, grid_index = self._grid_index()

        def axis_candidates(value, axis):
            frac = (value - origin[axis]) / self.cell_size
            near = round(frac)
            if abs(frac - near) < _EDGE_TOL:
                return [near - 1, near]
            return [int(np.floor(frac))]

        hits = []
        for r in axis_candidates(lat, 0):
            for c in axis_candidates(lon, 1):
                if (r, c) in grid_index:
                    hits.append(grid_index[(r, c)])
        if not hits:
            return None
        return min(hits, key=lambda i: (str(self.cell_ids[i]), i))


@dataclass(frozen=True)
class RecordTable:
    """Raw occurrence rows; either a cell_id column or lat/lon points."""

    rows: pd.DataFrame

    REQUIRED = ("species", "year", "month", "observer_id")

    def __post_init__(self):
        df = self.rows
        missing = [c for c in self.REQUIRED if c not in df.columns]
        if missing:
            raise DataError(f"records missing columns {missing}")
        if "cell_id" not in df.columns and not {"lat", "lon"}.issubset(df.columns):
            raise DataError("records need a cell_id column or lat/lon columns")
        object.__setattr__(self, "rows", df.reset_index(drop=True))

    @classmethod
    def from_csv(cls, path) -> "RecordTable":
        return cls(pd.read_csv(path))


@dataclass
class IngestResult:
    data: EncounterArray
    observers: np.ndarray          # (I, T, J) unique-observer counts, NaN off-mask
    cells: CellGrid
    years: tuple
    months: tuple
    focal_species: str
    rejected: pd.DataFrame
    n_records_used: int


def ingest_records(records: RecordTable, focal_species: str, years, months, cells: CellGrid) -> IngestResult:
    """Aggregate records into an encounter array over the study window.

    years, months: inclusive (first, last) bounds; primary occasions are
    years, secondary occasions are the window's months in order.
    """
    y0, y1 = int(years[0]), int(years[1])
    m0, m1 = int(months[0]), int(months[1])
    if y1 < y0 or m1 < m0:
        raise UsageError("empty study window")
    n_t = y1 - y0 + 1
    n_j = m1 - m0 + 1
    n_i = len(cells.cell_ids)

    surveyed = np.zeros((n_i, n_t, n_j), dtype=bool)
    focal = np.zeros((n_i, n_t, n_j), dtype=bool)
    observer_sets = {}
    rejects = []
    used = 0

    id_to_index = {cid: k for k, cid in enumerate(cells.cell_ids)}
    df = records.rows
    has_cell = "cell_id" in df.columns
    for row in df.itertuples(index=False):
        try:
            month = int(row.month)
        except (TypeError, ValueError):
            rejects.append({**row._asdict(), "reason": "malformed_month"})
            continue
        if not 1 <= month <= 12:
            rejects.append({**row._asdict(), "reason": "malformed_month"})
            continue
        try:
            year = int(row.year)
        except (TypeError, ValueError):
            rejects.append({**row._asdict(), "reason": "malformed_year"})
            continue
        if not (y0 <= year <= y1 and m0 <= month <= m1):
            rejects.append({**row._asdict(), "reason": "outside_window"})
            continue
        site = None
        if has_cell and not pd.isna(row.cell_id):
            site = id_to_index.get(row.cell_id)
        elif {"lat", "lon"}.issubset(df.columns):
            site = cells.locate_point(float(row.lat), float(row.lon))
        if site is None:
            rejects.append({**row._asdict(), "reason": "unknown_cell"})
            continue
        t = year - y0
        j = month - m0
        surveyed[site, t, j] = True
        if row.species == focal_species:
            focal[site, t, j] = True
        observer_sets.setdefault((site, t, j), set()).add(row.observer_id)
        used += 1

    data = EncounterArray(y=focal.astype(np.uint8), g=surveyed.astype(np.uint8))
    observers = np.full((n_i, n_t, n_j), np.nan)
    for (i, t, j), obs in observer_sets.items():
        observers[i, t, j] = float(len(obs))
    rejected = pd.DataFrame(rejects) if rejects else pd.DataFrame(columns=list(df.columns) + ["reason"])
    return IngestResult(
        data=data,
        observers=observers,
        cells=cells,
        years=(y0, y1),
        months=(m0, m1),
        focal_species=focal_species,
        rejected=rejected,
        n_records_used=used,
    )


def _standardize(values: np.ndarray, where=None):
    sel = values if where is None else values[where]
    mean = float(np.nanmean(sel))
    sd = float(np.nanstd(sel))
    if sd == 0:
        sd = 1.0
    return (values - mean) / sd, {"mean": mean, "sd": sd}


def build_empirical_design(
    result: IngestResult,
    cell_covariates: pd.DataFrame = None,
    occ_columns=("latitude",),
    det_terms=("latitude", "observers", "month", "month2"),
):
    """Assemble standardized design matrices from an ingestion result.

    occ_columns: 'latitude' or column names of the per-cell covariate table
    (keyed by cell_id). det_terms: any of latitude, observers, month,
    month2 (quadratic of the standardized month). Standardization stats are
    returned so predictions can reuse the training scaling.
    """
    data = result.data
    n_i, n_t, n_j = data.I, data.T, data.J
    coords = result.cells.site_coords()
    stats = {}

    cov_by_id = None
    if cell_covariates is not None:
        if "cell_id" not in cell_covariates.columns:
            raise DataError("cell covariate table must be keyed by cell_id")
        cov_by_id = cell_covariates.set_index("cell_id")

    def site_column(name):
        if name == "latitude":
            return coords.coords[:, 0].copy()
        if cov_by_id is None or name not in cov_by_id.columns:
            raise UsageError(f"no covariate column {name!r}")
        try:
            return cov_by_id[name].loc[list(result.cells.cell_ids)].to_numpy(float)
        except KeyError as exc:
            raise DataError(f"covariate table is missing some cells: {exc}") from None

    occ_cols = [np.ones((n_i, n_t))]
    for name in occ_columns:
        col, st = _standardize(site_column(name))
        stats[f"occ_{name}"] = st
        occ_cols.append(np.broadcast_to(col[:, None], (n_i, n_t)))
    occ = np.stack(occ_cols, axis=2)

    mask = data.g == 1
    det_cols = [np.ones((n_i, n_t, n_j))]
    month_std = None
    for name in det_terms:
        if name == "latitude":
            col, st = _standardize(coords.coords[:, 0])
            arr = np.broadcast_to(col[:, None, None], (n_i, n_t, n_j)).copy()
        elif name == "observers":
            arr, st = _standardize(result.observers, where=mask)
        elif name == "month":
            months = np.arange(result.months[0], result.months[1] + 1, dtype=float)
            grid = np.broadcast_to(months[None, None, :], (n_i, n_t, n_j))
            arr, st = _standardize(grid.copy())
            month_std = arr
        elif name == "month2":
            if month_std is None:
                months = np.arange(result.months[0], result.months[1] + 1, dtype=float)
                grid = np.broadcast_to(months[None, None, :], (n_i, n_t, n_j))
                month_std, st_m = _standardize(grid.copy())
                stats["det_month"] = st_m
            arr, st = month_std**2, {"mean": 0.0, "sd": 1.0}
        else:
            raise UsageError(f"unknown detection term {name!r}")
        stats[f"det_{name}"] = st
        det_cols.append(arr)
    det = np.stack(det_cols, axis=3)
    cov = Covariates(occ_design=occ, det_design=det)
    cov.validate_against(data)
    return cov, stats
