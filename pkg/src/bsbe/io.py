"""Data ingestion, run configuration and delimited emitters.

CSV schemas (exact headers):
  counts      `area_id,age_group,deaths`
  population  `area_id,age_group,population`
  moe         `area_id,age_group,moe`
  covariates  `area_id,age_group,<name>...`
Age groups are opaque ordered labels.
"""

from __future__ import annotations

import configparser
import csv
import json
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .graph import AreaGraph, from_geojson, read_edge_list_csv
from .mcmc import SamplerSettings
from .model import (DataError, ModelConfig, OffsetModel, Source,
                    StratifiedDataset, reference_rate_from)
from .offsets import acs_log_scale_sd, acs_moe_to_sd


class ConfigError(ValueError):
    """Run configuration is malformed or references missing inputs."""


def fixture_path(name: str) -> str:
    """Path to a data file shipped inside the package."""
    return str(resources.files("bsbe").joinpath("fixtures", name))


def load_age_groups() -> tuple[str, ...]:
    with open(fixture_path("age_groups.txt")) as fh:
        return tuple(line.strip() for line in fh if line.strip())


# ---------------------------------------------------------------------------
# tabular readers


def _read_long_csv(path, value_columns):
    """Read an `area_id,age_group,<values...>` CSV into nested dicts."""
    if not os.path.exists(path):
        raise ConfigError(f"input file not found: {path}")
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ["area_id", "age_group", *value_columns]:
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        for row in reader:
            key = (row["area_id"].strip(), row["age_group"].strip())
            if key in out:
                raise DataError(f"{path}: duplicate cell {key}")
            out[key] = {c: row[c] for c in value_columns}
    return out


def _to_matrix(cells: dict, area_ids, age_groups, column: str, path: str) -> np.ndarray:
    mat = np.empty((len(area_ids), len(age_groups)))
    for ci, aid in enumerate(area_ids):
        for ai, age in enumerate(age_groups):
            if (aid, age) not in cells:
                raise DataError(f"{path}: missing cell for area_id {aid!r}, age_group {age!r}")
            try:
                mat[ci, ai] = float(cells[(aid, age)][column])
            except ValueError:
                raise DataError(f"{path}: non-numeric {column!r} for area_id {aid!r}") from None
    return mat


@dataclass
class RunConfig:
    """File-backed run description (INI sections [data], [sampler], [output])."""

    counts_path: str
    population_path: str
    adjacency_path: str
    source: Source
    offset_model: OffsetModel
    moe_path: str | None = None
    covariates_path: str | None = None
    covariate_columns: tuple[str, ...] = ()
    geojson_id_property: str = "GEOID"
    reference_rate: float | None = None
    settings: SamplerSettings = field(default_factory=SamplerSettings)
    output_dir: str = "out"

    @classmethod
    def from_ini(cls, path) -> "RunConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.read(path)
        if "data" not in parser:
            raise ConfigError(f"{path}: missing [data] section")
        data = parser["data"]
        for key in ("counts", "population", "adjacency", "source", "offset_model"):
            if key not in data:
                raise ConfigError(f"{path}: [data] missing key {key!r}")
        try:
            source = Source(data["source"])
        except ValueError:
            raise ConfigError(f"{path}: unknown source {data['source']!r}") from None
        try:
            offset_model = OffsetModel(data["offset_model"])
        except ValueError:
            raise ConfigError(f"{path}: unknown offset_model {data['offset_model']!r}") from None

        sampler = parser["sampler"] if "sampler" in parser else {}
        settings = SamplerSettings(
            n_chains=int(sampler.get("chains", 8)),
            n_iterations=int(sampler.get("iterations", 80_000)),
            burn_in=int(sampler.get("burn_in", 20_000)),
            thin=int(sampler.get("thin", 10)),
            seed=int(sampler.get("seed", 0)),
            adapt_target=float(sampler.get("adapt_target", 0.44)),
            adapt_window=int(sampler.get("adapt_window", 50)),
        )
        output = parser["output"] if "output" in parser else {}
        cov_cols = tuple(s.strip() for s in data.get("covariate_columns", "").split(",")
                         if s.strip())
        rate = data.get("reference_rate")
        return cls(
            counts_path=data["counts"],
            population_path=data["population"],
            adjacency_path=data["adjacency"],
            source=source,
            offset_model=offset_model,
            moe_path=data.get("moe") or None,
            covariates_path=data.get("covariates") or None,
            covariate_columns=cov_cols,
            geojson_id_property=data.get("geojson_id_property", "GEOID"),
            reference_rate=float(rate) if rate else None,
            settings=settings,
            output_dir=output.get("directory", "out"),
        )

    def validate(self) -> None:
        for label, path in (("counts", self.counts_path),
                            ("population", self.population_path),
                            ("adjacency", self.adjacency_path)):
            if not os.path.exists(path):
                raise ConfigError(f"{label} file not found: {path}")
        if self.offset_model == OffsetModel.BERKSON_KNOWN and not self.moe_path:
            raise ConfigError("offset_model BerksonKnown requires a moe file ([data] moe = ...)")
        if self.moe_path and not os.path.exists(self.moe_path):
            raise ConfigError(f"moe file not found: {self.moe_path}")
        if self.covariates_path and not os.path.exists(self.covariates_path):
            raise ConfigError(f"covariates file not found: {self.covariates_path}")


def load_graph(config: RunConfig) -> AreaGraph:
    path = config.adjacency_path
    if path.endswith(".geojson") or path.endswith(".json"):
        return from_geojson(path, config.geojson_id_property)
    return read_edge_list_csv(path)


def ingest_dataset(config: RunConfig, graph: AreaGraph | None = None) -> StratifiedDataset:
    """Read and validate the CSV inputs into a :class:`StratifiedDataset`.

    The reference rate is computed as total deaths over total population
    unless overridden; margins of error are converted to log-scale sds.
    """
    config.validate()
    if graph is None:
        graph = load_graph(config)
    area_ids = list(graph.area_ids)

    counts_cells = _read_long_csv(config.counts_path, ["deaths"])
    pop_cells = _read_long_csv(config.population_path, ["population"])

    for aid, _age in counts_cells:
        if aid not in graph.area_ids:
            raise DataError(f"{config.counts_path}: area_id {aid!r} not in adjacency graph")
    count_areas = {aid for aid, _ in counts_cells}
    for aid, _age in pop_cells:
        if aid not in count_areas:
            raise DataError(f"{config.population_path}: area_id {aid!r} not present in counts file")

    age_groups = sorted({age for _, age in counts_cells},
                        key=lambda a: _age_sort_key(a))
    counts = _to_matrix(counts_cells, area_ids, age_groups, "deaths", config.counts_path)
    if np.any(counts < 0):
        raise DataError(f"{config.counts_path}: negative death count")
    population = _to_matrix(pop_cells, area_ids, age_groups, "population",
                            config.population_path)
    if np.any(population <= 0):
        bad = np.argwhere(population <= 0)[0]
        raise DataError(f"{config.population_path}: nonpositive population for "
                        f"area_id {area_ids[bad[0]]!r}, age_group {age_groups[bad[1]]!r}")

    offset_log_sd = None
    if config.source == Source.ACS:
        if not config.moe_path:
            raise ConfigError("source ACS requires a moe file ([data] moe = ...)")
        moe_cells = _read_long_csv(config.moe_path, ["moe"])
        moe = _to_matrix(moe_cells, area_ids, age_groups, "moe", config.moe_path)
        offset_log_sd = acs_log_scale_sd(population, acs_moe_to_sd(moe))

    if config.covariates_path:
        cov_cells = _read_long_csv(config.covariates_path, list(config.covariate_columns))
        layers = [np.ones_like(counts)]
        for name in config.covariate_columns:
            layers.append(_to_matrix(cov_cells, area_ids, age_groups, name,
                                     config.covariates_path))
        covariates = np.stack(layers, axis=2)
    else:
        covariates = np.ones(counts.shape + (1,))

    rate = config.reference_rate
    if rate is None:
        rate = reference_rate_from(counts, population)
    return StratifiedDataset(counts=counts, covariates=covariates,
                             offset_values=population, source=config.source,
                             reference_rate=rate, offset_log_sd=offset_log_sd,
                             age_groups=tuple(age_groups))


def _age_sort_key(label: str):
    head = label.split("-")[0].rstrip("+")
    try:
        return (0, int(head), label)
    except ValueError:
        return (1, 0, label)


def model_config_for(config: RunConfig, scaling_factor: float) -> ModelConfig:
    return ModelConfig(offset_model=config.offset_model, scaling_factor=scaling_factor)


# ---------------------------------------------------------------------------
# derived tables


def ice_index(affluent_white: float, poor_black: float, households: float) -> float:
    """Concentration-at-extremes index (W - B) / n, in [-1, 1]."""
    if households <= 0:
        raise ValueError("households must be positive")
    if affluent_white < 0 or poor_black < 0:
        raise ValueError("household counts must be nonnegative")
    if affluent_white + poor_black > households:
        raise ValueError("W + B exceeds total households")
    return (affluent_white - poor_black) / households


def relative_error_table(population: np.ndarray, sd: np.ndarray) -> np.ndarray:
    """Element-wise sd / population."""
    population = np.asarray(population, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if population.shape != sd.shape:
        raise ValueError(f"shape mismatch: {population.shape} vs {sd.shape}")
    if np.any(population <= 0):
        raise ValueError("population must be positive")
    if np.any(sd < 0):
        raise ValueError("sd must be nonnegative")
    return sd / population


# ---------------------------------------------------------------------------
# choropleth-ready emitters

CHOROPLETH_HEADER = ["area_id", "age_group", "rr_median", "rr_q2.5", "rr_q97.5"]


def emit_choropleth_data(summary, area_ids, age_groups, out_path) -> None:
    """Write per-cell relative-risk medians and 95% intervals as CSV.

    ``summary`` is the :class:`~bsbe.mcmc.SummaryTable` of a fit whose
    parameter registry contains `log_rr[<area>;<age>]` rows.
    """
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CHOROPLETH_HEADER)
        for aid in area_ids:
            for age in age_groups:
                row = summary.row(f"log_rr[{aid};{age}]")
                writer.writerow([aid, age,
                                 repr(float(np.exp(row["median"]))),
                                 repr(float(np.exp(row["q2.5"]))),
                                 repr(float(np.exp(row["q97.5"])))])


def read_choropleth_data(path):
    """Round-trip reader for the choropleth CSV."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CHOROPLETH_HEADER:
            raise DataError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            rows.append({"area_id": row["area_id"], "age_group": row["age_group"],
                         "rr_median": float(row["rr_median"]),
                         "rr_q2.5": float(row["rr_q2.5"]),
                         "rr_q97.5": float(row["rr_q97.5"])})
    return rows


def join_choropleth_geojson(rows, geojson_path, id_property, out_path) -> None:
    """Attach per-area RR summaries to feature properties (RFC 7946)."""
    with open(geojson_path) as fh:
        doc = json.load(fh)
    by_area: dict[str, list] = {}
    for row in rows:
        by_area.setdefault(row["area_id"], []).append(row)
    for feat in doc.get("features", []):
        props = feat.setdefault("properties", {})
        aid = str(props.get(id_property))
        if aid not in by_area:
            raise DataError(f"{geojson_path}: no summary rows for feature id {aid!r}")
        for row in by_area[aid]:
            age = row["age_group"]
            props[f"rr_median[{age}]"] = row["rr_median"]
            props[f"rr_q2.5[{age}]"] = row["rr_q2.5"]
            props[f"rr_q97.5[{age}]"] = row["rr_q97.5"]
    with open(out_path, "w") as fh:
        json.dump(doc, fh)
