"""Shared fixtures: tiny graphs, synthetic datasets, config writers."""

import os

import numpy as np
import pytest

from bsbe.graph import AreaGraph, from_edge_list
from bsbe.model import ModelConfig, OffsetModel, Source, StratifiedDataset


@pytest.fixture
def path4() -> AreaGraph:
    """Path graph on 4 areas: 0-1-2-3."""
    return from_edge_list(4, [(0, 1), (1, 2), (2, 3)])


@pytest.fixture
def grid6() -> AreaGraph:
    """2x3 grid graph."""
    return from_edge_list(6, [(0, 1), (1, 2), (3, 4), (4, 5),
                              (0, 3), (1, 4), (2, 5)])


def make_dataset(n_areas=4, n_groups=2, n_covariates=2, source=Source.PEP,
                 seed=0, offset_log_sd=None):
    """Small synthetic dataset with positive counts and offsets."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    pop = rng.uniform(500.0, 5000.0, (n_areas, n_groups))
    covs = np.empty((n_areas, n_groups, n_covariates))
    covs[:, :, 0] = 1.0
    if n_covariates > 1:
        covs[:, :, 1:] = rng.standard_normal((n_areas, n_groups, n_covariates - 1))
    counts = rng.poisson(0.01 * pop).astype(float)
    if source == Source.ACS and offset_log_sd is None:
        offset_log_sd = rng.uniform(0.01, 0.1, (n_areas, n_groups))
    return StratifiedDataset(counts=counts, covariates=covs, offset_values=pop,
                             source=source,
                             reference_rate=float(counts.sum() / pop.sum()),
                             offset_log_sd=offset_log_sd)


def make_config(offset_model=OffsetModel.NAIVE, scaling_factor=0.5, **kw):
    return ModelConfig(offset_model=offset_model, scaling_factor=scaling_factor, **kw)


def write_run_ini(tmpdir, n_areas=6, n_groups=2, seed=0, source="PEP",
                  offset_model="Naive", sampler=None, extra_data=None):
    """Materialize a complete runnable config with small CSV inputs."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    ids = [f"A{k:02d}" for k in range(n_areas)]
    ages = [f"g{a}" for a in range(n_groups)]
    pop = rng.uniform(1000.0, 8000.0, (n_areas, n_groups))
    counts = rng.poisson(0.01 * pop)
    covs = rng.standard_normal((n_areas, n_groups))

    def write_long(name, header, values):
        path = os.path.join(tmpdir, name)
        with open(path, "w") as fh:
            fh.write(",".join(["area_id", "age_group"] + header) + "\n")
            for c, aid in enumerate(ids):
                for a, age in enumerate(ages):
                    fh.write(f"{aid},{age}," + ",".join(str(v[c, a]) for v in values) + "\n")
        return path

    counts_path = write_long("counts.csv", ["deaths"], [counts])
    pop_path = write_long("population.csv", ["population"], [pop])
    moe_path = write_long("moe.csv", ["moe"], [np.round(1.645 * 0.02 * pop, 2)])
    cov_path = write_long("covariates.csv", ["x1"], [np.round(covs, 6)])

    adj_path = os.path.join(tmpdir, "adjacency.csv")
    with open(adj_path, "w") as fh:
        fh.write("from_id,to_id\n")
        for k in range(n_areas - 1):
            fh.write(f"{ids[k]},{ids[k + 1]}\n")

    sampler = dict({"chains": 2, "iterations": 400, "burn_in": 100,
                    "thin": 3, "seed": 1}, **(sampler or {}))
    ini_path = os.path.join(tmpdir, "run.ini")
    with open(ini_path, "w") as fh:
        fh.write("[data]\n")
        fh.write(f"counts = {counts_path}\n")
        fh.write(f"population = {pop_path}\n")
        fh.write(f"adjacency = {adj_path}\n")
        fh.write(f"moe = {moe_path}\n")
        fh.write(f"covariates = {cov_path}\n")
        fh.write("covariate_columns = x1\n")
        fh.write(f"source = {source}\n")
        fh.write(f"offset_model = {offset_model}\n")
        for key, value in (extra_data or {}).items():
            fh.write(f"{key} = {value}\n")
        fh.write("\n[sampler]\n")
        for key, value in sampler.items():
            fh.write(f"{key} = {value}\n")
        fh.write("\n[output]\n")
        fh.write(f"directory = {os.path.join(tmpdir, 'out')}\n")
    return ini_path
