"""Regenerate the shipped fixture files (deterministic; run from repo root).

The adjacency fixture is a synthetic planar contiguity graph on 159 areas
labeled with Georgia-style county FIPS codes; the demographic tables are
synthetic and generated with pinned seeds.
"""

import csv
import math
import os
import sys

import numpy as np
from scipy.spatial import Delaunay

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from bsbe.graph import from_edge_list  # noqa: E402

OUT = os.path.join(os.path.dirname(__file__), "..", "src", "bsbe", "fixtures")

N_AREAS = 159
AGE_GROUPS = ["15-19", "20-24", "25-29", "30-34", "35-39",
              "40-44", "45-49", "50-54", "55-59", "60-64"]
FIPS = [f"13{3 + 2 * k:03d}" for k in range(N_AREAS)]  # odd codes 13003..13319


def make_adjacency():
    rng = np.random.Generator(np.random.Philox(key=20240601))
    pts = rng.uniform(0.0, 1.0, (N_AREAS, 2))
    tri = Delaunay(pts)
    pairs = set()
    for simplex in tri.simplices:
        for a in range(3):
            i, j = int(simplex[a]), int(simplex[(a + 1) % 3])
            # drop the few very long hull edges; keeps degrees county-like
            if np.linalg.norm(pts[i] - pts[j]) < 0.35:
                pairs.add((min(i, j), max(i, j)))
    g = from_edge_list(N_AREAS, sorted(pairs), FIPS)
    from bsbe.graph import connected_components
    assert len(connected_components(g)) == 1, "fixture must be one component"
    with open(os.path.join(OUT, "georgia_adjacency.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["from_id", "to_id"])
        for i, j in g.edges:
            w.writerow([g.area_ids[i], g.area_ids[j]])
    return g


def make_population():
    rng = np.random.Generator(np.random.Philox(key=20240602))
    # county sizes span ~3 orders of magnitude, metro clusters at the top
    county_scale = np.exp(rng.normal(math.log(2.5e4), 1.0, N_AREAS))
    age_shape = np.exp(rng.normal(0.0, 0.15, len(AGE_GROUPS)))
    pop = np.outer(county_scale, age_shape / age_shape.mean()) / len(AGE_GROUPS)
    pop = np.maximum(np.round(pop), 50.0)
    # survey error grows sublinearly with size: bigger counties, smaller
    # relative error
    moe = np.round(1.645 * 6.0 * pop ** 0.6 * np.exp(rng.normal(0, 0.2, pop.shape)), 1)
    with open(os.path.join(OUT, "georgia_population.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area_id", "age_group", "population"])
        for c, fips in enumerate(FIPS):
            for a, age in enumerate(AGE_GROUPS):
                w.writerow([fips, age, int(pop[c, a])])
    with open(os.path.join(OUT, "georgia_moe.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area_id", "age_group", "moe"])
        for c, fips in enumerate(FIPS):
            for a, age in enumerate(AGE_GROUPS):
                w.writerow([fips, age, moe[c, a]])
    return pop


def make_outcomes(pop):
    """Synthetic mortality counts and covariates (no restricted data)."""
    rng = np.random.Generator(np.random.Philox(key=20240603))
    c, a = pop.shape
    prop_black = np.clip(rng.beta(2.0, 4.0, (c, 1)) + rng.normal(0, 0.02, (c, a)), 0.0, 1.0)
    ice = np.clip(0.45 - 0.6 * prop_black + rng.normal(0, 0.08, (c, a)), -1.0, 1.0)
    rate = 2.2e-4
    mu = -0.5 + 0.3 * prop_black + 1.5 * ice
    y = rng.poisson(rate * pop * np.exp(mu))
    with open(os.path.join(OUT, "georgia_counts.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area_id", "age_group", "deaths"])
        for ci, fips in enumerate(FIPS):
            for ai, age in enumerate(AGE_GROUPS):
                w.writerow([fips, age, int(y[ci, ai])])
    with open(os.path.join(OUT, "georgia_covariates.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area_id", "age_group", "prop_black", "ice"])
        for ci, fips in enumerate(FIPS):
            for ai, age in enumerate(AGE_GROUPS):
                w.writerow([fips, age, round(prop_black[ci, ai], 6),
                            round(ice[ci, ai], 6)])


def main():
    os.makedirs(OUT, exist_ok=True)
    with open(os.path.join(OUT, "age_groups.txt"), "w") as fh:
        fh.write("\n".join(AGE_GROUPS) + "\n")
    make_adjacency()
    pop = make_population()
    make_outcomes(pop)
    print("fixtures written to", OUT)


if __name__ == "__main__":
    main()
