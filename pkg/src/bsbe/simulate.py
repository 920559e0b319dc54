"""Simulation study: generate synthetic datasets, fit model variants, score.

Data generation draws noisy populations around a reported baseline, builds
log relative risks from fixed coefficients (no spatial effects in truth),
and draws Poisson counts.  Scoring compares truth against posterior medians
and 95% intervals per replicate, for the fixed effects and for the per-cell
log relative risks.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .graph import AreaGraph, bym2_scaling_factor
from .mcmc import SamplerSettings, run_chains, summarize
from .model import (ModelConfig, OffsetModel, Source, StratifiedDataset,
                    reference_rate_from)
from .offsets import acs_log_scale_sd

log = logging.getLogger(__name__)

# observed-noise multipliers applied to the baseline sd matrix per source
# style; reported PEP errors sit below ACS sampling error, WorldPop above
SOURCE_NOISE_SCALE = {Source.PEP: 0.8, Source.ACS: 1.0, Source.WP: 2.0}

DEFAULT_MODEL_FOR_SOURCE = {
    Source.PEP: OffsetModel.BERKSON_ICAR,
    Source.ACS: OffsetModel.BERKSON_KNOWN,
    Source.WP: OffsetModel.BERKSON_WP,
}


@dataclass(frozen=True)
class SimulationSpec:
    """Fixed truth and noise settings for the study."""

    base_population: np.ndarray      # reported populations [C, A]
    population_sd: np.ndarray        # natural-scale sd of the noise [C, A]
    true_betas: tuple[float, ...] = (0.001, 0.02, 0.01)
    true_rate: float = 0.001
    n_replicates: int = 50
    seed: int = 0

    def __post_init__(self):
        base = np.asarray(self.base_population, dtype=float)
        sd = np.asarray(self.population_sd, dtype=float)
        if base.ndim != 2 or sd.shape != base.shape:
            raise ValueError("base_population and population_sd must be matching matrices")
        if np.any(base <= 0) or np.any(sd < 0):
            raise ValueError("populations must be positive, sds nonnegative")
        object.__setattr__(self, "base_population", base)
        object.__setattr__(self, "population_sd", sd)
        object.__setattr__(self, "true_betas", tuple(float(b) for b in self.true_betas))


@dataclass(frozen=True)
class SimulatedTruth:
    betas: np.ndarray       # including intercept
    log_rr: np.ndarray      # [C, A] true log relative risks
    true_population: np.ndarray


def _replicate_rng(spec: SimulationSpec, replicate: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(
        key=(spec.seed ^ (0x5151_0000 + replicate)) & 0xFFFFFFFFFFFFFFFF))


def generate_dataset(spec: SimulationSpec, graph: AreaGraph, replicate: int,
                     source: Source = Source.ACS, noise_scale: float | None = None,
                     age_groups=()) -> tuple[StratifiedDataset, SimulatedTruth]:
    """One synthetic dataset, fully determined by (seed, replicate).

    Covariates are iid standard normal per cell (plus an intercept column);
    the true population is normal around the reported baseline, truncated
    below at 1 so the Poisson rate stays positive.
    """
    c, a = spec.base_population.shape
    if graph.n_areas != c:
        raise ValueError(f"graph has {graph.n_areas} areas, spec has {c}")
    rng = _replicate_rng(spec, replicate)
    k = len(spec.true_betas)
    covs = np.empty((c, a, k))
    covs[:, :, 0] = 1.0
    covs[:, :, 1:] = rng.standard_normal((c, a, k - 1))

    if noise_scale is None:
        noise_scale = SOURCE_NOISE_SCALE[source]
    sd = spec.population_sd * noise_scale
    n_true = spec.base_population + sd * rng.standard_normal((c, a))
    n_clipped = int(np.sum(n_true < 1.0))
    if n_clipped:
        log.info("replicate %d: truncated %d nonpositive populations at 1", replicate, n_clipped)
    n_true = np.maximum(n_true, 1.0)

    betas = np.asarray(spec.true_betas)
    log_rr = covs @ betas
    y = rng.poisson(spec.true_rate * n_true * np.exp(log_rr)).astype(float)

    offset_log_sd = None
    if source == Source.ACS:
        offset_log_sd = acs_log_scale_sd(spec.base_population, sd)
    data = StratifiedDataset(
        counts=y,
        covariates=covs,
        offset_values=spec.base_population,
        source=source,
        reference_rate=reference_rate_from(y, spec.base_population),
        offset_log_sd=offset_log_sd,
        age_groups=tuple(age_groups or ()) or tuple(str(i) for i in range(a)),
    )
    truth = SimulatedTruth(betas=betas, log_rr=log_rr, true_population=n_true)
    return data, truth


def default_spec(n_areas: int, n_groups: int, n_replicates: int = 20,
                 seed: int = 0) -> SimulationSpec:
    """Deterministic desk-scale truth settings.

    Baseline populations span a few thousand to tens of thousands; their
    sds grow sublinearly with size so larger areas have smaller relative
    error, mirroring survey-style reporting.
    """
    rng = np.random.Generator(np.random.Philox(key=seed & 0xFFFFFFFFFFFFFFFF))
    base = np.exp(rng.uniform(math.log(4_000), math.log(60_000), (n_areas, n_groups)))
    sd = 12.0 * base ** 0.55
    return SimulationSpec(base_population=base, population_sd=sd,
                          n_replicates=n_replicates, seed=seed)


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class ScoreRow:
    scope: str
    me: float
    mde: float
    mae: float
    mse: float
    lc: float
    uc: float
    ic: float


@dataclass(frozen=True)
class ScoreReport:
    rows: tuple[ScoreRow, ...]

    def row(self, scope: str) -> ScoreRow:
        for r in self.rows:
            if r.scope == scope:
                return r
        raise KeyError(scope)


def _score_1d(truth: float, estimates: np.ndarray, lo: np.ndarray,
              hi: np.ndarray) -> tuple[float, ...]:
    err = truth - estimates
    me = float(np.mean(err))
    mde = float(np.median(err))
    mae = float(np.median(np.abs(err)))
    mse = float(np.mean(err ** 2))
    lc = float(np.mean(truth < lo))
    uc = float(np.mean(truth > hi))
    return me, mde, mae, mse, lc, uc, 1.0 - lc - uc


def score_fixed_effects(true_betas, estimates: np.ndarray, lo: np.ndarray,
                        hi: np.ndarray) -> ScoreReport:
    """Per-coefficient errors across replicates.

    ``estimates``/``lo``/``hi`` are [replicates, K] posterior medians and
    95% interval endpoints; errors are truth minus estimate.
    """
    estimates = np.atleast_2d(estimates)
    if estimates.shape[0] < 1:
        raise ValueError("need at least one replicate")
    rows = []
    for k, bk in enumerate(true_betas):
        rows.append(ScoreRow(f"beta[{k}]",
                             *_score_1d(float(bk), estimates[:, k], lo[:, k], hi[:, k])))
    return ScoreReport(tuple(rows))


def score_relative_risks(truth_log_rr: np.ndarray, estimates: np.ndarray,
                         lo: np.ndarray, hi: np.ndarray) -> ScoreReport:
    """Cell-level errors, averaged across cells.

    ``estimates``/``lo``/``hi`` are [replicates, C, A] posterior medians and
    95% interval endpoints per cell.  ``truth_log_rr`` is either one [C, A]
    truth shared by all replicates or a per-replicate [R, C, A] array.
    Per-cell summaries across replicates are averaged over cells.
    """
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth_log_rr, dtype=float)
    if estimates.ndim != 3:
        raise ValueError("estimates must be [replicates, areas, groups]")
    if truth.ndim == 2:
        truth = np.broadcast_to(truth, estimates.shape)
    return _score_cells_with_truth(truth, estimates,
                                   np.asarray(lo, dtype=float),
                                   np.asarray(hi, dtype=float))


def _score_cells_with_truth(truth: np.ndarray, estimates: np.ndarray,
                            lo: np.ndarray, hi: np.ndarray) -> ScoreReport:
    r, c, a = estimates.shape
    per_cell = np.empty((c * a, 7))
    i = 0
    for ci in range(c):
        for ai in range(a):
            t = truth[:, ci, ai]
            err = t - estimates[:, ci, ai]
            me = float(np.mean(err))
            mde = float(np.median(err))
            mae = float(np.median(np.abs(err)))
            mse = float(np.mean(err ** 2))
            lcp = float(np.mean(t < lo[:, ci, ai]))
            ucp = float(np.mean(t > hi[:, ci, ai]))
            per_cell[i] = (me, mde, mae, mse, lcp, ucp, 1.0 - lcp - ucp)
            i += 1
    return ScoreReport((ScoreRow("log_rr", *per_cell.mean(axis=0)),))


# ---------------------------------------------------------------------------
# full study


@dataclass
class StudyResult:
    rows: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source", "model", "scope", "ME", "MDE", "MAE",
                             "MSE", "LC", "UC", "IC"])
            for r in self.rows:
                writer.writerow([r["source"], r["model"], r["scope"],
                                 *(repr(r[k]) for k in
                                   ("ME", "MDE", "MAE", "MSE", "LC", "UC", "IC"))])


def _fit_replicate(data: StratifiedDataset, offset_model: OffsetModel,
                   graph: AreaGraph, scaling: float, settings: SamplerSettings,
                   replicate: int):
    """Fit one replicate, return (beta summary, log-RR cell summary)."""
    config = ModelConfig(offset_model=offset_model, scaling_factor=scaling)
    rep_settings = SamplerSettings(
        n_chains=settings.n_chains, n_iterations=settings.n_iterations,
        burn_in=settings.burn_in, thin=settings.thin,
        seed=(settings.seed ^ (replicate * 0x9E37_79B9)) & 0x7FFFFFFFFFFFFFFF,
        adapt_target=settings.adapt_target, adapt_window=settings.adapt_window)
    chains = run_chains(data, config, graph, rep_settings)
    k = data.n_covariates
    c, a = data.n_areas, data.n_groups
    beta_med = np.empty(k)
    beta_lo = np.empty(k)
    beta_hi = np.empty(k)
    for i in range(k):
        pooled = chains.pooled(f"beta[{i}]")
        beta_lo[i], beta_med[i], beta_hi[i] = np.quantile(pooled, [0.025, 0.5, 0.975])
    rr_names = chains.select("log_rr[")
    assert len(rr_names) == c * a
    idx = [chains.names.index(n) for n in rr_names]
    cells = chains.draws[:, :, idx].reshape(-1, c * a)
    qs = np.quantile(cells, [0.025, 0.5, 0.975], axis=0)
    rr_lo = qs[0].reshape(c, a)
    rr_med = qs[1].reshape(c, a)
    rr_hi = qs[2].reshape(c, a)
    return (beta_med, beta_lo, beta_hi), (rr_med, rr_lo, rr_hi), chains.acceptance


def run_study(spec: SimulationSpec, model_matrix, settings: SamplerSettings,
              graph: AreaGraph, age_groups=()) -> StudyResult:
    """Fit every (source, offset model) combination over all replicates.

    ``model_matrix`` is a list of ``(Source, OffsetModel)`` pairs; fit
    failures are recorded per replicate and do not abort the study.
    """
    scaling = bym2_scaling_factor(graph)
    result = StudyResult()
    for source, offset_model in model_matrix:
        if offset_model == OffsetModel.BERKSON_KNOWN and source != Source.ACS:
            raise ValueError("BerksonKnown needs ACS-style reported errors")
        k = len(spec.true_betas)
        beta_med = []
        beta_lo = []
        beta_hi = []
        rr_med = []
        rr_lo = []
        rr_hi = []
        truths = []
        for rep in range(spec.n_replicates):
            data, truth = generate_dataset(spec, graph, rep, source=source,
                                           age_groups=age_groups)
            try:
                (bm, bl, bh), (rm, rl, rh), _ = _fit_replicate(
                    data, offset_model, graph, scaling, settings, rep)
            except Exception as exc:  # fit failures are data, not fatal
                log.warning("fit failed: source=%s model=%s replicate=%d: %s",
                            source.value, offset_model.value, rep, exc)
                result.failures.append({"source": source.value,
                                        "model": offset_model.value,
                                        "replicate": rep, "error": str(exc)})
                continue
            beta_med.append(bm)
            beta_lo.append(bl)
            beta_hi.append(bh)
            rr_med.append(rm)
            rr_lo.append(rl)
            rr_hi.append(rh)
            truths.append(truth)
        if not truths:
            continue
        fixed = score_fixed_effects(spec.true_betas, np.array(beta_med),
                                    np.array(beta_lo), np.array(beta_hi))
        cells = _score_cells_with_truth(np.array([t.log_rr for t in truths]),
                                        np.array(rr_med), np.array(rr_lo),
                                        np.array(rr_hi))
        for report in (fixed, cells):
            for row in report.rows:
                result.rows.append({"source": source.value,
                                    "model": offset_model.value,
                                    "scope": row.scope, "ME": row.me,
                                    "MDE": row.mde, "MAE": row.mae,
                                    "MSE": row.mse, "LC": row.lc,
                                    "UC": row.uc, "IC": row.ic})
    return result
