"""Joint model: Poisson likelihood, BYM2 linear predictor, priors.

All densities are written as plain functions over value types so that the
sampler, the tests, and the simulation harness evaluate exactly the same
expressions.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .graph import AreaGraph, center_by_component, icar_log_density_unnormalized

NEG_INF = float("-inf")

# half-normal log-normalizer: log(2) - 0.5*log(2*pi)
_HALF_NORMAL_CONST = math.log(2.0) - 0.5 * math.log(2.0 * math.pi)
_NORMAL_CONST = -0.5 * math.log(2.0 * math.pi)


class Source(enum.Enum):
    PEP = "PEP"
    ACS = "ACS"
    WP = "WP"


class OffsetModel(enum.Enum):
    NAIVE = "Naive"
    BERKSON_KNOWN = "BerksonKnown"
    BERKSON_ICAR = "BerksonICAR"
    BERKSON_WP = "BerksonWP"


class DataError(ValueError):
    """Dataset violates a structural invariant."""


@dataclass(frozen=True)
class StratifiedDataset:
    """Observed counts, covariates and reported offsets by area and age group.

    Shapes: counts [C, A], covariates [C, A, K], offset_values [C, A].
    ``offset_log_sd`` is the known log-scale sd of the reported population
    and is present exactly when ``source`` is ACS.
    """

    counts: np.ndarray
    covariates: np.ndarray
    offset_values: np.ndarray
    source: Source
    reference_rate: float
    offset_log_sd: np.ndarray | None = None
    age_groups: tuple[str, ...] = ()

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        covs = np.asarray(self.covariates, dtype=float)
        offs = np.asarray(self.offset_values, dtype=float)
        if counts.ndim != 2:
            raise DataError("counts must be a [areas x age groups] matrix")
        if covs.shape[:2] != counts.shape or covs.ndim != 3:
            raise DataError(f"covariates shape {covs.shape} incompatible with counts {counts.shape}")
        if offs.shape != counts.shape:
            raise DataError(f"offset_values shape {offs.shape} != counts shape {counts.shape}")
        if not np.all(np.isfinite(counts)) or np.any(counts < 0):
            raise DataError("counts must be finite and nonnegative")
        if np.any(offs <= 0):
            raise DataError("offset_values must be strictly positive")
        if (self.offset_log_sd is not None) != (self.source == Source.ACS):
            raise DataError("offset_log_sd must be present iff source is ACS")
        if self.offset_log_sd is not None:
            sds = np.asarray(self.offset_log_sd, dtype=float)
            if sds.shape != counts.shape or np.any(sds < 0):
                raise DataError("offset_log_sd must be nonnegative with counts shape")
            object.__setattr__(self, "offset_log_sd", sds)
        if not self.reference_rate > 0:
            raise DataError("reference_rate must be positive")
        ages = self.age_groups or tuple(str(a) for a in range(counts.shape[1]))
        if len(ages) != counts.shape[1]:
            raise DataError("age_groups length must match number of columns")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "offset_values", offs)
        object.__setattr__(self, "age_groups", tuple(ages))

    @property
    def n_areas(self) -> int:
        return self.counts.shape[0]

    @property
    def n_groups(self) -> int:
        return self.counts.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[2]

    @property
    def log_offset(self) -> np.ndarray:
        return np.log(self.offset_values)


def reference_rate_from(counts, offsets) -> float:
    """Overall rate sum(y) / sum(n), the fixed reference level."""
    return float(np.sum(counts) / np.sum(offsets))


@dataclass(frozen=True)
class ModelConfig:
    """Offset-model choice, priors and cached graph quantities."""

    offset_model: OffsetModel
    scaling_factor: float
    beta_prior_sd: float = 5.0
    delta_prior_scale: float = 1.0
    # hyperprior on the error-field ICAR precision (gap-fill; see README)
    err_precision_shape: float = 1.0
    err_precision_rate: float = 0.01
    sigma_wp_scale: float = math.sqrt(10.0)
    init_log_sigma: float = math.log(0.05)
    include_random_effects: bool = True

    def validate_against(self, data: StratifiedDataset) -> None:
        if self.offset_model == OffsetModel.BERKSON_KNOWN and data.offset_log_sd is None:
            raise DataError("BerksonKnown requires offset_log_sd (ACS margins of error)")
        if self.offset_model in (OffsetModel.BERKSON_ICAR, OffsetModel.BERKSON_WP) \
                and data.source == Source.ACS:
            raise DataError(f"{self.offset_model.value} is for sources without reported errors")
        if not self.scaling_factor > 0:
            raise DataError("scaling_factor must be positive")


@dataclass
class ParameterState:
    """One point in the joint parameter space.

    ``theta_star`` is the scaled spatially structured effect (sums to zero
    per connected component), ``phi_star`` the unstructured effect.
    ``log_gamma`` is the latent true log offset; the error-model fields are
    used only by the hierarchical offset models.
    """

    beta: np.ndarray
    theta_star: np.ndarray
    phi_star: np.ndarray
    rho: float
    delta: float
    log_gamma: np.ndarray
    log_sigma_err: np.ndarray | None = None
    icar_precision_err: np.ndarray | None = None
    sigma_wp: float = 0.0

    def copy(self) -> "ParameterState":
        return ParameterState(
            beta=self.beta.copy(),
            theta_star=self.theta_star.copy(),
            phi_star=self.phi_star.copy(),
            rho=self.rho,
            delta=self.delta,
            log_gamma=self.log_gamma.copy(),
            log_sigma_err=None if self.log_sigma_err is None else self.log_sigma_err.copy(),
            icar_precision_err=None if self.icar_precision_err is None else self.icar_precision_err.copy(),
            sigma_wp=self.sigma_wp,
        )


def initial_state(data: StratifiedDataset, config: ModelConfig, graph: AreaGraph) -> ParameterState:
    """Deterministic starting point (chains jitter it on unconstrained scales)."""
    c, a, k = data.n_areas, data.n_groups, data.n_covariates
    hierarchical = config.offset_model in (OffsetModel.BERKSON_ICAR, OffsetModel.BERKSON_WP)
    return ParameterState(
        beta=np.zeros(k),
        theta_star=np.zeros(c),
        phi_star=np.zeros(c),
        rho=0.5,
        delta=1.0,
        log_gamma=data.log_offset.copy(),
        log_sigma_err=np.full((c, a), config.init_log_sigma) if hierarchical else None,
        icar_precision_err=np.ones(a) if hierarchical else None,
        sigma_wp=0.1 if config.offset_model == OffsetModel.BERKSON_WP else 0.0,
    )


def random_effect(state: ParameterState) -> np.ndarray:
    """Per-area combined spatial term delta*(sqrt(rho)*theta + sqrt(1-rho)*phi)."""
    return state.delta * (math.sqrt(state.rho) * state.theta_star
                          + math.sqrt(1.0 - state.rho) * state.phi_star)


def log_relative_risk(state: ParameterState, data: StratifiedDataset) -> np.ndarray:
    """mu[c,a]: covariate plus random-effect part, excluding rate and offset."""
    mu = data.covariates @ state.beta
    return mu + random_effect(state)[:, None]


def linear_predictor_matrix(state: ParameterState, data: StratifiedDataset) -> np.ndarray:
    """omega[c,a] = mu[c,a] + log R + log gamma[c,a]."""
    return log_relative_risk(state, data) + math.log(data.reference_rate) + state.log_gamma


def linear_predictor(state: ParameterState, data: StratifiedDataset, c: int, a: int) -> float:
    if not (0 <= c < data.n_areas and 0 <= a < data.n_groups):
        raise IndexError(f"cell ({c},{a}) out of range")
    mu = float(data.covariates[c, a] @ state.beta) + random_effect(state)[c]
    return mu + math.log(data.reference_rate) + float(state.log_gamma[c, a])


def relative_risk(state: ParameterState, data: StratifiedDataset, c: int, a: int) -> float:
    """exp(mu[c,a]): risk relative to the reference rate."""
    if not (0 <= c < data.n_areas and 0 <= a < data.n_groups):
        raise IndexError(f"cell ({c},{a}) out of range")
    return float(np.exp(log_relative_risk(state, data)[c, a]))


def log_likelihood(state: ParameterState, data: StratifiedDataset) -> float:
    """Poisson log likelihood; -inf (never a crash) for non-finite predictors."""
    omega = linear_predictor_matrix(state, data)
    if not np.all(np.isfinite(omega)):
        return NEG_INF
    y = data.counts
    with np.errstate(over="ignore"):
        val = float(np.sum(y * omega - np.exp(omega)) - np.sum(gammaln(y + 1.0)))
    return val if np.isfinite(val) else NEG_INF


def log_prior(state: ParameterState, config: ModelConfig, graph: AreaGraph) -> float:
    """Priors on beta, the spatial effects, rho and delta.

    The structured effect carries the scaled ICAR prior (precision equal to
    the BYM2 scaling factor), the unstructured effect a standard normal;
    rho is uniform on [0, 1] and delta half-normal.  Offset-model terms live
    in :func:`bsbe.offsets.offset_log_density`.
    """
    if not (0.0 <= state.rho <= 1.0) or not state.delta > 0:
        return NEG_INF
    lp = float(np.sum(_NORMAL_CONST - math.log(config.beta_prior_sd)
                      - 0.5 * (state.beta / config.beta_prior_sd) ** 2))
    if config.include_random_effects:
        lp += float(np.sum(_NORMAL_CONST - 0.5 * state.phi_star ** 2))
        lp += icar_log_density_unnormalized(state.theta_star, graph, config.scaling_factor)
        s = config.delta_prior_scale
        lp += _HALF_NORMAL_CONST - math.log(s) - 0.5 * (state.delta / s) ** 2
    return lp


def log_posterior(state: ParameterState, data: StratifiedDataset,
                  config: ModelConfig, graph: AreaGraph) -> float:
    """log_likelihood + log_prior + offset-model terms; -inf off support."""
    from .offsets import offset_log_density  # local import: avoid module cycle

    lp = log_prior(state, config, graph)
    if lp == NEG_INF:
        return NEG_INF
    off = offset_log_density(state, data, config, graph)
    if off == NEG_INF:
        return NEG_INF
    ll = log_likelihood(state, data)
    if ll == NEG_INF:
        return NEG_INF
    return ll + lp + off


def enforce_constraints(state: ParameterState, graph: AreaGraph) -> None:
    """Recenter the structured effect to sum to zero per component, in place."""
    state.theta_star = center_by_component(state.theta_star, graph)
