"""Berkson error submodels for the population-at-risk offset.

Three variants: known log-scale variance (ACS margins of error), a
hierarchical spatially-correlated error field (PEP), and the same field
augmented by a source-wide variance component (WorldPop).
"""

from __future__ import annotations

import math

import numpy as np

from .graph import AreaGraph, icar_rank, pairwise_quadratic
from .model import (NEG_INF, ModelConfig, OffsetModel, ParameterState,
                    StratifiedDataset)

ACS_MOE_Z = 1.645  # 90% margin-of-error multiplier
_NORMAL_CONST = -0.5 * math.log(2.0 * math.pi)


def acs_moe_to_sd(moe: float):
    """Standard deviation implied by a 90% margin of error: moe / 1.645."""
    moe = np.asarray(moe, dtype=float)
    if np.any(moe < 0):
        raise ValueError("margin of error must be nonnegative")
    out = moe / ACS_MOE_Z
    return float(out) if out.ndim == 0 else out


def acs_log_scale_sd(n: float, sd: float):
    """First-order (delta method) sd of log population: sd / n."""
    n = np.asarray(n, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(n <= 0):
        raise ValueError("population must be positive")
    if np.any(sd < 0):
        raise ValueError("sd must be nonnegative")
    out = sd / n
    return float(out) if out.ndim == 0 else out


def berkson_attenuation(sigma_x: float, sigma_u: float) -> float:
    """Attenuation factor sigma_x^2 / (sigma_x^2 + sigma_u^2)."""
    if not sigma_x > 0:
        raise ValueError("sigma_x must be positive")
    if sigma_u < 0:
        raise ValueError("sigma_u must be nonnegative")
    return sigma_x ** 2 / (sigma_x ** 2 + sigma_u ** 2)


def clamped_cells(data: StratifiedDataset, config: ModelConfig) -> np.ndarray:
    """Boolean [C, A] mask of cells whose log offset is pinned to log n.

    Everything is clamped under the naive model; under known-variance cells
    with zero reported sd are treated as exactly known.
    """
    shape = data.counts.shape
    if config.offset_model == OffsetModel.NAIVE:
        return np.ones(shape, dtype=bool)
    if config.offset_model == OffsetModel.BERKSON_KNOWN:
        return data.offset_log_sd == 0.0
    return np.zeros(shape, dtype=bool)


def error_field_log_density(log_sigma: np.ndarray, precisions: np.ndarray,
                            graph: AreaGraph, config: ModelConfig) -> float:
    """ICAR prior over log error-sds per age group plus precision hyperpriors.

    One independent county-level ICAR field per age group, each with its own
    precision; precisions get a Gamma(shape, rate) hyperprior.
    """
    if np.any(precisions <= 0):
        return NEG_INF
    rank = icar_rank(graph)
    total = 0.0
    for a in range(log_sigma.shape[1]):
        w = float(precisions[a])
        quad = pairwise_quadratic(log_sigma[:, a], graph)
        total += 0.5 * rank * math.log(w) - 0.5 * w * quad
        total += ((config.err_precision_shape - 1.0) * math.log(w)
                  - config.err_precision_rate * w)
    return total


def offset_log_density(state: ParameterState, data: StratifiedDataset,
                       config: ModelConfig, graph: AreaGraph) -> float:
    """Log density of the latent log offsets under the configured error model.

    Returns 0 for the naive model (offsets are fixed data, not parameters).
    """
    model = config.offset_model
    if model == OffsetModel.NAIVE:
        return 0.0

    dev = state.log_gamma - data.log_offset

    if model == OffsetModel.BERKSON_KNOWN:
        s = data.offset_log_sd
        free = s > 0.0
        if np.any(dev[~free] != 0.0):
            return NEG_INF  # clamped cells may not move
        sf = s[free]
        return float(np.sum(_NORMAL_CONST - np.log(sf) - 0.5 * (dev[free] / sf) ** 2))

    if state.log_sigma_err is None or state.icar_precision_err is None:
        raise ValueError(f"{model.value} requires the hierarchical error fields")

    var = np.exp(2.0 * state.log_sigma_err)
    total = 0.0
    if model == OffsetModel.BERKSON_WP:
        if state.sigma_wp < 0:
            return NEG_INF
        var = var + state.sigma_wp ** 2
        # lower-truncated normal prior on the source-wide sd
        sc = config.sigma_wp_scale
        total += (math.log(2.0) + _NORMAL_CONST - math.log(sc)
                  - 0.5 * (state.sigma_wp / sc) ** 2)
    total += float(np.sum(_NORMAL_CONST - 0.5 * np.log(var) - 0.5 * dev ** 2 / var))
    field = error_field_log_density(state.log_sigma_err, state.icar_precision_err,
                                    graph, config)
    if field == NEG_INF:
        return NEG_INF
    return total + field
