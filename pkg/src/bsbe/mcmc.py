"""Adaptive random-walk Metropolis-within-Gibbs sampler.

Blocks: the covariate coefficients jointly; scalar updates for the mixing
and scale parameters on logit/log transforms; single-site sweeps for the
spatial effect fields, the latent log offsets and the hierarchical error
sds.  Sites within one graph color are conditionally independent, so each
sweep is a handful of vectorized accept/reject steps rather than a Python
loop over areas.

Chains use counter-based Philox streams keyed by ``seed ^ chain_index``,
so chain-parallel and chain-serial execution produce identical draws.
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .graph import (AreaGraph, center_by_component, connected_components,
                    greedy_coloring, icar_rank)
from .model import (NEG_INF, ModelConfig, OffsetModel, ParameterState,
                    StratifiedDataset, initial_state, log_posterior,
                    log_relative_risk, random_effect)
from .offsets import clamped_cells

ADAPT_KAPPA = 0.05
SCALE_MIN, SCALE_MAX = 1e-6, 1e3
CHAIN_DUMP_MAGIC = b"BSBE"
CHAIN_DUMP_VERSION = 1


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerSettings:
    """Chain count, length and adaptation knobs."""

    n_chains: int = 8
    n_iterations: int = 80_000
    burn_in: int = 20_000
    thin: int = 10
    seed: int = 0
    adapt_target: float = 0.44
    adapt_window: int = 50

    def __post_init__(self):
        if self.n_chains < 1 or self.n_iterations < 1 or self.thin < 1:
            raise ValueError("n_chains, n_iterations and thin must be positive")
        if not 0 <= self.burn_in < self.n_iterations:
            raise ValueError("burn_in must satisfy 0 <= burn_in < n_iterations")
        if (self.n_iterations - self.burn_in) // self.thin < 2:
            raise ValueError("fewer than 2 retained draws per chain")
        if not 0.0 < self.adapt_target < 1.0:
            raise ValueError("adapt_target must be in (0, 1)")

    @property
    def n_kept(self) -> int:
        return (self.n_iterations - self.burn_in + self.thin - 1) // self.thin


def desk_profile(seed: int = 0, **overrides) -> SamplerSettings:
    """Small settings used by CI and the desk-scale simulation study."""
    kw = dict(n_chains=4, n_iterations=6_000, burn_in=2_000, thin=2, seed=seed)
    kw.update(overrides)
    return SamplerSettings(**kw)


def paper_profile(seed: int = 0) -> SamplerSettings:
    """Full-scale settings: 8 chains of 80k iterations, 20k burn-in, thin 10."""
    return SamplerSettings(seed=seed)


class BlockLedger:
    """Acceptance bookkeeping per block; frozen once burn-in ends."""

    def __init__(self):
        self.accepts: dict[str, object] = {}
        self.proposals: dict[str, object] = {}
        self.frozen = False

    def record(self, name: str, accepted, proposed) -> None:
        accepted = np.asarray(accepted, dtype=float)
        proposed = np.asarray(proposed, dtype=float)
        self.accepts[name] = self.accepts.get(name, 0.0) + accepted
        self.proposals[name] = self.proposals.get(name, 0.0) + proposed

    def rates(self) -> dict:
        out = {}
        for name, acc in self.accepts.items():
            prop = self.proposals[name]
            with np.errstate(invalid="ignore", divide="ignore"):
                out[name] = np.where(np.asarray(prop) > 0,
                                     np.asarray(acc) / np.maximum(prop, 1), 0.0)
            if np.ndim(out[name]) == 0:
                out[name] = float(out[name])
        return out

    def reset(self) -> None:
        self.accepts.clear()
        self.proposals.clear()


def adapt_scales(ledger: BlockLedger, scales: dict, target: float = 0.44,
                 kappa: float = ADAPT_KAPPA) -> dict:
    """Multiplicative scale adaptation toward the target acceptance rate.

    scale' = scale * exp(kappa * (rate - target)), clamped to [1e-6, 1e3].
    Only legal during burn-in; the ledger is frozen afterwards.
    """
    if ledger.frozen:
        raise SamplerError("adapt_scales called after burn-in (adaptation is frozen)")
    rates = ledger.rates()
    out = {}
    for name, scale in scales.items():
        rate = rates.get(name)
        if rate is None:
            out[name] = scale
        else:
            out[name] = np.clip(scale * np.exp(kappa * (np.asarray(rate) - target)),
                                SCALE_MIN, SCALE_MAX)
            if np.ndim(scale) == 0:
                out[name] = float(out[name])
    return out


# ---------------------------------------------------------------------------
# single-block Metropolis step on the full joint density


def block_update(state: ParameterState, block: str, data: StratifiedDataset,
                 config: ModelConfig, graph: AreaGraph, rng: np.random.Generator,
                 scale: float, current_log_post: float | None = None,
                 loglik_fn=None):
    """One Metropolis accept/reject for the named block.

    Symmetric Gaussian random walk on the block's unconstrained transform
    (logit for rho, log for delta / precisions / the source-wide sd, identity
    elsewhere) with the transform Jacobians included.  The structured effect
    is recentered after an accepted update.  Returns ``(state', accepted)``.
    """
    def posterior(s):
        if loglik_fn is None:
            return log_posterior(s, data, config, graph)
        from .model import log_prior
        from .offsets import offset_log_density
        lp = log_prior(s, config, graph)
        if lp == NEG_INF:
            return NEG_INF
        off = offset_log_density(s, data, config, graph)
        if off == NEG_INF:
            return NEG_INF
        return lp + off + loglik_fn(s, data)

    if current_log_post is None:
        current_log_post = posterior(state)
    if current_log_post == NEG_INF:
        raise SamplerError("block_update requires a finite current log posterior")

    prop = state.copy()
    log_jac = 0.0
    if block == "beta":
        prop.beta = state.beta + scale * rng.standard_normal(state.beta.shape)
    elif block == "theta":
        prop.theta_star = state.theta_star + scale * rng.standard_normal(graph.n_areas)
        prop.theta_star = center_by_component(prop.theta_star, graph)
    elif block == "phi":
        prop.phi_star = state.phi_star + scale * rng.standard_normal(graph.n_areas)
    elif block == "rho":
        z = math.log(state.rho / (1.0 - state.rho)) + scale * rng.standard_normal()
        prop.rho = 1.0 / (1.0 + math.exp(-z))
        log_jac = (math.log(prop.rho * (1.0 - prop.rho))
                   - math.log(state.rho * (1.0 - state.rho)))
    elif block == "delta":
        prop.delta = state.delta * math.exp(scale * rng.standard_normal())
        log_jac = math.log(prop.delta) - math.log(state.delta)
    elif block == "log_gamma":
        free = ~clamped_cells(data, config)
        step = scale * rng.standard_normal(state.log_gamma.shape)
        prop.log_gamma = state.log_gamma + np.where(free, step, 0.0)
    elif block == "log_sigma":
        prop.log_sigma_err = state.log_sigma_err + scale * rng.standard_normal(state.log_sigma_err.shape)
    elif block == "icar_precision":
        fac = np.exp(scale * rng.standard_normal(state.icar_precision_err.shape))
        prop.icar_precision_err = state.icar_precision_err * fac
        log_jac = float(np.sum(np.log(fac)))
    elif block == "sigma_wp":
        prop.sigma_wp = state.sigma_wp * math.exp(scale * rng.standard_normal())
        log_jac = math.log(prop.sigma_wp) - math.log(state.sigma_wp)
    else:
        raise ValueError(f"unknown block {block!r}")

    new_lp = posterior(prop)
    accept = new_lp > NEG_INF and math.log(rng.random()) < new_lp - current_log_post + log_jac
    return (prop, True) if accept else (state, False)


# ---------------------------------------------------------------------------
# chain containers


@dataclass
class ChainSet:
    """Thinned post-burn-in draws: [n_chains, n_kept, n_params]."""

    names: list[str]
    draws: np.ndarray
    settings: SamplerSettings
    acceptance: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self._index = {n: k for k, n in enumerate(self.names)}

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_kept(self) -> int:
        return self.draws.shape[1]

    def per_chain(self, name: str) -> np.ndarray:
        return self.draws[:, :, self._index[name]]

    def pooled(self, name: str) -> np.ndarray:
        return self.per_chain(name).reshape(-1)

    def select(self, prefix: str) -> list[str]:
        return [n for n in self.names if n.startswith(prefix)]

    # -- delimited export ---------------------------------------------------

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["chain", "iteration"] + self.names)
            for c in range(self.n_chains):
                for t in range(self.n_kept):
                    writer.writerow([c, t] + [repr(float(v)) for v in self.draws[c, t]])

    # -- binary dump --------------------------------------------------------
    # little-endian: magic "BSBE", u32 version, u32 n_chains, u32 n_kept,
    # u32 n_params, i64 seed, u32 n_iterations, u32 burn_in, u32 thin,
    # name table (u16 length + utf-8 bytes each), then the f64 draw array
    # in C order [chain, draw, param].

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(CHAIN_DUMP_MAGIC)
            fh.write(struct.pack("<IIII", CHAIN_DUMP_VERSION, self.n_chains,
                                 self.n_kept, len(self.names)))
            fh.write(struct.pack("<qIII", self.settings.seed,
                                 self.settings.n_iterations,
                                 self.settings.burn_in, self.settings.thin))
            for name in self.names:
                raw = name.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
            fh.write(np.ascontiguousarray(self.draws, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ChainSet":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHAIN_DUMP_MAGIC:
                raise ValueError(f"{path}: bad magic {magic!r}")
            version, n_chains, n_kept, n_params = struct.unpack("<IIII", fh.read(16))
            if version != CHAIN_DUMP_VERSION:
                raise ValueError(f"{path}: unsupported version {version}")
            seed, n_iter, burn, thin = struct.unpack("<qIII", fh.read(20))
            names = []
            for _ in range(n_params):
                (ln,) = struct.unpack("<H", fh.read(2))
                names.append(fh.read(ln).decode("utf-8"))
            raw = fh.read(n_chains * n_kept * n_params * 8)
            draws = np.frombuffer(raw, dtype="<f8").reshape(n_chains, n_kept, n_params).copy()
        settings = SamplerSettings(n_chains=n_chains, n_iterations=n_iter,
                                   burn_in=burn, thin=thin, seed=seed)
        return cls(names, draws, settings)


@dataclass
class SummaryTable:
    """Posterior summaries with convergence diagnostics, one row per parameter."""

    names: list[str]
    mean: np.ndarray
    sd: np.ndarray
    q2_5: np.ndarray
    median: np.ndarray
    q97_5: np.ndarray
    rhat: np.ndarray
    ess: np.ndarray

    def __post_init__(self):
        self._index = {n: k for k, n in enumerate(self.names)}

    def row(self, name: str) -> dict:
        k = self._index[name]
        return {"name": name, "mean": self.mean[k], "sd": self.sd[k],
                "q2.5": self.q2_5[k], "median": self.median[k],
                "q97.5": self.q97_5[k], "rhat": self.rhat[k], "ess": self.ess[k]}

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "mean", "sd", "q2.5", "median", "q97.5", "rhat", "ess"])
            for k, name in enumerate(self.names):
                writer.writerow([name, repr(float(self.mean[k])), repr(float(self.sd[k])),
                                 repr(float(self.q2_5[k])), repr(float(self.median[k])),
                                 repr(float(self.q97_5[k])), repr(float(self.rhat[k])),
                                 repr(float(self.ess[k]))])


# ---------------------------------------------------------------------------
# diagnostics


def split_rhat(draws: np.ndarray) -> float:
    """Classic split-R-hat: chains halved, between/within variance ratio.

    Returns 1.0 by convention when the within-chain variance is zero
    (e.g. all chains stuck at one constant).
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2 or draws.shape[0] < 2 or draws.shape[1] < 4:
        raise ValueError("split_rhat needs >= 2 chains with >= 4 draws each")
    half = draws.shape[1] // 2
    split = np.concatenate([draws[:, :half], draws[:, half:2 * half]], axis=0)
    m, n = split.shape
    chain_means = split.mean(axis=1)
    w = float(np.mean(np.var(split, axis=1, ddof=1)))
    if w == 0.0:
        return 1.0
    b = n * float(np.var(chain_means, ddof=1))
    v_hat = (n - 1) / n * w + b / n
    return float(math.sqrt(v_hat / w))


def effective_sample_size(draws: np.ndarray) -> float:
    """ESS with Geyer initial-positive-sequence truncation.

    Accepts one chain (1-D) or several (2-D, chains on axis 0).
    Autocovariances are averaged across chains; the result is floored at 1
    and capped at the total number of draws.
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    m, n = draws.shape
    if n < 10:
        raise ValueError("effective_sample_size needs at least 10 draws")
    total = m * n
    acov = np.zeros(n)
    for c in range(m):
        x = draws[c] - draws[c].mean()
        size = 2 ** int(np.ceil(np.log2(2 * n)))
        f = np.fft.rfft(x, size)
        ac = np.fft.irfft(f * np.conj(f), size)[:n].real / n
        acov += ac / m
    if acov[0] == 0.0:
        return 1.0
    rho = acov / acov[0]
    tau = 1.0
    t = 1
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0.0:
            break
        tau += 2.0 * pair
        t += 2
    ess = total / tau
    return float(min(max(ess, 1.0), total))


def summarize(chains: ChainSet) -> SummaryTable:
    """Pooled posterior summaries (type-7 quantiles) plus R-hat and ESS."""
    if chains.n_kept == 0:
        raise ValueError("empty chain set")
    n_params = len(chains.names)
    mean = np.empty(n_params)
    sd = np.empty(n_params)
    qs = np.empty((n_params, 3))
    rhat = np.empty(n_params)
    ess = np.empty(n_params)
    multi = chains.n_chains >= 2 and chains.n_kept >= 4
    for k in range(n_params):
        per = chains.draws[:, :, k]
        pooled = per.reshape(-1)
        mean[k] = pooled.mean()
        sd[k] = pooled.std(ddof=1) if pooled.size > 1 else 0.0
        qs[k] = np.quantile(pooled, [0.025, 0.5, 0.975])
        rhat[k] = split_rhat(per) if multi else float("nan")
        ess[k] = effective_sample_size(per) if chains.n_kept >= 10 else float("nan")
    return SummaryTable(list(chains.names), mean, sd, qs[:, 0], qs[:, 1], qs[:, 2],
                        rhat, ess)


# ---------------------------------------------------------------------------
# fast model-specific chain runner


class _ChainRunner:
    """Runs one chain against precomputed model structure."""

    def __init__(self, data: StratifiedDataset, config: ModelConfig,
                 graph: AreaGraph, settings: SamplerSettings):
        self.data, self.config, self.graph, self.settings = data, config, graph, settings
        c = graph.n_areas
        self.y = data.counts
        self.ysum = self.y.sum(axis=1)
        self.X = data.covariates
        self.logR = math.log(data.reference_rate)
        self.colors = greedy_coloring(graph)
        self.rank = icar_rank(graph)
        ei, ej = graph.edge_arrays
        self.ei, self.ej = ei, ej
        self.deg = np.asarray(graph.neighbor_counts, dtype=float)
        self.W = np.zeros((c, c))
        self.W[ei, ej] = 1.0
        self.W[ej, ei] = 1.0
        self.color_W = [self.W[color] for color in self.colors]
        self.nonsingleton = self.deg > 0
        self.color_free_sites = [color[self.nonsingleton[color]] for color in self.colors]
        self.color_W_free = [self.W[idx] for idx in self.color_free_sites]
        # component membership matrix for vectorized per-component centering
        comps = [sorted(s) for s in connected_components(graph)]
        self.comp_proj = np.zeros((c, len(comps)))
        for k, comp in enumerate(comps):
            if len(comp) > 1:
                self.comp_proj[comp, k] = 1.0 / len(comp)
        self.comp_member = np.zeros((len(comps), c))
        for k, comp in enumerate(comps):
            self.comp_member[k, comp] = 1.0
        self.free = ~clamped_cells(data, config)
        self.any_free = bool(self.free.any())
        self.hierarchical = config.offset_model in (OffsetModel.BERKSON_ICAR,
                                                    OffsetModel.BERKSON_WP)
        self.is_wp = config.offset_model == OffsetModel.BERKSON_WP
        self.known_sd = data.offset_log_sd
        self.singletons = self.deg == 0
        self.free_f = self.free.astype(float)
        self.theta_prop_f = self.nonsingleton.astype(float)
        self.ones_c = np.ones(c)
        self.ones_ca = np.ones_like(self.free_f)
        self.ones_a = np.ones(data.n_groups)

    # -- block layout -------------------------------------------------------

    def initial_scales(self) -> dict:
        # Rough posterior-sd guesses times the 2.4 random-walk rule; the
        # burn-in adaptation (capped drift) only corrects modest misses.
        c, a = self.data.n_areas, self.data.n_groups
        k = self.data.n_covariates
        total = float(self.y.sum())
        scales = {"beta": float(np.clip(2.4 / math.sqrt(k) / math.sqrt(total + 1.0),
                                        1e-3, 1.0))}
        if self.config.include_random_effects:
            scales.update({"theta": np.full(c, 1.0), "phi": np.full(c, 1.0),
                           "rho": 1.5, "delta": 0.8})
        if self.any_free:
            if self.known_sd is not None:
                s_eff = np.where(self.known_sd > 0, self.known_sd, 1.0)
            else:
                s_eff = math.exp(self.config.init_log_sigma)
            scales["log_gamma"] = 2.4 / np.sqrt(1.0 / s_eff ** 2 + self.y + 1.0)
        if self.hierarchical:
            scales["log_sigma"] = np.full((c, a), 1.0)
            scales["icar_precision"] = np.full(a, 1.0)
        if self.is_wp:
            scales["sigma_wp"] = 0.5
        return scales

    def param_names(self) -> list[str]:
        ids = self.graph.area_ids
        ages = self.data.age_groups
        names = [f"beta[{k}]" for k in range(self.data.n_covariates)]
        if self.config.include_random_effects:
            names += ["rho", "delta"]
            names += [f"theta_star[{i}]" for i in ids]
            names += [f"phi_star[{i}]" for i in ids]
        if self.any_free:
            names += [f"log_gamma[{i};{a}]" for i in ids for a in ages]
        if self.hierarchical:
            names += [f"log_sigma[{i};{a}]" for i in ids for a in ages]
            names += [f"icar_precision[{a}]" for a in ages]
        if self.is_wp:
            names.append("sigma_wp")
        names += [f"log_rr[{i};{a}]" for i in ids for a in ages]
        return names

    def flatten(self, st: ParameterState, mu: np.ndarray) -> np.ndarray:
        parts = [st.beta]
        if self.config.include_random_effects:
            parts += [[st.rho, st.delta], st.theta_star, st.phi_star]
        if self.any_free:
            parts.append(st.log_gamma.reshape(-1))
        if self.hierarchical:
            parts += [st.log_sigma_err.reshape(-1), st.icar_precision_err]
        if self.is_wp:
            parts.append([st.sigma_wp])
        parts.append(mu.reshape(-1))
        return np.concatenate([np.asarray(p, dtype=float).reshape(-1) for p in parts])

    # -- one chain ----------------------------------------------------------

    def run(self, chain_index: int):
        cfg, data, graph, settings = self.config, self.data, self.graph, self.settings
        rng = np.random.Generator(np.random.Philox(
            key=(settings.seed ^ chain_index) & 0xFFFFFFFFFFFFFFFF))
        st = self._init_state(rng)
        scales = self.initial_scales()
        window = BlockLedger()
        post_burn = BlockLedger()
        n_kept = settings.n_kept
        kept = np.empty((n_kept, len(self.param_names())))
        kept_i = 0

        # caches
        mu_cov = self.X @ st.beta
        re = random_effect(st)
        omega = mu_cov + re[:, None] + self.logR + st.log_gamma
        exp_om = np.exp(omega)
        rowsum = exp_om.sum(axis=1)

        def refresh():
            nonlocal mu_cov, re, omega, exp_om, rowsum
            mu_cov = self.X @ st.beta
            re = random_effect(st)
            omega = mu_cov + re[:, None] + self.logR + st.log_gamma
            exp_om = np.exp(omega)
            rowsum = exp_om.sum(axis=1)

        bsd2 = cfg.beta_prior_sd ** 2
        sf = cfg.scaling_factor

        for it in range(settings.n_iterations):
            adapting = it < settings.burn_in

            # --- beta (joint random walk) ---
            prop_beta = st.beta + scales["beta"] * rng.standard_normal(st.beta.shape)
            new_mu_cov = self.X @ prop_beta
            d = new_mu_cov - mu_cov
            new_exp = exp_om * np.exp(d)
            dll = float(np.sum(self.y * d) - np.sum(new_exp - exp_om))
            dpr = -0.5 * float(np.sum(prop_beta ** 2 - st.beta ** 2)) / bsd2
            if math.log(rng.random()) < dll + dpr:
                st.beta = prop_beta
                mu_cov, exp_om = new_mu_cov, new_exp
                omega = omega + d
                rowsum = exp_om.sum(axis=1)
                window.record("beta", 1, 1)
                if not adapting:
                    post_burn.record("beta", 1, 1)
            else:
                window.record("beta", 0, 1)
                if not adapting:
                    post_burn.record("beta", 0, 1)

            if cfg.include_random_effects:
                # --- structured effect: per-color site sweep ---
                coef = st.delta * math.sqrt(st.rho)
                acc_t = np.zeros(graph.n_areas)
                for idx, w_rows in zip(self.color_free_sites, self.color_W_free):
                    if idx.size == 0:
                        continue
                    cur = st.theta_star[idx]
                    prop = cur + scales["theta"][idx] * rng.standard_normal(idx.size)
                    dom = coef * (prop - cur)
                    dll_s = self.ysum[idx] * dom - rowsum[idx] * np.expm1(dom)
                    nb = w_rows @ st.theta_star
                    dpr_s = -0.5 * sf * (self.deg[idx] * (prop ** 2 - cur ** 2)
                                         - 2.0 * (prop - cur) * nb)
                    acc = np.log(rng.random(idx.size)) < dll_s + dpr_s
                    if acc.any():
                        upd = idx[acc]
                        st.theta_star[upd] = prop[acc]
                        fac = np.exp(dom[acc])
                        omega[upd] += dom[acc][:, None]
                        exp_om[upd] *= fac[:, None]
                        rowsum[upd] *= fac
                    acc_t[idx] += acc
                window.record("theta", acc_t, self.theta_prop_f)
                if not adapting:
                    post_burn.record("theta", acc_t, self.theta_prop_f)
                # sum-to-zero: subtract the per-component mean and shift caches
                shift = self.comp_member.T @ (self.comp_proj.T @ st.theta_star)
                st.theta_star -= shift
                dre = -coef * shift
                omega += dre[:, None]
                fac = np.exp(dre)
                exp_om *= fac[:, None]
                rowsum *= fac
                re = random_effect(st)

                # --- unstructured effect: all sites at once ---
                coef2 = st.delta * math.sqrt(1.0 - st.rho)
                cur = st.phi_star
                prop = cur + scales["phi"] * rng.standard_normal(cur.shape)
                dom = coef2 * (prop - cur)
                dll_s = self.ysum * dom - rowsum * np.expm1(dom)
                dpr_s = -0.5 * (prop ** 2 - cur ** 2)
                acc = np.log(rng.random(cur.size)) < dll_s + dpr_s
                if acc.any():
                    fac = np.exp(dom[acc])
                    st.phi_star[acc] = prop[acc]
                    omega[acc] += dom[acc][:, None]
                    exp_om[acc] *= fac[:, None]
                    rowsum[acc] *= fac
                    re = random_effect(st)
                window.record("phi", acc, self.ones_c)
                if not adapting:
                    post_burn.record("phi", acc, self.ones_c)

                # --- mixing weight on the logit scale ---
                z = math.log(st.rho / (1.0 - st.rho)) + scales["rho"] * rng.standard_normal()
                new_rho = 1.0 / (1.0 + math.exp(-z))
                ok = self._scalar_re_step(st, new_rho, st.delta, re, omega, exp_om,
                                          rowsum, rng,
                                          jac=(math.log(new_rho * (1 - new_rho))
                                               - math.log(st.rho * (1 - st.rho))))
                if ok is not None:
                    st.rho, re, omega, exp_om, rowsum = ok
                window.record("rho", 0 if ok is None else 1, 1)
                if not adapting:
                    post_burn.record("rho", 0 if ok is None else 1, 1)

                # --- overall random-effect scale on the log scale ---
                new_delta = st.delta * math.exp(scales["delta"] * rng.standard_normal())
                dps = cfg.delta_prior_scale
                dpr_d = (-0.5 * (new_delta ** 2 - st.delta ** 2) / dps ** 2
                         + math.log(new_delta) - math.log(st.delta))
                ok = self._scalar_re_step(st, st.rho, new_delta, re, omega, exp_om,
                                          rowsum, rng, jac=dpr_d)
                if ok is not None:
                    st.delta, re, omega, exp_om, rowsum = (new_delta,) + ok[1:]
                window.record("delta", 0 if ok is None else 1, 1)
                if not adapting:
                    post_burn.record("delta", 0 if ok is None else 1, 1)

            # --- latent log offsets: all free cells at once ---
            if self.any_free:
                step = scales["log_gamma"] * rng.standard_normal(st.log_gamma.shape)
                dev = st.log_gamma - data.log_offset
                if self.hierarchical:
                    var = np.exp(2.0 * st.log_sigma_err)
                    if self.is_wp:
                        var = var + st.sigma_wp ** 2
                else:
                    var = np.where(self.free, self.known_sd, 1.0) ** 2
                dll_c = self.y * step - exp_om * np.expm1(step)
                dpr_c = -0.5 * ((dev + step) ** 2 - dev ** 2) / var
                acc = (np.log(rng.random(step.shape)) < dll_c + dpr_c) & self.free
                if acc.any():
                    took = step[acc]
                    st.log_gamma[acc] += took
                    omega[acc] += took
                    exp_om[acc] *= np.exp(took)
                    rowsum = exp_om.sum(axis=1)
                window.record("log_gamma", acc, self.free_f)
                if not adapting:
                    post_burn.record("log_gamma", acc, self.free_f)

            # --- hierarchical error sds: per-color sweep over counties ---
            if self.hierarchical:
                dev = st.log_gamma - data.log_offset
                prec = st.icar_precision_err
                acc_s = np.zeros(st.log_sigma_err.shape)
                ls = st.log_sigma_err
                for color, w_rows in zip(self.colors, self.color_W):
                    cur = ls[color]
                    prop = cur + scales["log_sigma"][color] * rng.standard_normal(cur.shape)
                    var_cur = np.exp(2.0 * cur)
                    var_new = np.exp(2.0 * prop)
                    if self.is_wp:
                        var_cur = var_cur + st.sigma_wp ** 2
                        var_new = var_new + st.sigma_wp ** 2
                    d2 = dev[color] ** 2
                    d_data = (-0.5 * np.log(var_new) - 0.5 * d2 / var_new) \
                             - (-0.5 * np.log(var_cur) - 0.5 * d2 / var_cur)
                    nb = w_rows @ ls
                    d_icar = -0.5 * prec[None, :] * (
                        self.deg[color, None] * (prop ** 2 - cur ** 2)
                        - 2.0 * (prop - cur) * nb)
                    acc = np.log(rng.random(cur.shape)) < d_data + d_icar
                    if acc.any():
                        ls[color] = np.where(acc, prop, ls[color])
                    acc_s[color] += acc
                window.record("log_sigma", acc_s, self.ones_ca)
                if not adapting:
                    post_burn.record("log_sigma", acc_s, self.ones_ca)

                # --- per-age ICAR precisions (log scale) ---
                fac = np.exp(scales["icar_precision"] * rng.standard_normal(prec.shape))
                new_prec = prec * fac
                ls = st.log_sigma_err
                quad = ((ls[self.ei] - ls[self.ej]) ** 2).sum(axis=0) \
                    if self.ei.size else np.zeros(prec.shape)
                dlp = (0.5 * self.rank * np.log(fac)
                       - 0.5 * (new_prec - prec) * quad
                       + (cfg.err_precision_shape - 1.0) * np.log(fac)
                       - cfg.err_precision_rate * (new_prec - prec)
                       + np.log(fac))  # Jacobian of the log transform
                acc = np.log(rng.random(prec.shape)) < dlp
                st.icar_precision_err = np.where(acc, new_prec, prec)
                window.record("icar_precision", acc, self.ones_a)
                if not adapting:
                    post_burn.record("icar_precision", acc, self.ones_a)

            # --- source-wide extra sd (log scale) ---
            if self.is_wp:
                new_wp = st.sigma_wp * math.exp(scales["sigma_wp"] * rng.standard_normal())
                dev = st.log_gamma - data.log_offset
                base = np.exp(2.0 * st.log_sigma_err)
                var_cur = base + st.sigma_wp ** 2
                var_new = base + new_wp ** 2
                d_data = float(np.sum(-0.5 * np.log(var_new) - 0.5 * dev ** 2 / var_new)
                               - np.sum(-0.5 * np.log(var_cur) - 0.5 * dev ** 2 / var_cur))
                sc = cfg.sigma_wp_scale
                d_prior = -0.5 * (new_wp ** 2 - st.sigma_wp ** 2) / sc ** 2
                jac = math.log(new_wp) - math.log(st.sigma_wp)
                acc = math.log(rng.random()) < d_data + d_prior + jac
                if acc:
                    st.sigma_wp = new_wp
                window.record("sigma_wp", int(acc), 1)
                if not adapting:
                    post_burn.record("sigma_wp", int(acc), 1)

            # incremental cache updates drift; rebuild periodically
            if (it + 1) % 500 == 0:
                refresh()

            # --- adaptation / bookkeeping ---
            if adapting and (it + 1) % settings.adapt_window == 0:
                scales = adapt_scales(window, scales, settings.adapt_target)
                window.reset()
            if it + 1 == settings.burn_in:
                window.frozen = True

            if it >= settings.burn_in and (it - settings.burn_in) % settings.thin == 0:
                kept[kept_i] = self.flatten(st, mu_cov + re[:, None])
                kept_i += 1

        assert kept_i == n_kept
        return kept, post_burn.rates()

    def _scalar_re_step(self, st, rho, delta, re, omega, exp_om, rowsum, rng, jac):
        """Metropolis step for a global random-effect scalar (rho or delta)."""
        new_re = delta * (math.sqrt(rho) * st.theta_star
                          + math.sqrt(1.0 - rho) * st.phi_star)
        dre = new_re - re
        dll = float(np.sum(self.ysum * dre) - np.sum(rowsum * np.expm1(dre)))
        if math.log(rng.random()) < dll + jac:
            fac = np.exp(dre)
            return (rho, new_re, omega + dre[:, None], exp_om * fac[:, None],
                    rowsum * fac)
        return None

    def _init_state(self, rng) -> ParameterState:
        for _ in range(100):
            st = initial_state(self.data, self.config, self.graph)
            if self.config.include_random_effects:
                z = math.log(st.rho / (1.0 - st.rho)) + 0.25 * rng.standard_normal()
                st.rho = 1.0 / (1.0 + math.exp(-z))
                st.delta = st.delta * math.exp(0.1 * rng.standard_normal())
            st.beta = st.beta + 0.1 * rng.standard_normal(st.beta.shape)
            if self.any_free:
                st.log_gamma = st.log_gamma + np.where(
                    self.free, 0.1 * rng.standard_normal(st.log_gamma.shape), 0.0)
            if self.hierarchical:
                st.log_sigma_err = st.log_sigma_err + 0.1 * rng.standard_normal(st.log_sigma_err.shape)
            st.theta_star = center_by_component(st.theta_star, self.graph)
            if log_posterior(st, self.data, self.config, self.graph) > NEG_INF:
                return st
        raise SamplerError("no finite-density starting point found in 100 attempts")


def run_chains(data: StratifiedDataset, config: ModelConfig, graph: AreaGraph,
               settings: SamplerSettings, loglik_fn=None) -> ChainSet:
    """Sample the posterior; deterministic given the seed.

    ``loglik_fn`` replaces the Poisson likelihood (testing hook for reduced
    models with tractable posteriors); the replacement runs through the
    generic per-block updater instead of the fast path.
    """
    if data.n_areas != graph.n_areas:
        raise ValueError(f"dataset has {data.n_areas} areas, graph has {graph.n_areas}")
    config.validate_against(data)

    if loglik_fn is not None:
        return _run_generic(data, config, graph, settings, loglik_fn)

    runner = _ChainRunner(data, config, graph, settings)
    names = runner.param_names()
    n_threads = int(os.environ.get("BSBE_THREADS", "1"))
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(runner.run, range(settings.n_chains)))
    else:
        results = [runner.run(c) for c in range(settings.n_chains)]

    draws = np.stack([r[0] for r in results])
    if not np.all(np.isfinite(draws)):
        raise SamplerError("non-finite draw retained")
    acceptance: dict[str, float] = {}
    for name in results[0][1]:
        acceptance[name] = float(np.mean([np.mean(r[1][name]) for r in results]))
    return ChainSet(names, draws, settings, acceptance)


def _run_generic(data, config, graph, settings, loglik_fn) -> ChainSet:
    """Slow reference path: whole-block Metropolis via the joint density."""
    runner = _ChainRunner(data, config, graph, settings)
    blocks = list(runner.initial_scales().keys())
    names = runner.param_names()
    all_draws = []
    all_rates = []
    for chain in range(settings.n_chains):
        rng = np.random.Generator(np.random.Philox(
            key=(settings.seed ^ chain) & 0xFFFFFFFFFFFFFFFF))
        st = runner._init_state(rng)
        scales = {b: (float(np.mean(s)) if np.ndim(s) else s)
                  for b, s in runner.initial_scales().items()}
        window = BlockLedger()
        post = BlockLedger()
        kept = np.empty((settings.n_kept, len(names)))
        kept_i = 0
        for it in range(settings.n_iterations):
            adapting = it < settings.burn_in
            for b in blocks:
                st, accepted = block_update(st, b, data, config, graph, rng,
                                            scales[b], loglik_fn=loglik_fn)
                window.record(b, int(accepted), 1)
                if not adapting:
                    post.record(b, int(accepted), 1)
            if adapting and (it + 1) % settings.adapt_window == 0:
                scales = adapt_scales(window, scales, settings.adapt_target)
                window.reset()
            if it + 1 == settings.burn_in:
                window.frozen = True
            if it >= settings.burn_in and (it - settings.burn_in) % settings.thin == 0:
                mu = log_relative_risk(st, data)
                kept[kept_i] = runner.flatten(st, mu)
                kept_i += 1
        all_draws.append(kept)
        all_rates.append(post.rates())
    draws = np.stack(all_draws)
    acceptance = {b: float(np.mean([r[b] for r in all_rates])) for b in all_rates[0]}
    return ChainSet(names, draws, settings, acceptance)
