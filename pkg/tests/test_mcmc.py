"""Sampler machinery: settings, adaptation, containers, diagnostics, chains."""

import math
import os

import numpy as np
import pytest

from bsbe.graph import bym2_scaling_factor, connected_components, from_edge_list
from bsbe.mcmc import (BlockLedger, ChainSet, SamplerError, SamplerSettings,
                       adapt_scales, block_update, desk_profile,
                       effective_sample_size, paper_profile, run_chains,
                       split_rhat, summarize)
from bsbe.model import (ModelConfig, OffsetModel, Source, initial_state,
                        log_posterior)
from tests.conftest import make_config, make_dataset


class TestSettings:
    def test_defaults_match_paper_profile(self):
        s = paper_profile(seed=3)
        assert (s.n_chains, s.n_iterations, s.burn_in, s.thin) == (8, 80_000, 20_000, 10)
        assert s.seed == 3

    def test_desk_profile(self):
        s = desk_profile(seed=9)
        assert (s.n_chains, s.n_iterations, s.burn_in, s.thin) == (4, 6_000, 2_000, 2)
        assert desk_profile(n_chains=2).n_chains == 2

    def test_n_kept(self):
        s = SamplerSettings(n_chains=2, n_iterations=100, burn_in=40, thin=7)
        assert s.n_kept == math.ceil(60 / 7)

    @pytest.mark.parametrize("kw", [
        {"n_chains": 0}, {"thin": 0}, {"burn_in": 100, "n_iterations": 100},
        {"burn_in": -1}, {"adapt_target": 0.0},
        {"n_iterations": 30, "burn_in": 25, "thin": 10},
    ])
    def test_rejects_bad_settings(self, kw):
        base = dict(n_chains=2, n_iterations=100, burn_in=20, thin=2)
        base.update(kw)
        with pytest.raises(ValueError):
            SamplerSettings(**base)


class TestLedgerAndAdaptation:
    def test_rates(self):
        led = BlockLedger()
        led.record("b", 1, 1)
        led.record("b", 0, 1)
        led.record("b", 1, 1)
        assert led.rates()["b"] == pytest.approx(2.0 / 3.0)

    def test_vector_rates(self):
        led = BlockLedger()
        led.record("t", np.array([True, False]), np.array([1.0, 1.0]))
        led.record("t", np.array([True, True]), np.array([1.0, 1.0]))
        assert np.allclose(led.rates()["t"], [1.0, 0.5])

    def test_zero_proposals_rate_zero(self):
        led = BlockLedger()
        led.record("t", np.array([0.0, 1.0]), np.array([0.0, 1.0]))
        assert np.allclose(led.rates()["t"], [0.0, 1.0])

    def test_adapt_direction(self):
        led = BlockLedger()
        led.record("hot", 9, 10)
        led.record("cold", 1, 10)
        scales = adapt_scales(led, {"hot": 1.0, "cold": 1.0}, target=0.44)
        assert scales["hot"] > 1.0
        assert scales["cold"] < 1.0

    def test_adapt_missing_block_unchanged(self):
        led = BlockLedger()
        led.record("a", 1, 2)
        scales = adapt_scales(led, {"a": 0.5, "b": 0.7})
        assert scales["b"] == 0.7

    def test_adapt_clamps(self):
        led = BlockLedger()
        led.record("a", 1, 1)
        out = adapt_scales(led, {"a": 9.99e2}, target=0.0, kappa=50.0)
        assert out["a"] <= 1e3

    def test_frozen_ledger_rejects_adaptation(self):
        led = BlockLedger()
        led.record("a", 1, 1)
        led.frozen = True
        with pytest.raises(SamplerError):
            adapt_scales(led, {"a": 1.0})


class TestBlockUpdate:
    def setup_method(self):
        self.graph = from_edge_list(4, [(0, 1), (1, 2), (2, 3)])
        self.data = make_dataset()
        self.config = make_config(OffsetModel.NAIVE,
                                  scaling_factor=bym2_scaling_factor(self.graph))

    def test_accept_changes_state_reject_keeps_it(self):
        rng = np.random.Generator(np.random.Philox(key=31))
        st = initial_state(self.data, self.config, self.graph)
        changed = 0
        for _ in range(50):
            st2, accepted = block_update(st, "beta", self.data, self.config,
                                         self.graph, rng, 0.05)
            if accepted:
                changed += 1
                assert not np.array_equal(st2.beta, st.beta)
            else:
                assert np.array_equal(st2.beta, st.beta)
            st = st2
        assert 0 < changed < 50

    def test_theta_stays_centered(self):
        rng = np.random.Generator(np.random.Philox(key=32))
        st = initial_state(self.data, self.config, self.graph)
        for _ in range(20):
            st, _ = block_update(st, "theta", self.data, self.config,
                                 self.graph, rng, 0.5)
        assert st.theta_star.sum() == pytest.approx(0.0, abs=1e-10)

    def test_rho_stays_in_unit_interval(self):
        rng = np.random.Generator(np.random.Philox(key=33))
        st = initial_state(self.data, self.config, self.graph)
        for _ in range(50):
            st, _ = block_update(st, "rho", self.data, self.config,
                                 self.graph, rng, 2.0)
            assert 0.0 < st.rho < 1.0

    def test_unknown_block(self):
        rng = np.random.Generator(np.random.Philox(key=34))
        st = initial_state(self.data, self.config, self.graph)
        with pytest.raises(ValueError):
            block_update(st, "nope", self.data, self.config, self.graph, rng, 1.0)

    def test_stubbed_likelihood_is_used(self):
        """With a flat stub the beta block follows the prior alone."""
        rng = np.random.Generator(np.random.Philox(key=35))
        st = initial_state(self.data, self.config, self.graph)
        accepted = 0
        for _ in range(200):
            st, acc = block_update(st, "beta", self.data, self.config,
                                   self.graph, rng, 0.1,
                                   loglik_fn=lambda s, d: 0.0)
            accepted += acc
        # tiny moves under a wide prior are accepted nearly always
        assert accepted > 150


class TestDiagnostics:
    def test_split_rhat_iid_near_one(self):
        rng = np.random.Generator(np.random.Philox(key=41))
        draws = rng.standard_normal((4, 500))
        assert abs(split_rhat(draws) - 1.0) < 0.05

    def test_split_rhat_detects_divergent_means(self):
        rng = np.random.Generator(np.random.Philox(key=42))
        draws = rng.standard_normal((2, 400))
        draws[1] += 5.0
        assert split_rhat(draws) > 1.5

    def test_split_rhat_detects_within_chain_trend(self):
        draws = np.tile(np.linspace(0.0, 1.0, 400), (2, 1))
        assert split_rhat(draws) > 1.1

    def test_split_rhat_constant_is_one(self):
        assert split_rhat(np.ones((2, 10))) == 1.0

    def test_split_rhat_validates(self):
        with pytest.raises(ValueError):
            split_rhat(np.ones(10))
        with pytest.raises(ValueError):
            split_rhat(np.ones((1, 10)))

    def test_ess_iid_near_total(self):
        rng = np.random.Generator(np.random.Philox(key=43))
        draws = rng.standard_normal((2, 2000))
        ess = effective_sample_size(draws)
        assert 0.6 * 4000 < ess <= 4000

    def test_ess_ar1_matches_theory(self):
        rng = np.random.Generator(np.random.Philox(key=44))
        phi = 0.8
        n = 60_000
        x = np.empty(n)
        x[0] = rng.standard_normal()
        eps = rng.standard_normal(n)
        for t in range(1, n):
            x[t] = phi * x[t - 1] + eps[t]
        want = n * (1.0 - phi) / (1.0 + phi)
        got = effective_sample_size(x)
        assert got == pytest.approx(want, rel=0.2)

    def test_ess_orders_by_correlation(self):
        rng = np.random.Generator(np.random.Philox(key=45))
        iid = rng.standard_normal(3000)
        smooth = np.convolve(rng.standard_normal(3050), np.ones(50) / 50, "valid")[:3000]
        assert effective_sample_size(smooth) < effective_sample_size(iid) / 5

    def test_ess_minimum_draws(self):
        with pytest.raises(ValueError):
            effective_sample_size(np.ones(5))


class TestChainSet:
    def make_chains(self, seed=50, n_params=3, n_chains=2, n_kept=20):
        rng = np.random.Generator(np.random.Philox(key=seed))
        names = [f"p[{k}]" for k in range(n_params)]
        draws = rng.standard_normal((n_chains, n_kept, n_params))
        settings = SamplerSettings(n_chains=n_chains, n_iterations=50,
                                   burn_in=10, thin=2, seed=seed)
        return ChainSet(names, draws, settings, {"beta": 0.4})

    def test_selectors(self):
        ch = self.make_chains()
        assert ch.per_chain("p[1]").shape == (2, 20)
        assert ch.pooled("p[1]").shape == (40,)
        assert ch.select("p[") == ["p[0]", "p[1]", "p[2]"]

    def test_binary_round_trip(self, tmp_path):
        ch = self.make_chains()
        path = os.path.join(tmp_path, "draws.bin")
        ch.save(path)
        back = ChainSet.load(path)
        assert back.names == ch.names
        assert np.array_equal(back.draws, ch.draws)
        assert back.settings.seed == ch.settings.seed
        assert back.settings.thin == ch.settings.thin

    def test_load_rejects_bad_magic(self, tmp_path):
        path = os.path.join(tmp_path, "junk.bin")
        with open(path, "wb") as fh:
            fh.write(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            ChainSet.load(path)

    def test_csv_round_trips_floats(self, tmp_path):
        import csv
        ch = self.make_chains()
        path = os.path.join(tmp_path, "draws.csv")
        ch.to_csv(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["chain", "iteration"] + ch.names
        assert len(rows) == 1 + 2 * 20
        assert float(rows[1][2]) == ch.draws[0, 0, 0]

    def test_summarize_quantiles_type7(self):
        ch = self.make_chains(n_params=1, n_chains=2, n_kept=50)
        table = summarize(ch)
        pooled = ch.pooled("p[0]")
        assert table.row("p[0]")["median"] == np.quantile(pooled, 0.5)
        assert table.row("p[0]")["q2.5"] == np.quantile(pooled, 0.025)
        assert table.row("p[0]")["mean"] == pytest.approx(pooled.mean(), abs=1e-14)

    def test_summary_csv(self, tmp_path):
        import csv
        table = summarize(self.make_chains())
        path = os.path.join(tmp_path, "summary.csv")
        table.to_csv(path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["name"] for r in rows] == table.names
        assert float(rows[0]["mean"]) == float(table.mean[0])


class TestRunChains:
    def small_settings(self, seed=0, n_chains=2):
        return SamplerSettings(n_chains=n_chains, n_iterations=400, burn_in=150,
                               thin=3, seed=seed)

    def fit(self, offset_model=OffsetModel.NAIVE, seed=0, source=Source.PEP,
            n_chains=2):
        graph = from_edge_list(4, [(0, 1), (1, 2), (2, 3), (0, 3)])
        data = make_dataset(source=source)
        config = make_config(offset_model, scaling_factor=bym2_scaling_factor(graph))
        return run_chains(data, config, graph, self.small_settings(seed, n_chains)), graph

    def test_shapes_and_names(self):
        ch, _ = self.fit()
        assert ch.draws.shape[0] == 2
        assert ch.draws.shape[1] == ch.settings.n_kept
        assert "beta[0]" in ch.names and "rho" in ch.names
        assert len(ch.select("log_rr[")) == 4 * 2
        assert np.all(np.isfinite(ch.draws))

    def test_same_seed_identical(self):
        a, _ = self.fit(seed=5)
        b, _ = self.fit(seed=5)
        assert np.array_equal(a.draws, b.draws)

    def test_different_seed_differs(self):
        a, _ = self.fit(seed=5)
        b, _ = self.fit(seed=6)
        assert not np.array_equal(a.draws, b.draws)

    def test_thread_parallel_matches_serial(self, monkeypatch):
        monkeypatch.delenv("BSBE_THREADS", raising=False)
        serial, _ = self.fit(seed=7, n_chains=3)
        monkeypatch.setenv("BSBE_THREADS", "3")
        parallel, _ = self.fit(seed=7, n_chains=3)
        assert np.array_equal(serial.draws, parallel.draws)

    def test_theta_draws_centered(self):
        ch, graph = self.fit(seed=8)
        names = ch.select("theta_star[")
        idx = [ch.names.index(n) for n in names]
        sums = ch.draws[:, :, idx].sum(axis=2)
        assert np.max(np.abs(sums)) < 1e-8

    def test_log_rr_consistent_with_raw_parameters(self):
        """Retained log-RR cells equal X beta + delta-mixed effects."""
        ch, _ = self.fit(seed=9)
        data = make_dataset(source=Source.PEP)
        k = data.n_covariates
        for chain in range(ch.n_chains):
            for t in (0, ch.n_kept - 1):
                row = ch.draws[chain, t]
                beta = row[:k]
                rho, delta = row[k], row[k + 1]
                theta = row[k + 2:k + 6]
                phi = row[k + 6:k + 10]
                re = delta * (math.sqrt(rho) * theta + math.sqrt(1 - rho) * phi)
                mu = data.covariates @ beta + re[:, None]
                idx = [ch.names.index(n) for n in ch.select("log_rr[")]
                assert np.allclose(row[idx], mu.reshape(-1), atol=1e-8)

    def test_berkson_known_keeps_clamped_cells(self):
        sds = np.zeros((4, 2))
        sds[2, 1] = 0.05
        graph = from_edge_list(4, [(0, 1), (1, 2), (2, 3)])
        data = make_dataset(source=Source.ACS, offset_log_sd=sds)
        config = make_config(OffsetModel.BERKSON_KNOWN,
                             scaling_factor=bym2_scaling_factor(graph))
        ch = run_chains(data, config, graph, self.small_settings())
        moved = ch.pooled("log_gamma[2;1]")
        assert np.std(moved) > 0.0
        pinned = ch.pooled("log_gamma[0;0]")
        assert np.std(pinned) == 0.0

    def test_acceptance_recorded(self):
        ch, _ = self.fit(seed=10)
        assert set(ch.acceptance) >= {"beta", "theta", "phi", "rho", "delta"}
        for rate in ch.acceptance.values():
            assert 0.0 <= rate <= 1.0

    def test_graph_size_mismatch(self):
        graph = from_edge_list(3, [(0, 1), (1, 2)])
        data = make_dataset()
        config = make_config()
        with pytest.raises(ValueError):
            run_chains(data, config, graph, self.small_settings())

    def test_stubbed_likelihood_conjugate_normal(self):
        """Normal-mean subcase: the generic path recovers the closed form."""
        graph = from_edge_list(2, [(0, 1)])
        data = make_dataset(n_areas=2, n_groups=1, n_covariates=1)
        config = make_config(OffsetModel.NAIVE, scaling_factor=1.0,
                             include_random_effects=False, beta_prior_sd=2.0)
        z = np.array([0.7, 1.1, 0.9, 1.3])
        obs_sd = 0.5

        def loglik(s, d):
            return float(-0.5 * np.sum((z - s.beta[0]) ** 2) / obs_sd ** 2)

        settings = SamplerSettings(n_chains=2, n_iterations=3000, burn_in=500,
                                   thin=2, seed=12)
        ch = run_chains(data, config, graph, settings, loglik_fn=loglik)
        prec = len(z) / obs_sd ** 2 + 1.0 / config.beta_prior_sd ** 2
        post_mean = (z.sum() / obs_sd ** 2) / prec
        post_sd = math.sqrt(1.0 / prec)
        draws = ch.pooled("beta[0]")
        ess = effective_sample_size(ch.per_chain("beta[0]"))
        mc_se = post_sd / math.sqrt(ess)
        assert abs(draws.mean() - post_mean) < 3.0 * mc_se
        assert np.std(draws, ddof=1) == pytest.approx(post_sd, rel=0.2)
