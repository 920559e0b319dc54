"""Conversions and Berkson offset-error density tests."""

import math

import numpy as np
import pytest
from scipy import stats

from bsbe.graph import from_edge_list, icar_rank, pairwise_quadratic
from bsbe.model import NEG_INF, OffsetModel, Source, initial_state
from bsbe.offsets import (acs_log_scale_sd, acs_moe_to_sd, berkson_attenuation,
                          clamped_cells, error_field_log_density,
                          offset_log_density)
from tests.conftest import make_config, make_dataset


class TestConversions:
    def test_moe_to_sd_scalar_exact(self):
        assert acs_moe_to_sd(164.5) == 100.0

    def test_moe_to_sd_array(self):
        out = acs_moe_to_sd(np.array([0.0, 1.645, 3.29]))
        assert np.allclose(out, [0.0, 1.0, 2.0], atol=1e-12)

    def test_moe_rejects_negative(self):
        with pytest.raises(ValueError):
            acs_moe_to_sd(-1.0)

    def test_log_scale_sd(self):
        assert acs_log_scale_sd(1000.0, 50.0) == pytest.approx(0.05, abs=1e-15)
        out = acs_log_scale_sd(np.array([100.0, 200.0]), np.array([10.0, 10.0]))
        assert np.allclose(out, [0.1, 0.05], atol=1e-15)

    def test_log_scale_sd_rejects(self):
        with pytest.raises(ValueError):
            acs_log_scale_sd(0.0, 1.0)
        with pytest.raises(ValueError):
            acs_log_scale_sd(10.0, -1.0)

    def test_composed_conversion(self):
        """MOE 164.5 on a population of n gives log-scale sd 100/n."""
        n = 2500.0
        assert acs_log_scale_sd(n, acs_moe_to_sd(164.5)) == 100.0 / n


class TestAttenuation:
    def test_known_value(self):
        assert berkson_attenuation(2.0, 1.0) == pytest.approx(0.8, abs=1e-15)

    def test_no_error_means_no_attenuation(self):
        assert berkson_attenuation(1.3, 0.0) == 1.0

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            berkson_attenuation(0.0, 1.0)
        with pytest.raises(ValueError):
            berkson_attenuation(1.0, -0.5)


class TestClampedCells:
    def test_naive_clamps_everything(self):
        d = make_dataset()
        assert clamped_cells(d, make_config(OffsetModel.NAIVE)).all()

    def test_known_clamps_zero_sd_cells(self):
        sds = np.array([[0.0, 0.05], [0.1, 0.0], [0.2, 0.3], [0.0, 0.0]])
        d = make_dataset(source=Source.ACS, offset_log_sd=sds)
        mask = clamped_cells(d, make_config(OffsetModel.BERKSON_KNOWN))
        assert np.array_equal(mask, sds == 0.0)

    def test_hierarchical_clamps_nothing(self):
        d = make_dataset()
        assert not clamped_cells(d, make_config(OffsetModel.BERKSON_ICAR)).any()


class TestErrorField:
    def test_matches_manual_sum(self, path4):
        cfg = make_config(OffsetModel.BERKSON_ICAR)
        rng = np.random.Generator(np.random.Philox(key=21))
        ls = rng.standard_normal((4, 3))
        prec = np.array([0.5, 1.0, 2.0])
        want = 0.0
        rank = icar_rank(path4)
        for a in range(3):
            w = prec[a]
            want += 0.5 * rank * math.log(w) - 0.5 * w * pairwise_quadratic(ls[:, a], path4)
            want += ((cfg.err_precision_shape - 1.0) * math.log(w)
                     - cfg.err_precision_rate * w)
        got = error_field_log_density(ls, prec, path4, cfg)
        assert got == pytest.approx(want, rel=1e-12)

    def test_nonpositive_precision(self, path4):
        cfg = make_config(OffsetModel.BERKSON_ICAR)
        got = error_field_log_density(np.zeros((4, 2)), np.array([1.0, 0.0]), path4, cfg)
        assert got == NEG_INF


class TestOffsetDensity:
    def test_naive_is_zero(self, path4):
        d = make_dataset()
        st = initial_state(d, make_config(OffsetModel.NAIVE), path4)
        assert offset_log_density(st, d, make_config(OffsetModel.NAIVE), path4) == 0.0

    def test_known_matches_scipy(self, path4):
        d = make_dataset(source=Source.ACS)
        cfg = make_config(OffsetModel.BERKSON_KNOWN)
        st = initial_state(d, cfg, path4)
        rng = np.random.Generator(np.random.Philox(key=22))
        st.log_gamma = d.log_offset + 0.02 * rng.standard_normal(d.counts.shape)
        want = float(stats.norm.logpdf(st.log_gamma, loc=d.log_offset,
                                       scale=d.offset_log_sd).sum())
        assert offset_log_density(st, d, cfg, path4) == pytest.approx(want, rel=1e-12)

    def test_known_clamped_cells_must_not_move(self, path4):
        sds = np.zeros((4, 2))
        sds[0, 0] = 0.1
        d = make_dataset(source=Source.ACS, offset_log_sd=sds)
        cfg = make_config(OffsetModel.BERKSON_KNOWN)
        st = initial_state(d, cfg, path4)
        st.log_gamma = d.log_offset.copy()
        st.log_gamma[1, 1] += 0.05  # clamped cell
        assert offset_log_density(st, d, cfg, path4) == NEG_INF

    def test_icar_matches_scipy_composition(self, path4):
        d = make_dataset()
        cfg = make_config(OffsetModel.BERKSON_ICAR)
        st = initial_state(d, cfg, path4)
        rng = np.random.Generator(np.random.Philox(key=23))
        st.log_gamma = d.log_offset + 0.05 * rng.standard_normal(d.counts.shape)
        st.log_sigma_err = math.log(0.05) + 0.2 * rng.standard_normal(d.counts.shape)
        want = float(stats.norm.logpdf(st.log_gamma, loc=d.log_offset,
                                       scale=np.exp(st.log_sigma_err)).sum())
        want += error_field_log_density(st.log_sigma_err, st.icar_precision_err,
                                        path4, cfg)
        assert offset_log_density(st, d, cfg, path4) == pytest.approx(want, rel=1e-12)

    def test_wp_adds_source_wide_variance(self, path4):
        d = make_dataset()
        cfg = make_config(OffsetModel.BERKSON_WP)
        st = initial_state(d, cfg, path4)
        rng = np.random.Generator(np.random.Philox(key=24))
        st.log_gamma = d.log_offset + 0.05 * rng.standard_normal(d.counts.shape)
        st.sigma_wp = 0.07
        total_sd = np.sqrt(np.exp(2.0 * st.log_sigma_err) + st.sigma_wp ** 2)
        want = float(stats.norm.logpdf(st.log_gamma, loc=d.log_offset,
                                       scale=total_sd).sum())
        want += float(stats.halfnorm.logpdf(st.sigma_wp, scale=cfg.sigma_wp_scale))
        want += error_field_log_density(st.log_sigma_err, st.icar_precision_err,
                                        path4, cfg)
        assert offset_log_density(st, d, cfg, path4) == pytest.approx(want, rel=1e-12)

    def test_wp_negative_sd_off_support(self, path4):
        d = make_dataset()
        cfg = make_config(OffsetModel.BERKSON_WP)
        st = initial_state(d, cfg, path4)
        st.sigma_wp = -0.1
        assert offset_log_density(st, d, cfg, path4) == NEG_INF

    def test_hierarchical_requires_fields(self, path4):
        d = make_dataset()
        cfg = make_config(OffsetModel.BERKSON_ICAR)
        st = initial_state(d, make_config(OffsetModel.NAIVE), path4)
        with pytest.raises(ValueError):
            offset_log_density(st, d, cfg, path4)
