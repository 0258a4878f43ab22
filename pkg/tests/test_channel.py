"""Tests for fading links, AWGN, and reproducible random streams."""

import numpy as np
import pytest
from scipy import stats

from diffrelay.channel import (
    LinkParams,
    TopologyParams,
    draw_block_gain,
    draw_noise,
    make_stream,
    transmit,
)
from diffrelay.constellation import make_psk


class TestLinkParams:
    def test_avg_snr(self):
        link = LinkParams(sigma2=1.0, noise_var=0.01)
        assert link.avg_snr == pytest.approx(100.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            LinkParams(sigma2=0.0, noise_var=0.1)
        with pytest.raises(ValueError):
            LinkParams(sigma2=1.0, noise_var=0.0)
        with pytest.raises(ValueError):
            LinkParams(sigma2=1.0, noise_var=0.1, coherence_len=1)

    def test_coherence_default_covers_frame(self):
        link = LinkParams(sigma2=1.0, noise_var=0.1)
        assert link.coherence_len == 65


class TestTopologyParams:
    def test_n_relays(self):
        link = LinkParams(sigma2=1.0, noise_var=0.1)
        topo = TopologyParams(
            source_dest=link, source_relay=(link, link), relay_dest=(link, link)
        )
        assert topo.n_relays == 2

    def test_mismatched_lengths_rejected(self):
        link = LinkParams(sigma2=1.0, noise_var=0.1)
        with pytest.raises(ValueError):
            TopologyParams(source_dest=link, source_relay=(link,), relay_dest=())

    def test_no_relays_allowed(self):
        link = LinkParams(sigma2=1.0, noise_var=0.1)
        topo = TopologyParams(source_dest=link)
        assert topo.n_relays == 0


class TestStreams:
    def test_same_path_reproduces(self):
        a = make_stream(7, 3, 1, 4).standard_normal(100)
        b = make_stream(7, 3, 1, 4).standard_normal(100)
        np.testing.assert_array_equal(a, b)

    def test_distinct_paths_differ(self):
        a = make_stream(7, 3, 1, 4).standard_normal(100)
        b = make_stream(7, 3, 1, 5).standard_normal(100)
        c = make_stream(8, 3, 1, 4).standard_normal(100)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_draw_order_does_not_couple_streams(self):
        rng1 = make_stream(0, 1)
        rng2 = make_stream(0, 2)
        first = rng2.standard_normal(10)
        rng1.standard_normal(1000)
        again = make_stream(0, 2).standard_normal(10)
        np.testing.assert_array_equal(first, again)

    def test_path_validation(self):
        with pytest.raises(ValueError):
            make_stream(0, 1, 2, 3, 4)
        with pytest.raises(ValueError):
            make_stream(0, -1)


class TestBlockGain:
    def test_degenerate_variance(self):
        link = LinkParams(sigma2=1e-30, noise_var=0.1)
        h = draw_block_gain(link, make_stream(0, 0))
        assert isinstance(h, complex)
        assert abs(h) < 1e-13

    def test_mean_power_matches_sigma2(self):
        link = LinkParams(sigma2=2.5, noise_var=0.1)
        h = draw_block_gain(link, make_stream(1, 0), size=1_000_000)
        assert np.mean(np.abs(h) ** 2) == pytest.approx(2.5, rel=0.01)

    def test_instantaneous_snr_is_exponential(self):
        link = LinkParams(sigma2=1.0, noise_var=10 ** (-1.2))
        h = draw_block_gain(link, make_stream(2, 0), size=100_000)
        inst_snr = np.abs(h) ** 2 / link.noise_var
        ks = stats.kstest(inst_snr, "expon", args=(0.0, link.avg_snr))
        assert ks.statistic < 0.01

    def test_real_imag_balance(self):
        link = LinkParams(sigma2=1.0, noise_var=0.1)
        h = draw_block_gain(link, make_stream(3, 0), size=200_000)
        assert np.var(h.real) == pytest.approx(0.5, rel=0.02)
        assert np.var(h.imag) == pytest.approx(0.5, rel=0.02)
        assert abs(np.mean(h.real * h.imag)) < 0.005


class TestTransmit:
    def test_zero_noise_mode_exact(self):
        v = np.exp(1j * np.linspace(0.0, 3.0, 65))
        h = 0.3 - 0.8j
        y = transmit(h, v, 0.1, make_stream(0, 0), zero_noise=True)
        np.testing.assert_array_equal(y, h * v)

    def test_zero_noise_var_rejected_outside_test_mode(self):
        with pytest.raises(ValueError):
            transmit(1.0 + 0j, np.ones(4, dtype=complex), 0.0, make_stream(0, 0))

    def test_pure_noise_variance(self):
        y = transmit(1.0 + 0j, np.zeros(1_000_000, dtype=complex), 0.4, make_stream(4, 0))
        assert np.var(y) == pytest.approx(0.4, rel=0.01)

    def test_fixed_gain_mean(self):
        n = 1_000_000
        noise_var = 0.25
        h = 0.6 + 0.5j
        y = transmit(h, np.ones(n, dtype=complex), noise_var, make_stream(5, 0))
        three_sigma = 3.0 * np.sqrt(noise_var / n)
        assert abs(np.mean(y) - h) < three_sigma

    def test_differential_noise_variance_doubles(self):
        # A unit-modulus differential receiver sees e[n] - e[n-1]*x[n], whose
        # variance is twice the per-sample noise variance.
        n = 1_000_001
        noise_var = 0.3
        spec = make_psk(4)
        rng = make_stream(6, 0)
        e = draw_noise(noise_var, rng, size=n)
        x = spec.points[rng.integers(0, 4, size=n - 1)]
        e_diff = e[1:] - e[:-1] * x
        assert np.var(e_diff) == pytest.approx(2.0 * noise_var, rel=0.02)

    def test_broadcasting(self):
        h = np.array([[1.0 + 0j], [2.0 + 0j]])
        v = np.ones((1, 5), dtype=complex)
        y = transmit(h, v, 0.1, make_stream(7, 0))
        assert y.shape == (2, 5)
