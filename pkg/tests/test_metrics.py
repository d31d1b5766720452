"""ERLE curves and Welch spectra."""

import numpy as np
import pytest

from multikernel.errors import ConfigError, ShapeError
from multikernel.metrics import erle_curve, psd_welch, write_db_csv


D = np.random.default_rng(0).normal(size=20_000)


class TestErle:
    def test_no_cancellation(self):
        np.testing.assert_allclose(erle_curve(D, 0 * D).values, 0.0, atol=1e-12)

    def test_perfect_cancellation_capped(self):
        assert np.all(erle_curve(D, D).values == 160.0)

    def test_ten_percent_residual(self):
        # residual power is 1e-2 of the echo power at every sample
        assert erle_curve(D, 0.9 * D).steady_state(5000) == pytest.approx(20.0, abs=0.1)

    def test_scale_invariant(self):
        r = np.random.default_rng(1)
        d_hat = D + 0.3 * r.normal(size=D.size)
        a = erle_curve(D, d_hat).values
        b = erle_curve(7.5 * D, 7.5 * d_hat).values
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_smoothing_recursion(self):
        d = np.array([1.0, 2.0, 0.0, 1.0])
        e = np.array([0.5, 0.5, 1.0, 0.0])
        a = 0.5
        pd = pe = 0.0
        ref = []
        for dv, ev in zip(d, e):
            pd = a * pd + (1 - a) * dv**2
            pe = a * pe + (1 - a) * ev**2
            ref.append(10 * np.log10(pd / pe))
        np.testing.assert_allclose(erle_curve(d, d - e, a).values, ref, rtol=1e-12)

    def test_multi_signal_linear_averaging(self):
        d = np.ones((2, 3000))
        d_hat = np.stack([0.9 * d[0], 0.0 * d[1]])
        # powers average first: residual (0.01 + 1) / 2 against echo 1
        ss = erle_curve(d, d_hat, 0.99).steady_state(2000)
        assert ss == pytest.approx(10 * np.log10(2 / 1.01), abs=1e-6)

    def test_errors(self):
        with pytest.raises(ShapeError):
            erle_curve(np.ones(3), np.ones(4))
        with pytest.raises(ConfigError):
            erle_curve(np.ones(3), np.ones(3), 1.0)


class TestPsd:
    def test_spectral_line(self):
        k0 = 10
        z = np.exp(2j * np.pi * k0 / 256 * np.arange(8192))
        p = psd_welch(z)
        assert np.argmax(p.power_db) == k0
        # the Hann main lobe covers k0 +- 1; neighbours start two bins away
        others = np.delete(p.power_db, [k0 - 1, k0, k0 + 1])
        assert p.power_db[k0] - others.max() >= 30.0

    def test_white_noise_flat(self):
        w = np.random.default_rng(2).normal(size=100_000)
        p = psd_welch(w)
        assert abs(np.mean(p.power_db)) <= 1.0
        assert p.power_db.size == 256 and p.overlap == 128

    def test_total_power(self):
        w = 3.0 * np.random.default_rng(3).normal(size=100_000)
        p = psd_welch(w)
        assert np.sum(p.power) / p.seg_len == pytest.approx(np.var(w), rel=0.05)

    def test_scaling_by_ten(self):
        x = np.random.default_rng(4).normal(size=4096) + 0j
        np.testing.assert_allclose(psd_welch(10 * x).power_db - psd_welch(x).power_db, 20.0, atol=1e-9)

    def test_errors(self):
        with pytest.raises(ShapeError):
            psd_welch(np.ones(100), seg_len=256)
        with pytest.raises(ConfigError):
            psd_welch(np.ones(1000), seg_len=200)


def test_db_csv(tmp_path):
    write_db_csv(tmp_path / "e.csv", [1.5, -2.0])
    assert (tmp_path / "e.csv").read_text().splitlines() == ["index,value_db", "0,1.5", "1,-2.0"]
