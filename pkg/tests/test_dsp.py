import numpy as np
import pytest
import scipy.constants as const
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal as sps_signal
from scipy import stats
from scipy.special import erfc

from blindeq import dsp
from blindeq.equalizers import hard_decision_euclidean
from blindeq.qstats import PAM4


def awgn_pam4_mf_ser(snr_db, n_sym, seed):
    """PAM-4 through RRC shaping, AWGN, matched RRC and symbol-rate sampling."""
    rng = np.random.default_rng(seed)
    sps, span = 4, 32
    idx = rng.integers(0, 4, n_sym)
    p = dsp.rrc_taps(0.1, span, sps)
    tx = dsp.convolve(dsp.upsample_zero_insert(PAM4.array[idx], sps), p)
    rx = dsp.convolve(dsp.awgn(tx, snr_db, rng, sps=sps), p)
    delay = span * sps  # two half-filters of span*sps/2 samples each
    z = rx[delay : delay + sps * n_sym : sps]
    return dsp.symbol_error_rate(hard_decision_euclidean(z, PAM4), idx)


class TestRrc:
    def test_unit_energy(self):
        for beta in (0.1, 0.25, 0.5, 1.0):
            assert abs(np.sum(dsp.rrc_taps(beta, 32, 4) ** 2) - 1.0) < 1e-12

    @staticmethod
    def _worst_isi(span, sps=4):
        p = dsp.rrc_taps(0.1, span, sps)
        rc = np.convolve(p, p)
        c = rc.size // 2
        sym_taps = rc[c % sps :: sps]
        return np.max(np.abs(np.delete(sym_taps, c // sps))) / rc[c]

    def test_matched_cascade_nyquist(self):
        assert self._worst_isi(32) < 1e-3

    def test_matched_cascade_nyquist_long_span(self):
        # truncation ISI peaks at lag span/2 and shrinks with span
        assert self._worst_isi(64) < 1e-3
        assert self._worst_isi(128) < self._worst_isi(64) < self._worst_isi(32)

    def test_singular_points_finite_and_continuous(self):
        # rolloff 0.25 puts t = +-T/(4 rolloff) = +-1 on the sample grid
        p = dsp.rrc_taps(0.25, 8, 4)
        c = p.size // 2
        assert np.all(np.isfinite(p))
        # the limit values agree with a slightly perturbed, non-singular rolloff
        near = dsp.rrc_taps(0.25 * (1 + 1e-6), 8, 4)
        assert abs(p[c + 4] - near[c + 4]) < 1e-5
        assert abs(p[c] - near[c]) < 1e-5

    def test_small_rolloff_approaches_sinc(self):
        sps = 4
        p = dsp.rrc_taps(1e-4, 16, sps)
        t = (np.arange(p.size) - p.size // 2) / sps
        ref = np.sinc(t)
        assert np.max(np.abs(p / p[p.size // 2] - ref)) < 1e-3

    def test_rejects_bad_rolloff(self):
        for b in (0.0, 1.5):
            with pytest.raises(ValueError):
                dsp.rrc_taps(b, 8, 4)


class TestResampling:
    def test_upsample(self):
        assert dsp.upsample_zero_insert([1.0, 2.0], 2).tolist() == [1, 0, 2, 0]

    def test_convolve_identity(self):
        x = np.random.default_rng(0).normal(size=20)
        assert np.allclose(dsp.convolve(x, [1.0]), x)
        assert np.allclose(dsp.convolve(x, [0.0, 1.0, 0.0], mode="same"), x)
        with pytest.raises(ValueError):
            dsp.convolve(x, [1.0], mode="valid")

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 8), st.integers(1, 30))
    def test_length_bookkeeping(self, n, k, m):
        x = np.arange(n, dtype=float)
        up = dsp.upsample_zero_insert(x, k)
        assert up.size == n * k
        assert np.array_equal(dsp.decimate(up, k, 0), x)
        taps = np.ones(m)
        assert dsp.convolve(x, taps).size == n + m - 1
        assert dsp.convolve(x, taps, mode="same").size == n
        for ph in range(k):
            assert dsp.decimate(up, k, ph).size == len(range(ph, n * k, k))

    def test_decimate_phase_validation(self):
        with pytest.raises(ValueError):
            dsp.decimate(np.zeros(4), 2, 2)

    def test_sampled_signal_validation(self):
        with pytest.raises(ValueError):
            dsp.SampledSignal(np.zeros(3), 0.0, 2)
        with pytest.raises(ValueError):
            dsp.SampledSignal(np.zeros(3), 1.0, 0)
        assert len(dsp.SampledSignal(np.zeros(3), 1.0, 2)) == 3


class TestAwgn:
    def test_infinite_snr(self):
        x = np.arange(5.0)
        y = dsp.awgn(x, np.inf, np.random.default_rng(0))
        assert np.array_equal(x, y) and y is not x

    def test_snr_and_gaussianity(self):
        rng = np.random.default_rng(1)
        x = rng.choice(PAM4.array, 1_000_000)
        n = dsp.awgn(x, 12.0, rng) - x
        snr = 10 * np.log10(np.mean(x**2) / np.mean(n**2))
        assert abs(snr - 12.0) < 0.1
        assert abs(stats.kurtosis(n, fisher=False) - 3.0) < 0.05

    def test_energy_per_symbol_convention(self):
        x = np.ones(1000)
        assert dsp.noise_variance(x, 10.0, sps=4) == pytest.approx(0.4)

    def test_complex(self):
        rng = np.random.default_rng(2)
        z = np.ones(200_000, complex)
        n = dsp.awgn(z, 10.0, rng) - z
        assert np.mean(np.abs(n) ** 2) == pytest.approx(0.1, rel=0.02)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            dsp.awgn(np.ones(3), np.nan, np.random.default_rng(0))

    def test_mf_ser_matches_analytic(self):
        n = 200_000
        for snr in (10.0, 14.0):
            ser = awgn_pam4_mf_ser(snr, n, seed=int(snr))
            ref = dsp.pam_ser_awgn(4, snr, es=5.0)
            se = np.sqrt(ref * (1 - ref) / n)
            assert abs(ser - ref) < 3 * se, (snr, ser, ref)


def test_pam_ser_formula_values():
    # M = 2 reduces to Q(sqrt(snr)) for antipodal +-1
    assert dsp.pam_ser_awgn(2, 10 * np.log10(4.0)) == pytest.approx(0.5 * erfc(2 / np.sqrt(2)))
    assert dsp.pam_ser_awgn(4, 60.0) < 1e-100


class TestBessel:
    fs, fc = 400e9, 55e9

    def test_dc_gain(self):
        filt = dsp.bessel_lowpass(5, self.fc, self.fs)
        y = dsp.apply_filter(filt, np.ones(5000))
        assert abs(y[-1] - 1.0) < 1e-6

    def test_cutoff_and_monotone(self):
        b, a = dsp.bessel_lowpass(5, self.fc, self.fs)
        f = np.linspace(0, self.fs / 2, 4001)[1:]
        _, H = sps_signal.freqz(b, a, worN=f, fs=self.fs)
        mag = 20 * np.log10(np.abs(H))
        _, Hc = sps_signal.freqz(b, a, worN=[self.fc], fs=self.fs)
        assert abs(20 * np.log10(abs(Hc[0])) + 3.0103) < 0.2
        assert np.all(np.diff(mag) <= 1e-9)

    def test_validation(self):
        with pytest.raises(ValueError):
            dsp.bessel_lowpass(5, 250e9, 400e9)


class TestFiber:
    fs = 400e9

    def _pulse(self):
        t = (np.arange(4096) - 2048) / self.fs
        return np.exp(-((t / 10e-12) ** 2)).astype(complex)

    def test_zero_length_identity(self):
        E = self._pulse()
        assert np.array_equal(dsp.chromatic_dispersion(E, 0.0, -15.43, 1270, self.fs), E)

    def test_energy_and_roundtrip(self):
        E = self._pulse() * np.exp(1j * 0.3)
        F = dsp.chromatic_dispersion(E, 5.0, -15.43, 1270, self.fs)
        assert abs(np.sum(np.abs(F) ** 2) / np.sum(np.abs(E) ** 2) - 1) < 1e-9
        G = dsp.chromatic_dispersion(F, -5.0, -15.43, 1270, self.fs)
        assert np.max(np.abs(G - E)) < 1e-9
        assert np.max(np.abs(F - E)) > 1e-3

    def test_sign_gives_same_broadening(self):
        E = self._pulse()
        a = np.abs(dsp.chromatic_dispersion(E, 10.0, -15.43, 1270, self.fs)) ** 2
        b = np.abs(dsp.chromatic_dispersion(E, 10.0, 15.43, 1270, self.fs)) ** 2
        assert np.allclose(a, b, atol=1e-12)

    def test_attenuation(self):
        E = self._pulse()
        F = dsp.attenuate(E, 0.2, 2.0)
        ratio = np.sum(np.abs(F) ** 2) / np.sum(np.abs(E) ** 2)
        assert ratio == pytest.approx(10 ** (-0.04), rel=1e-12)


class TestPhotodiode:
    def test_dark_current_only(self):
        pd = dsp.PhotodiodeParams()
        th, sh = dsp.photodiode_noise_variances(0.0, 400e9, pd)
        assert sh == pytest.approx(2 * const.e * 1e-8 * 400e9 / 55e9, rel=1e-14)
        assert th == pytest.approx(4 * const.k * 293 * 400e9 / (55e9 * 50), rel=1e-14)

    def test_defaults(self):
        pd = dsp.PhotodiodeParams()
        assert (pd.temperature, pd.bandwidth, pd.impedance, pd.responsivity, pd.dark_current) == (
            293.0, 55e9, 50.0, 1.0, 1e-8)

    def test_noiseless_exact(self):
        E = np.array([1 + 1j, 0.5, -2j])
        assert np.array_equal(dsp.square_law_detect(E, 1.0, noiseless=True), np.abs(E) ** 2)

    def test_noise_variance_uses_mean_power(self):
        rng = np.random.default_rng(0)
        E = np.full(400_000, np.sqrt(1e-3), complex)
        y = dsp.square_law_detect(E, 400e9, rng)
        th, sh = dsp.photodiode_noise_variances(1e-3, 400e9)
        assert np.var(y) == pytest.approx(th + sh, rel=0.01)

    def test_needs_rng(self):
        with pytest.raises(ValueError):
            dsp.square_law_detect(np.ones(3), 1.0)


class TestSync:
    def _ref(self):
        rng = np.random.default_rng(3)
        return dsp.upsample_zero_insert(rng.choice(PAM4.array, 500), 2)

    def test_delay_seven(self):
        ref = self._ref()
        rx = np.concatenate([np.zeros(7), ref, np.zeros(30)])
        assert dsp.synchronize(rx, ref, 40) == 7

    def test_zero_delay(self):
        ref = self._ref()
        assert dsp.synchronize(np.concatenate([ref, np.zeros(20)]), ref, 20) == 0

    def test_negated(self):
        ref = self._ref()
        rx = -np.concatenate([np.zeros(5), ref, np.zeros(20)])
        assert dsp.synchronize(rx, ref, 20) == 5

    def test_too_short(self):
        with pytest.raises(ValueError):
            dsp.synchronize(np.zeros(5), np.zeros(10), 10)


class TestSer:
    def test_values(self):
        assert dsp.symbol_error_rate([0, 1, 2], [0, 1, 2]) == 0.0
        assert dsp.symbol_error_rate([1, 2, 3], [0, 1, 2]) == 1.0
        with pytest.raises(ValueError):
            dsp.symbol_error_rate([0], [0, 1])

    def test_random_guessing(self):
        rng = np.random.default_rng(4)
        assert abs(dsp.symbol_error_rate(rng.integers(0, 4, 100_000), rng.integers(0, 4, 100_000)) - 0.75) < 0.01


def test_noiseless_matched_chain_is_error_free():
    rng = np.random.default_rng(5)
    idx = rng.integers(0, 4, 3000)
    p = dsp.rrc_taps(0.1, 32, 4)
    rx = dsp.decimate(dsp.convolve(dsp.convolve(dsp.upsample_zero_insert(PAM4.array[idx], 4), p), p), 2)
    ref = dsp.upsample_zero_insert(PAM4.array[idx], 2)
    lag = dsp.synchronize(rx, ref, 80)
    assert lag == 64
    z = rx[lag : lag + 2 * idx.size : 2]
    assert dsp.symbol_error_rate(hard_decision_euclidean(z, PAM4), idx) == 0.0


def test_export_csv(tmp_path):
    dsp.export_csv(tmp_path / "x.csv", a=[1.0, 2.0], b=[0.5, 0.25])
    assert (tmp_path / "x.csv").read_text().splitlines() == ["a,b", "1.0,0.5", "2.0,0.25"]
    with pytest.raises(ValueError):
        dsp.export_csv(tmp_path / "y.csv", a=[1.0], b=[1.0, 2.0])
