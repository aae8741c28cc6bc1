"""Signal-chain primitives: pulse shaping, filtering, noise, fiber, detection, sync, SER."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.constants as const
from scipy import signal as sps_signal
from scipy.special import erfc

__all__ = [
    "SampledSignal",
    "PhotodiodeParams",
    "rrc_taps",
    "upsample_zero_insert",
    "convolve",
    "decimate",
    "awgn",
    "noise_variance",
    "bessel_lowpass",
    "apply_filter",
    "chromatic_dispersion",
    "attenuate",
    "square_law_detect",
    "photodiode_noise_variances",
    "synchronize",
    "symbol_error_rate",
    "pam_ser_awgn",
    "export_csv",
]


@dataclass
class SampledSignal:
    """Samples with their rate bookkeeping."""

    samples: np.ndarray
    rate: float
    sps: int

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if int(self.sps) != self.sps or self.sps < 1:
            raise ValueError("sps must be a positive integer")

    def __len__(self) -> int:
        return len(self.samples)


def rrc_taps(rolloff: float, span: int, sps: int) -> np.ndarray:
    """Root-raised-cosine taps covering `span` symbols, unit energy (sum of squares = 1).

    The t = 0 and t = +-T/(4*rolloff) singularities are replaced by their limits.
    """
    if not 0 < rolloff <= 1:
        raise ValueError("rolloff must be in (0, 1]")
    b = float(rolloff)
    n = span * sps
    t = (np.arange(n + 1) - n / 2) / sps
    h = np.empty_like(t)
    at0 = np.isclose(t, 0.0, atol=1e-12)
    atq = np.isclose(np.abs(t), 1.0 / (4.0 * b), atol=1e-12)
    reg = ~(at0 | atq)
    tr = t[reg]
    h[reg] = (np.sin(np.pi * tr * (1 - b)) + 4 * b * tr * np.cos(np.pi * tr * (1 + b))) / (
        np.pi * tr * (1 - (4 * b * tr) ** 2)
    )
    h[at0] = 1.0 + b * (4.0 / np.pi - 1.0)
    h[atq] = b / np.sqrt(2.0) * (
        (1 + 2 / np.pi) * np.sin(np.pi / (4 * b)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b))
    )
    return h / np.sqrt(np.sum(h * h))


def upsample_zero_insert(x, factor: int) -> np.ndarray:
    """Insert `factor - 1` zeros after every sample; output length = len(x) * factor."""
    x = np.asarray(x)
    if int(factor) != factor or factor < 1:
        raise ValueError("factor must be a positive integer")
    out = np.zeros(x.size * int(factor), dtype=np.result_type(x, float))
    out[:: int(factor)] = x
    return out


def convolve(x, taps, mode: str = "full") -> np.ndarray:
    """Linear convolution.

    ``mode="full"``: length len(x) + len(taps) - 1, output sample k = sum_i taps[i] x[k - i].
    ``mode="same"``: the full output advanced by len(taps) // 2 and cut to len(x),
    i.e. the delay of a centred odd-length filter is removed.
    """
    x = np.asarray(x)
    taps = np.asarray(taps)
    full = sps_signal.convolve(x, taps, mode="full", method="auto")
    if mode == "full":
        return full
    if mode == "same":
        d = taps.size // 2
        return full[d : d + x.size]
    raise ValueError(f"unknown mode {mode!r}")


def decimate(x, factor: int, phase: int = 0) -> np.ndarray:
    """Keep every `factor`-th sample starting at `phase` (no anti-alias filtering)."""
    if not 0 <= phase < factor:
        raise ValueError("phase must be in [0, factor)")
    return np.asarray(x)[phase::factor]


def noise_variance(x, snr_db: float, sps: int = 1) -> float:
    """Per-sample noise variance giving SNR = sps * mean|x|^2 / sigma^2.

    With ``sps > 1`` the numerator is the empirical energy per symbol of an
    oversampled signal; ``sps = 1`` gives the plain per-sample power ratio.
    """
    es = sps * float(np.mean(np.abs(np.asarray(x)) ** 2))
    return es / 10.0 ** (snr_db / 10.0)


def awgn(x, snr_db: float, rng: np.random.Generator, sps: int = 1) -> np.ndarray:
    """Add white Gaussian noise at `snr_db` (see :func:`noise_variance`); ``inf`` adds none."""
    x = np.asarray(x)
    if np.isinf(snr_db) and snr_db > 0:
        return x.copy()
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite or +inf")
    var = noise_variance(x, snr_db, sps)
    if np.iscomplexobj(x):
        n = (rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)) * np.sqrt(var / 2)
    else:
        n = rng.standard_normal(x.shape) * np.sqrt(var)
    return x + n


def bessel_lowpass(order: int, cutoff_hz: float, sample_rate: float):
    """Digital Bessel low-pass (b, a) with -3 dB at `cutoff_hz` and unit DC gain.

    Obtained from the analog prototype by the bilinear transform with the
    cutoff prewarped.
    """
    if not 0 < cutoff_hz < sample_rate / 2:
        raise ValueError("cutoff must lie strictly between 0 and Nyquist")
    b, a = sps_signal.bessel(order, cutoff_hz, btype="low", analog=False, norm="mag", fs=sample_rate)
    return b, a


def apply_filter(filt, x) -> np.ndarray:
    """Causal IIR filtering with zero initial state (length preserving)."""
    b, a = filt
    return sps_signal.lfilter(b, a, np.asarray(x))


def chromatic_dispersion(field, length_km: float, D: float, lambda_nm: float, sample_rate: float) -> np.ndarray:
    """All-pass quadratic-phase fiber response exp(+j*pi*D*lambda^2/c * f^2 * L).

    `D` in ps/(nm km).  The sign is a convention; propagating +L then -L
    returns the input.
    """
    E = np.asarray(field, dtype=complex)
    if length_km == 0 or D == 0:
        return E.copy()
    f = np.fft.fftfreq(E.size, d=1.0 / sample_rate)
    D_si = D * 1e-6  # ps/(nm km) -> s/m^2
    lam = lambda_nm * 1e-9
    phase = np.pi * D_si * lam**2 / const.c * f**2 * (length_km * 1e3)
    return np.fft.ifft(np.fft.fft(E) * np.exp(1j * phase))


def attenuate(field, alpha_db_per_km: float, length_km: float) -> np.ndarray:
    """Scale the field amplitude by 10^(-alpha L / 20)."""
    return np.asarray(field) * 10.0 ** (-alpha_db_per_km * length_km / 20.0)


@dataclass(frozen=True)
class PhotodiodeParams:
    temperature: float = 293.0
    bandwidth: float = 55e9
    impedance: float = 50.0
    responsivity: float = 1.0
    dark_current: float = 1e-8


def photodiode_noise_variances(mean_power: float, sample_rate: float, pd: PhotodiodeParams = PhotodiodeParams()):
    """(thermal, shot) noise variances per sample for the given average optical power."""
    thermal = 4.0 * const.k * pd.temperature * sample_rate / (pd.bandwidth * pd.impedance)
    shot = 2.0 * const.e * (pd.responsivity * mean_power + pd.dark_current) * sample_rate / pd.bandwidth
    return thermal, shot


def square_law_detect(field, sample_rate: float, rng: np.random.Generator | None = None,
                      pd: PhotodiodeParams = PhotodiodeParams(), noiseless: bool = False) -> np.ndarray:
    """Photocurrent R|E|^2 plus Gaussian thermal and shot noise.

    The shot-noise variance uses the batch-average received power.
    """
    power = np.abs(np.asarray(field)) ** 2
    out = pd.responsivity * power
    if noiseless:
        return out
    if rng is None:
        raise ValueError("rng required unless noiseless")
    var_t, var_s = photodiode_noise_variances(float(power.mean()), sample_rate, pd)
    return out + rng.standard_normal(out.shape) * np.sqrt(var_t + var_s)


def synchronize(rx, reference, max_lag: int) -> int:
    """Lag in [0, max_lag] maximizing |normalized cross-correlation|, so rx[n + lag] ~ reference[n].

    The absolute value makes the search insensitive to a sign flip of the channel.
    """
    rx = np.asarray(rx, dtype=float)
    ref = np.asarray(reference, dtype=float)
    n = min(ref.size, rx.size - max_lag)
    if n <= 0:
        raise ValueError("received signal too short for the requested lag window")
    ref = ref[:n] - ref[:n].mean()
    seg = rx[: n + max_lag]
    # corr[l] = sum_k seg[k + l] ref[k]
    corr = sps_signal.correlate(seg, ref, mode="valid")[: max_lag + 1]
    csum = np.concatenate([[0.0], np.cumsum(seg * seg)])
    s1 = np.concatenate([[0.0], np.cumsum(seg)])
    lags = np.arange(max_lag + 1)
    energy = csum[lags + n] - csum[lags] - (s1[lags + n] - s1[lags]) ** 2 / n
    score = np.abs(corr) / np.sqrt(np.maximum(energy, 1e-300))
    return int(np.argmax(score))


def symbol_error_rate(decisions, truth) -> float:
    d = np.asarray(decisions)
    t = np.asarray(truth)
    if d.shape != t.shape:
        raise ValueError("decision and truth sequences must have equal length")
    if d.size == 0:
        raise ValueError("empty sequences")
    return float(np.mean(d != t))


def pam_ser_awgn(m: int, snr_db: float, es: float | None = None, d: float = 1.0) -> float:
    """Analytic SER of equally spaced M-PAM with half-spacing `d` in AWGN.

    SNR is Es / sigma^2 with Es the mean symbol energy (default: that of the
    levels +-d, +-3d, ...).
    """
    if es is None:
        es = d * d * (m * m - 1) / 3.0
    sigma = np.sqrt(es / 10.0 ** (snr_db / 10.0))
    q = 0.5 * erfc(d / sigma / np.sqrt(2.0))
    return 2.0 * (m - 1) / m * q


def export_csv(path, **columns) -> None:
    """Write equal-length 1-D arrays as CSV columns (header = keyword names)."""
    names = list(columns)
    arrays = [np.asarray(columns[k]) for k in names]
    n = {a.size for a in arrays}
    if len(n) != 1:
        raise ValueError("all columns must have equal length")
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*arrays):
            w.writerow([repr(float(v)) for v in row])
