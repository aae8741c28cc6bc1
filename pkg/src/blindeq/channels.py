"""End-to-end channel simulators producing a synchronized 2-sps receive signal.

Both simulators return a :class:`ChannelOutput` whose ``rx`` has exactly
``sps_out * len(symbols)`` samples with symbol n aligned to samples
``sps_out*n .. sps_out*n + sps_out - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .qstats import PAM4

__all__ = [
    "WhConfig",
    "ImddConfig",
    "ChannelOutput",
    "wh_nonlinearity",
    "wh_channel",
    "simulate_wh",
    "mzm",
    "dispersion_parameter",
    "dispersion_formula",
    "simulate_imdd",
    "eye_levels",
]


@dataclass
class ChannelOutput:
    rx: np.ndarray
    offset: int
    sps: int
    rate: float = 1.0

    def signal(self) -> dsp.SampledSignal:
        return dsp.SampledSignal(self.rx, self.rate, self.sps)


def _sync_and_cut(rx, symbols, sps_out, max_lag):
    ref = dsp.upsample_zero_insert(symbols, sps_out)
    lag = dsp.synchronize(rx, ref, max_lag)
    need = sps_out * len(symbols)
    out = rx[lag : lag + need]
    if out.size < need:
        out = np.concatenate([out, np.zeros(need - out.size)])
    return out, lag


# ---------------------------------------------------------------------------
# Wiener-Hammerstein


@dataclass
class WhConfig:
    h1: list = field(default_factory=lambda: [1.0, 0.3, 0.1])
    h2: list = field(default_factory=lambda: [1.0, -0.2, 0.02])
    alpha: float = 0.0
    snr_db: float = 20.0
    sps_channel: int = 4
    sps_out: int = 2
    rolloff: float = 0.1
    rrc_span: int = 32

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if np.isnan(self.snr_db) or self.snr_db == -np.inf:
            raise ValueError("snr_db must be a number or +inf")
        if self.sps_channel % self.sps_out:
            raise ValueError("sps_out must divide sps_channel")


def wh_nonlinearity(x, alpha: float):
    """g(x) = (1 - alpha) x + alpha x^2."""
    x = np.asarray(x, dtype=float)
    return (1.0 - alpha) * x + alpha * x * x


def wh_channel(shaped, cfg: WhConfig) -> np.ndarray:
    """Noiseless h2 * g(h1 * x) at the channel rate, with zero-stuffed h1, h2."""
    h1 = dsp.upsample_zero_insert(cfg.h1, cfg.sps_channel)
    h2 = dsp.upsample_zero_insert(cfg.h2, cfg.sps_channel)
    u = dsp.convolve(shaped, h1)
    return dsp.convolve(wh_nonlinearity(u, cfg.alpha), h2)


def simulate_wh(symbols, cfg: WhConfig, rng: np.random.Generator) -> ChannelOutput:
    """RRC shaping -> Wiener-Hammerstein -> AWGN -> matched RRC -> 2 sps -> sync."""
    sym = np.asarray(symbols, dtype=float)
    sps = cfg.sps_channel
    p = dsp.rrc_taps(cfg.rolloff, cfg.rrc_span, sps)
    shaped = dsp.convolve(dsp.upsample_zero_insert(sym, sps), p)
    ch = wh_channel(shaped, cfg)
    noisy = dsp.awgn(ch, cfg.snr_db, rng, sps=sps)
    mf = dsp.convolve(noisy, p)
    dec = cfg.sps_channel // cfg.sps_out
    rx = dsp.decimate(mf, dec)
    delay = (p.size - 1) // dec  # two half-filters at sps_out
    rx, lag = _sync_and_cut(rx, sym, cfg.sps_out, delay + 16)
    return ChannelOutput(rx, lag, cfg.sps_out)


# ---------------------------------------------------------------------------
# IM/DD optical link


@dataclass
class ImddConfig:
    baud: float = 100e9
    vpp: float = 1.0
    v_pi: float = 2.0
    v_b: float = -0.5
    p_in: float = 1.0
    fiber_km: float = 0.0
    lambda_nm: float = 1270.0
    lambda0_nm: float = 1310.0
    s0: float = 0.092
    dispersion_override: float | None = -15.43
    alpha_db_km: float = 0.2
    bessel_cutoff: float = 55e9
    bessel_order: int = 5
    temperature: float = 293.0
    pd_bandwidth: float = 55e9
    impedance: float = 50.0
    responsivity: float = 1.0
    dark_current: float = 1e-8
    sps_channel: int = 4
    sps_out: int = 2
    rolloff: float = 0.1
    rrc_span: int = 32
    mzm_pi: bool = False
    noiseless: bool = False
    enable_dispersion: bool = True
    normalize: bool = True

    def __post_init__(self):
        for name in ("baud", "v_pi", "p_in", "bessel_cutoff", "temperature", "pd_bandwidth",
                     "impedance", "responsivity", "lambda_nm", "lambda0_nm", "s0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.fiber_km < 0:
            raise ValueError("fiber_km must be >= 0")

    @property
    def sample_rate(self) -> float:
        return self.baud * self.sps_channel

    @property
    def photodiode(self) -> dsp.PhotodiodeParams:
        return dsp.PhotodiodeParams(self.temperature, self.pd_bandwidth, self.impedance,
                                    self.responsivity, self.dark_current)


def mzm(voltage, p_in: float, v_pi: float, v_b: float, with_pi: bool = False) -> np.ndarray:
    """Optical field sqrt(P_in) cos((V + V_b) / (2 V_pi)).

    ``with_pi=True`` uses the conventional argument pi (V + V_b) / (2 V_pi).
    """
    k = np.pi if with_pi else 1.0
    return np.sqrt(p_in) * np.cos(k * (np.asarray(voltage, dtype=float) + v_b) / (2.0 * v_pi))


def dispersion_formula(s0: float, lambda_nm: float, lambda0_nm: float) -> float:
    """D = (S0 / 4) (lambda - lambda0^4 / lambda^3) in ps/(nm km)."""
    return s0 / 4.0 * (lambda_nm - lambda0_nm**4 / lambda_nm**3)


def dispersion_parameter(cfg: ImddConfig) -> float:
    """Dispersion used by the simulator: the override when set, the formula otherwise."""
    if cfg.dispersion_override is not None:
        return float(cfg.dispersion_override)
    return dispersion_formula(cfg.s0, cfg.lambda_nm, cfg.lambda0_nm)


def imdd_frontend(symbols, cfg: ImddConfig):
    """Transmitter up to the fiber input: (shaped, drive voltage, optical field)."""
    sps = cfg.sps_channel
    p = dsp.rrc_taps(cfg.rolloff, cfg.rrc_span, sps)
    shaped = dsp.convolve(dsp.upsample_zero_insert(np.asarray(symbols, dtype=float), sps), p)
    v = cfg.vpp * shaped / (2.0 * np.max(np.abs(shaped)))
    lp = dsp.bessel_lowpass(cfg.bessel_order, cfg.bessel_cutoff, cfg.sample_rate)
    v = dsp.apply_filter(lp, v)
    E = mzm(v, cfg.p_in, cfg.v_pi, cfg.v_b, cfg.mzm_pi)
    return shaped, v, E


def simulate_imdd(symbols, cfg: ImddConfig, rng: np.random.Generator | None = None,
                  return_detected: bool = False):
    """DAC -> Bessel -> MZM -> fiber -> photodiode -> Bessel -> matched RRC -> 2 sps -> sync.

    With ``cfg.normalize`` the synchronized signal is shifted to zero mean and
    scaled to the RMS of the PAM-4 levels (receiver AGC).
    """
    sym = np.asarray(symbols, dtype=float)
    sps = cfg.sps_channel
    fs = cfg.sample_rate
    p = dsp.rrc_taps(cfg.rolloff, cfg.rrc_span, sps)
    _, _, E = imdd_frontend(sym, cfg)
    if cfg.fiber_km > 0:
        if cfg.enable_dispersion:
            E = dsp.chromatic_dispersion(E, cfg.fiber_km, dispersion_parameter(cfg), cfg.lambda_nm, fs)
        E = dsp.attenuate(E, cfg.alpha_db_km, cfg.fiber_km)
    det = dsp.square_law_detect(E, fs, rng, cfg.photodiode, noiseless=cfg.noiseless)
    lp = dsp.bessel_lowpass(cfg.bessel_order, cfg.bessel_cutoff, fs)
    adc = dsp.apply_filter(lp, det)
    mf = dsp.convolve(adc, p)
    dec = sps // cfg.sps_out
    rx = dsp.decimate(mf, dec)
    delay = (p.size - 1) // dec
    rx_d = rx - rx.mean()
    rx_s, lag = _sync_and_cut(rx_d, sym, cfg.sps_out, delay + 16)
    if cfg.normalize:
        rms_sym = float(np.sqrt(np.mean(PAM4.array**2)))
        rx_s = (rx_s - rx_s.mean()) / rx_s.std() * rms_sym
    else:
        rx_s = rx[lag : lag + rx_s.size]
    out = ChannelOutput(rx_s, lag, cfg.sps_out, cfg.baud * cfg.sps_out)
    if return_detected:
        return out, det
    return out


def eye_levels(rx, symbols, constellation=PAM4, sps: int = 2):
    """Mean received amplitude at symbol instants per constellation level, in constellation order."""
    r = np.asarray(rx)[::sps][: len(symbols)]
    s = np.asarray(symbols)
    return np.array([r[s == a].mean() for a in constellation.array])
