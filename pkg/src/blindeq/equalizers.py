"""Fractionally spaced FFE / second-order Volterra equalizers and the soft demapper.

Equalizers read a signal at ``sps`` samples per symbol and emit one estimate
per symbol.  Estimate n uses the lag window
``u_n = (s[sps*n + d], s[sps*n + d - 1], ..., s[sps*n + d - N1 + 1])`` with
``d = N1 // 2`` (zero outside the signal), so a unit impulse at the centre
tap passes ``s[sps*n]`` straight through.  The second-order kernel acts on
the central ``N2`` lags of the same window.

Checkpoint format (``save_state`` / ``load_state``): a numpy ``.npz`` archive
with keys

- ``kind``: ``"ffe"`` or ``"volterra"``
- ``w1``: first-order taps, shape (N1,)
- ``w2``: upper triangle (row-major) of the symmetric N2 x N2 kernel, or empty
- ``n_taps2``: N2 (0 for the FFE)
- ``sps``: input samples per symbol
- ``beta``: soft-demapper weights, or empty
- ``channel_h``, ``channel_h2``, ``sigma2``: channel model of a VAE run, or empty
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .elbo import sym_grad_to_triu, triu_to_sym
from .qstats import Constellation

__all__ = [
    "FfeEqualizer",
    "VolterraEqualizer",
    "SoftDemapper",
    "equalizer_windows",
    "equalize",
    "equalize_backward",
    "soft_demap",
    "soft_demap_backward",
    "hard_decision_euclidean",
    "hard_decision_map",
    "supervised_loss",
    "supervised_loss_grad",
    "save_state",
    "load_state",
]


@dataclass
class FfeEqualizer:
    w1: np.ndarray
    sps: int = 2

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=float)
        if self.w1.ndim != 1 or self.w1.size < 1 or not np.all(np.isfinite(self.w1)):
            raise ValueError("w1 must be a finite, non-empty 1-D array")

    @property
    def n_taps(self) -> int:
        return self.w1.size

    @classmethod
    def identity(cls, n_taps: int = 25, sps: int = 2) -> "FfeEqualizer":
        w1 = np.zeros(n_taps)
        w1[n_taps // 2] = 1.0
        return cls(w1, sps)

    def params(self) -> dict:
        return {"w1": self.w1}


@dataclass
class VolterraEqualizer:
    """FFE plus a symmetric second-order kernel over the central `n_taps2` lags.

    `w2` holds the upper triangle of the kernel; pass a full matrix to have it
    symmetrized as (A + A.T) / 2, which leaves the output unchanged.
    """

    w1: np.ndarray
    w2: np.ndarray = None
    n_taps2: int = 15
    sps: int = 2

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=float)
        n2 = int(self.n_taps2)
        if n2 > self.w1.size or n2 < 1:
            raise ValueError("second-order window must fit inside the first-order window")
        if (self.w1.size - n2) % 2:
            raise ValueError("first- and second-order windows must share a centre tap")
        if self.w2 is None:
            self.w2 = np.zeros(n2 * (n2 + 1) // 2)
        w2 = np.asarray(self.w2, dtype=float)
        if w2.ndim == 2:
            if w2.shape != (n2, n2):
                raise ValueError(f"kernel must be {n2}x{n2}")
            w2 = (0.5 * (w2 + w2.T))[np.triu_indices(n2)]
        if w2.shape != (n2 * (n2 + 1) // 2,):
            raise ValueError("bad second-order kernel size")
        self.w2 = w2

    @property
    def n_taps(self) -> int:
        return self.w1.size

    @property
    def kernel(self) -> np.ndarray:
        return triu_to_sym(self.w2, self.n_taps2)

    @property
    def inner(self) -> slice:
        lo = (self.n_taps - self.n_taps2) // 2
        return slice(lo, lo + self.n_taps2)

    @classmethod
    def identity(cls, n_taps: int = 25, n_taps2: int = 15, sps: int = 2) -> "VolterraEqualizer":
        w1 = np.zeros(n_taps)
        w1[n_taps // 2] = 1.0
        return cls(w1, None, n_taps2, sps)

    def params(self) -> dict:
        return {"w1": self.w1, "w2": self.w2}


@dataclass
class SoftDemapper:
    beta: np.ndarray = field(default_factory=lambda: np.ones(4))

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if np.any(self.beta <= 0):
            raise ValueError("beta weights must be positive")

    @classmethod
    def flat(cls, m: int) -> "SoftDemapper":
        return cls(np.ones(m))


def equalizer_windows(signal, n_taps: int, sps: int, start: int = 0, count: int | None = None) -> np.ndarray:
    """Lag windows U[n, i] = signal[sps*(start + n) + n_taps//2 - i], zero-padded."""
    s = np.asarray(signal, dtype=float)
    if count is None:
        count = s.size // sps - start
    d = n_taps // 2
    base = sps * (start + np.arange(count))[:, None] + d - np.arange(n_taps)[None, :]
    pad = n_taps
    padded = np.concatenate([np.zeros(pad), s, np.zeros(pad + sps * count)])
    return padded[base + pad]


def _forward(U, eq):
    out = U @ eq.w1
    if isinstance(eq, VolterraEqualizer):
        U2 = U[:, eq.inner]
        out = out + np.einsum("ni,ni->n", U2 @ eq.kernel, U2)
    return out


def equalize(signal, eq, start: int = 0, count: int | None = None) -> np.ndarray:
    """Symbol-rate estimates from a `eq.sps`-oversampled signal.

    Raises ValueError if the signal is shorter than the lag window.
    """
    s = np.asarray(signal, dtype=float)
    if s.size < eq.n_taps:
        raise ValueError(f"signal of length {s.size} is shorter than the {eq.n_taps}-tap window")
    U = equalizer_windows(s, eq.n_taps, eq.sps, start, count)
    return _forward(U, eq)


def equalize_backward(signal, eq, grad_out, start: int = 0) -> dict:
    """Gradients of a scalar loss with respect to the equalizer parameters, given dL/dxhat."""
    g = np.asarray(grad_out, dtype=float)
    U = equalizer_windows(signal, eq.n_taps, eq.sps, start, g.size)
    grads = {"w1": U.T @ g}
    if isinstance(eq, VolterraEqualizer):
        U2 = U[:, eq.inner]
        grads["w2"] = sym_grad_to_triu((U2 * g[:, None]).T @ U2)
    return grads


def _logits(xhat, constellation, sigma2, beta):
    diff = np.asarray(xhat, dtype=float)[:, None] - constellation.array[None, :]
    return -(diff * diff) / (beta[None, :] * sigma2), diff


def soft_demap(xhat, constellation: Constellation, sigma2: float, demapper: SoftDemapper) -> np.ndarray:
    """Symbol probabilities from a Gaussian kernel around each constellation point, softmax-normalized."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    z, _ = _logits(xhat, constellation, sigma2, demapper.beta)
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p


def soft_demap_backward(xhat, constellation, sigma2, demapper, probs, grad_probs):
    """Return (dL/dxhat, dL/dbeta); sigma2 is treated as a constant."""
    beta = demapper.beta
    diff = np.asarray(xhat, dtype=float)[:, None] - constellation.array[None, :]
    gz = probs * (grad_probs - np.sum(probs * grad_probs, axis=1, keepdims=True))
    gx = np.sum(gz * (-2.0 * diff / (beta[None, :] * sigma2)), axis=1)
    gb = np.sum(gz * (diff * diff) / (beta[None, :] ** 2 * sigma2), axis=0)
    return gx, gb


def hard_decision_euclidean(xhat, constellation: Constellation) -> np.ndarray:
    """Index of the nearest constellation point; ties go to the lower index."""
    dist = np.abs(np.asarray(xhat, dtype=float)[:, None] - constellation.array[None, :])
    return np.argmin(dist, axis=1)


def hard_decision_map(probs) -> np.ndarray:
    """Row-wise argmax; ties go to the lower index."""
    return np.argmax(np.asarray(probs), axis=1)


def supervised_loss(xhat, symbols) -> float:
    d = np.asarray(xhat, dtype=float) - np.asarray(symbols, dtype=float)
    return float(np.mean(d * d))


def supervised_loss_grad(xhat, symbols) -> np.ndarray:
    d = np.asarray(xhat, dtype=float) - np.asarray(symbols, dtype=float)
    return 2.0 * d / d.size


def save_state(path, eq, demapper: SoftDemapper | None = None, channel=None) -> None:
    empty = np.zeros(0)
    is_volterra = isinstance(eq, VolterraEqualizer)
    h2 = getattr(channel, "h2", None) if channel is not None else None
    np.savez(
        Path(path),
        kind=np.array("volterra" if is_volterra else "ffe"),
        w1=eq.w1,
        w2=eq.w2 if is_volterra else empty,
        n_taps2=np.array(eq.n_taps2 if is_volterra else 0),
        sps=np.array(eq.sps),
        beta=demapper.beta if demapper is not None else empty,
        channel_h=channel.h if channel is not None else empty,
        channel_h2=h2 if h2 is not None else empty,
        sigma2=np.array(channel.sigma2 if channel is not None else np.nan),
    )


def load_state(path):
    """Inverse of :func:`save_state`: returns (equalizer, demapper or None, channel or None)."""
    from .elbo import LinearChannelModel, VolterraChannelModel

    with np.load(Path(path)) as z:
        kind = str(z["kind"])
        sps = int(z["sps"])
        if kind == "volterra":
            eq = VolterraEqualizer(z["w1"], z["w2"], int(z["n_taps2"]), sps)
        else:
            eq = FfeEqualizer(z["w1"], sps)
        demapper = SoftDemapper(z["beta"]) if z["beta"].size else None
        channel = None
        if z["channel_h"].size:
            sigma2 = float(z["sigma2"])
            if z["channel_h2"].size:
                channel = VolterraChannelModel(z["channel_h"], z["channel_h2"], sigma2)
            else:
                channel = LinearChannelModel(z["channel_h"], sigma2)
    return eq, demapper, channel
