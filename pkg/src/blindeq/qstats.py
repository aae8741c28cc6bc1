"""Factorized symbol posteriors and their per-time moments."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Constellation",
    "MomentSequence",
    "PAM4",
    "compute_moments",
    "upsample_moments",
    "validate_probs",
]


@dataclass(frozen=True)
class Constellation:
    """Ordered set of real symbol amplitudes."""

    points: tuple[float, ...]

    def __post_init__(self):
        pts = tuple(float(p) for p in self.points)
        if len(pts) < 2:
            raise ValueError("constellation needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("constellation points must be finite")
        if len(set(pts)) != len(pts):
            raise ValueError("constellation points must be pairwise distinct")
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)

    def powers(self, kmax: int = 4) -> np.ndarray:
        """Matrix of shape (kmax, M) holding A_m**k for k = 1..kmax."""
        a = self.array
        return np.stack([a**k for k in range(1, kmax + 1)])


PAM4 = Constellation((-3.0, -1.0, 1.0, 3.0))


@dataclass(frozen=True)
class MomentSequence:
    """Raw moments E[x], E[x^2], E[x^3], E[x^4] per time index."""

    m1: np.ndarray
    m2: np.ndarray
    m3: np.ndarray
    m4: np.ndarray

    def __post_init__(self):
        n = len(self.m1)
        if not (len(self.m2) == len(self.m3) == len(self.m4) == n):
            raise ValueError("moment sequences must have equal length")

    def __len__(self) -> int:
        return len(self.m1)

    def stack(self) -> np.ndarray:
        return np.stack([self.m1, self.m2, self.m3, self.m4])

    @classmethod
    def from_stack(cls, arr: np.ndarray) -> "MomentSequence":
        return cls(arr[0], arr[1], arr[2], arr[3])


def validate_probs(probs, n_symbols: int | None = None, atol: float = 1e-9) -> np.ndarray:
    """Check that `probs` is a row-stochastic N x M matrix and return it as float array."""
    p = np.asarray(probs, dtype=float)
    if p.ndim != 2:
        raise ValueError(f"probabilities must be 2-D (N x M), got shape {p.shape}")
    if n_symbols is not None and p.shape[1] != n_symbols:
        raise ValueError(
            f"probability matrix has {p.shape[1]} columns but constellation has {n_symbols} points"
        )
    if not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite")
    if np.any(p < -atol) or np.any(p > 1 + atol):
        raise ValueError("probabilities must lie in [0, 1]")
    if p.size and np.max(np.abs(p.sum(axis=1) - 1.0)) > atol:
        raise ValueError("probability rows must sum to 1")
    return p


def compute_moments(probs, constellation: Constellation) -> MomentSequence:
    """Per-row moments m_k[n] = sum_m probs[n, m] * A_m**k for k = 1..4.

    Raises ValueError if the number of columns does not match the constellation size.
    """
    p = np.asarray(probs, dtype=float)
    if p.ndim != 2 or p.shape[1] != constellation.size:
        raise ValueError(
            f"probs has shape {p.shape}; expected (N, {constellation.size}) "
            f"for a {constellation.size}-point constellation"
        )
    m = constellation.powers(4) @ p.T
    return MomentSequence.from_stack(m)


def upsample_moments(ms: MomentSequence, sps: int) -> MomentSequence:
    """Zero-stuff every moment order to `sps` samples per symbol.

    Inserted positions are deterministic zeros, so all their moments are 0.
    """
    if int(sps) != sps or sps < 1:
        raise ValueError(f"sps must be a positive integer, got {sps!r}")
    sps = int(sps)
    if sps == 1:
        return ms
    src = ms.stack()
    out = np.zeros((4, src.shape[1] * sps))
    out[:, ::sps] = src
    return MomentSequence.from_stack(out)
