"""Asynchronous multiple-access channel with a rectangular pulse.

Received samples are stored as the ``M x (D+1)J`` matrix ``Y`` whose column
``(d-1)*J + (i-1)`` holds the scaled matched-filter output of partition ``i``
at symbol time ``d`` (both 1-based in the docstrings, 0-based in code).
Partition ``i`` spans ``[tau_i, tau_{i+1})`` within a symbol period, so it
sees the current symbol of users ``j <= i`` and the previous symbol of
users ``j > i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class DelayProfile:
    """Arrival offsets ``0 = tau_1 < ... < tau_J < T_s``."""

    taus: tuple[float, ...]
    symbol_period: float = 1.0
    min_gap_fraction: float = 1e-3

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        object.__setattr__(self, "taus", taus)
        if not taus:
            raise ValueError("delays: at least one user is required")
        if taus[0] != 0.0:
            raise ValueError(f"delays: first offset must be 0, got {taus[0]}")
        if not self.symbol_period > 0:
            raise ValueError("delays: symbol period must be positive")
        eps = self.min_gap_fraction * self.symbol_period
        for a, b in zip(taus, taus[1:]):
            if not b - a >= eps:
                raise ValueError(f"delays: offsets must be strictly increasing "
                                 f"with gap >= {eps:g}, got {list(taus)}")
        if not self.symbol_period - taus[-1] >= eps:
            raise ValueError(f"delays: last offset must lie below the symbol "
                             f"period by at least {eps:g}, got {taus[-1]}")

    @classmethod
    def from_fractions(cls, fractions: Sequence[float], symbol_period: float = 1.0) -> "DelayProfile":
        return cls(tuple(f * symbol_period for f in fractions), symbol_period)

    @classmethod
    def equal_spacing(cls, J: int, symbol_period: float = 1.0) -> "DelayProfile":
        return cls(tuple(symbol_period * i / J for i in range(J)), symbol_period)

    @property
    def J(self) -> int:
        return len(self.taus)

    def tau(self, i: int) -> float:
        """Periodically extended offset, 1-based: ``tau_{i+J} = tau_i + T_s``."""
        q, r = divmod(i - 1, self.J)
        return self.taus[r] + q * self.symbol_period

    def gap(self, i: int) -> float:
        """``tau_{i+1} - tau_i`` for partition ``i`` (1-based, periodic)."""
        return self.tau(i + 1) - self.tau(i)

    @property
    def gaps(self) -> np.ndarray:
        """Partition widths in partition order ``1..J``."""
        return np.array([self.gap(i) for i in range(1, self.J + 1)])


def overlap_coefficient(j: int, i: int, r: int, delays: DelayProfile | None = None) -> float:
    """Overlap of user ``j``'s pulse lagged by ``r`` symbols with partition ``i``.

    Rectangular pulse, one-symbol support; the delays cancel after the
    partition scaling, so ``delays`` is accepted for interface symmetry only.
    """
    if r == 0:
        return 1.0 if j <= i else 0.0
    if r == 1:
        return 1.0 if j > i else 0.0
    return 0.0


def build_interleave_matrix(j: int, D: int, J: int) -> np.ndarray:
    """0/1 matrix ``A_j`` of shape ``D x (D+1)J`` mapping symbols to partition samples."""
    if not 1 <= j <= J:
        raise ValueError(f"user index {j} outside 1..{J}")
    if D < 1:
        raise ValueError("frame must contain at least one symbol")
    A = np.zeros((D, (D + 1) * J))
    for d in range(D):
        for r in (0, 1):
            for i in range(J):
                A[d, (d + r) * J + i] = overlap_coefficient(j, i + 1, r)
    return A


@dataclass(frozen=True)
class ChannelSet:
    H: np.ndarray  # (J, M, N)

    @property
    def J(self) -> int:
        return self.H.shape[0]

    @property
    def M(self) -> int:
        return self.H.shape[1]


def draw_channel(J: int, M: int, N: int, rng: np.random.Generator) -> ChannelSet:
    """I.i.d. CN(0, 1) fading, variance 0.5 per real dimension."""
    g = rng.standard_normal((J, M, N, 2))
    return ChannelSet((g[..., 0] + 1j * g[..., 1]) * math.sqrt(0.5))


def noise_variance(i: int, delays: DelayProfile, snr: float) -> float:
    """Per-partition noise variance ``T_s / (snr * (tau_{i+1} - tau_i))``."""
    if math.isinf(snr):
        return 0.0
    if not snr > 0:
        raise ValueError(f"snr must be positive, got {snr}")
    return delays.symbol_period / (snr * delays.gap(i))


def noise_variances(delays: DelayProfile, snr: float) -> np.ndarray:
    return np.array([noise_variance(i, delays, snr) for i in range(1, delays.J + 1)])


@dataclass(frozen=True)
class ReceivedFrame:
    """Partition samples ``y_i(d)``, ``d = 1..D+1``, as an ``M x (D+1)J`` matrix."""

    Y: np.ndarray
    J: int
    T: int

    @property
    def M(self) -> int:
        return self.Y.shape[0]

    @property
    def D(self) -> int:
        return self.Y.shape[1] // self.J - 1

    @property
    def n_blocks(self) -> int:
        return self.D // self.T

    def column(self, l: int, t: int, i: int) -> int:
        """Column of ``y_{t,i}^l`` (``t``, ``i`` 1-based, ``l`` 0-based)."""
        return (self.T * l + t - 1) * self.J + (i - 1)

    def sample(self, l: int, t: int, i: int) -> np.ndarray:
        return self.Y[:, self.column(l, t, i)]

    def blocks(self) -> np.ndarray:
        """Block view of shape ``(n_blocks, T, J, M)`` (drops the trailing sample)."""
        D = self.n_blocks * self.T
        return self.Y[:, :D * self.J].T.reshape(self.n_blocks, self.T, self.J, self.M)


def symbol_stream(codewords: np.ndarray) -> np.ndarray:
    """Concatenate ``(L, N, T)`` codewords into the ``N x L*T`` symbol matrix."""
    L, N, T = codewords.shape
    return np.transpose(codewords, (1, 0, 2)).reshape(N, L * T)


def transmit_frame(codewords: np.ndarray, channels: ChannelSet, delays: DelayProfile,
                   snr: float, rng: np.random.Generator | None = None) -> ReceivedFrame:
    """Pass every user's codeword sequence through the asynchronous channel.

    ``codewords`` has shape ``(J, L, N, N)``.  With ``snr = inf`` no noise is
    added and no random numbers are consumed.
    """
    codewords = np.asarray(codewords)
    if codewords.ndim != 4 or codewords.shape[-1] != codewords.shape[-2]:
        raise ValueError(f"codewords must have shape (J, L, N, N), got {codewords.shape}")
    J, L, N, T = codewords.shape
    if J != delays.J:
        raise ValueError(f"delay profile has {delays.J} users but {J} codeword streams given")
    if channels.H.shape[0] != J or channels.H.shape[2] != N:
        raise ValueError(f"channel shape {channels.H.shape} does not match {J} users x {N} antennas")
    M = channels.M
    D = L * T
    # X[j, :, d] = H_j s_j(d) for d = 0..D+1 with zero padding at both ends
    X = np.zeros((J, M, D + 2), dtype=complex)
    for j in range(J):
        X[j, :, 1:D + 1] = channels.H[j] @ symbol_stream(codewords[j])
    cur = np.cumsum(X[:, :, 1:D + 2], axis=0)  # users 1..i, time d
    prev_total = X[:, :, 0:D + 1].sum(axis=0)
    prev = prev_total[None] - np.cumsum(X[:, :, 0:D + 1], axis=0)  # users i+1..J, time d-1
    grid = cur + prev  # (J, M, D+1) indexed by partition
    Y = np.transpose(grid, (1, 2, 0)).reshape(M, (D + 1) * J)
    if not math.isinf(snr):
        if rng is None:
            raise ValueError("a random generator is required when noise is enabled")
        Y = Y + partition_noise(M, D + 1, delays, snr, rng)
    return ReceivedFrame(Y, J, T)


def partition_noise(M: int, n_times: int, delays: DelayProfile, snr: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Independent CN(0, v_i I_M) noise for every partition sample."""
    J = delays.J
    g = rng.standard_normal((M, n_times, J, 2))
    scale = np.sqrt(noise_variances(delays, snr) / 2.0)
    return ((g[..., 0] + 1j * g[..., 1]) * scale).reshape(M, n_times * J)
