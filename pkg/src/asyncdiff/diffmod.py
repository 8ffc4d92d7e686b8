"""Differential encoding ``S^l = S^{l-1} P^l``.

Blocks 0 and 1 are pilots; data starts at block 2.  Source bits are
consumed ``K*b`` at a time and read little-endian into a candidate index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stcodes import Constellation, OstbcCodec, candidate_matrices


@dataclass(frozen=True)
class InitialCodewords:
    S0: np.ndarray
    S1: np.ndarray
    P1: np.ndarray


def initial_codewords(N: int, S0: np.ndarray | None = None,
                      P1: np.ndarray | None = None) -> InitialCodewords:
    """Pilot codewords; identity by default so ``P^1 = I`` is known to the decoder."""
    if N not in (2, 4):
        raise ValueError(f"unsupported number of transmit antennas {N}")
    S0 = np.eye(N, dtype=complex) if S0 is None else np.asarray(S0, dtype=complex)
    P1 = np.eye(N, dtype=complex) if P1 is None else np.asarray(P1, dtype=complex)
    for name, m in (("S0", S0), ("P1", P1)):
        if m.shape != (N, N) or np.abs(m.conj().T @ m - np.eye(N)).max() > 1e-10:
            raise ValueError(f"{name} must be an {N}x{N} unitary matrix")
    return InitialCodewords(S0, S0 @ P1, P1)


@dataclass(frozen=True)
class EncodedFrame:
    codewords: np.ndarray       # (L_blocks, N, N)
    data_indices: np.ndarray    # candidate index per data block, blocks 2..L-1
    data_matrices: np.ndarray   # P^1 .. P^{L-1}, P^1 being the pilot
    bits: np.ndarray

    @property
    def n_blocks(self) -> int:
        return self.codewords.shape[0]


def bits_to_indices(bits: np.ndarray, bits_per_block: int) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64).reshape(-1, bits_per_block)
    return bits @ (1 << np.arange(bits_per_block))


def indices_to_bits(indices: np.ndarray, bits_per_block: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    return ((indices[..., None] >> np.arange(bits_per_block)) & 1).reshape(*indices.shape[:-1], -1)


def encode_indices(indices: np.ndarray, candidates: np.ndarray,
                   init: InitialCodewords) -> np.ndarray:
    """Chain codewords for candidate indices of shape ``(..., n)``.

    Returns ``(..., n + 2, N, N)``; leading axes (e.g. users) are chained
    independently.
    """
    indices = np.asarray(indices)
    n_data = indices.shape[-1]
    N = candidates.shape[-1]
    S = np.empty(indices.shape[:-1] + (n_data + 2, N, N), dtype=complex)
    S[..., 0, :, :] = init.S0
    S[..., 1, :, :] = init.S1
    P = candidates[indices]
    for k in range(n_data):
        S[..., k + 2, :, :] = S[..., k + 1, :, :] @ P[..., k, :, :]
    return S


def encode_frame(bits: np.ndarray, codec: OstbcCodec, constellation: Constellation,
                 init: InitialCodewords | None = None, n_blocks: int | None = None,
                 candidates: np.ndarray | None = None) -> EncodedFrame:
    """Differentially encode ``bits`` into ``n_blocks`` codewords (two pilots included)."""
    kb = codec.K * constellation.bits_per_symbol
    bits = np.asarray(bits, dtype=np.int64).ravel()
    if n_blocks is None:
        n_blocks = bits.size // kb + 2
    if n_blocks < 3 or bits.size != (n_blocks - 2) * kb:
        raise ValueError(f"expected {(n_blocks - 2) * kb} bits for {n_blocks} blocks, got {bits.size}")
    if init is None:
        init = initial_codewords(codec.N)
    if candidates is None:
        candidates = candidate_matrices(codec, constellation)
    idx = bits_to_indices(bits, kb)
    S = encode_indices(idx, candidates, init)
    P = np.concatenate([init.P1[None], candidates[idx]])
    return EncodedFrame(S, idx, P, bits)
