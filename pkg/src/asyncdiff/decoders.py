"""Noncoherent ITIC and MMPL decoders with Methods 0-3.

Both families reduce to the same problem: a chain of states (a candidate
index for ITIC, a J-tuple of candidate indices for MMPL) and a branch cost
``cost_l(prev_state, cur_state)`` for every data block ``l >= 2``.  The
branch cost is the Gaussian negative log-likelihood

    M * ln det(V) + Tr[W V^{-1} W^H]

of an observation window ``W`` whose covariance ``V`` depends only on the
candidate pair, the SNR and the delays.  ``V`` is therefore factorised once
per state pair (``CostCache``) and each block only needs the window's Gram
matrix.

Branch-cost layout: pair ``(prev, cur)`` lives at ``prev * S + cur``; the
extra ``prev = S`` row holds the block-2 costs where the previous matrix is
the known pilot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .channel import DelayProfile, ReceivedFrame
from .stcodes import CandidateCapError, build_Abar

DEFAULT_STATE_CAP = 1 << 8
DEFAULT_BRUTE_FORCE_CAP = 1 << 20


class CovarianceError(np.linalg.LinAlgError):
    """Raised when a window covariance fails to factor as Hermitian PD."""


def build_Atilde(j: int, T: int, J: int) -> np.ndarray:
    """``3T x (3TJ-J+1)`` stair matrix mapping user ``j``'s three blocks of symbols
    onto the raw partition window.

    Row ``r`` holds ones in columns ``(r-1)J + j - J + 1 .. (r-1)J + j``
    (1-based), clipped to the window.
    """
    if T < 2:
        raise ValueError(f"block length must be >= 2, got {T}")
    if not 1 <= j <= J:
        raise ValueError(f"user index {j} outside 1..{J}")
    width = 3 * T * J - J + 1
    A = np.zeros((3 * T, width))
    for r in range(3 * T):
        lo = max(r * J + j - J, 0)
        hi = min(r * J + j, width)
        A[r, lo:hi] = 1.0
    return A


def _unitary_stack(P_prev: np.ndarray, P_cur: np.ndarray) -> np.ndarray:
    """``U = (I, P_prev, P_prev P_cur)`` with broadcasting over leading axes."""
    N = P_prev.shape[-1]
    batch = np.broadcast_shapes(P_prev.shape[:-2], P_cur.shape[:-2])
    P_prev = np.broadcast_to(P_prev, batch + (N, N))
    eye = np.broadcast_to(np.eye(N), batch + (N, N))
    return np.concatenate([eye, P_prev, P_prev @ P_cur], -1)


# -- observation windows ----------------------------------------------------

@dataclass(frozen=True)
class IticWindow:
    Ybar: np.ndarray
    j: int
    l: int


@dataclass(frozen=True)
class MmplWindow:
    Ytilde: np.ndarray
    l: int


def _itic_columns(frame: ReceivedFrame, j: int, blocks: np.ndarray) -> np.ndarray:
    T, J = frame.T, frame.J
    d = T * (blocks[:, None] - 2) + 1 + np.arange(1, 3 * T)  # 1-based symbol times
    return (d - 1) * J + (j - 1)


def itic_windows(frame: ReceivedFrame, j: int, blocks: Sequence[int] | None = None) -> np.ndarray:
    """Differenced windows for user ``j``, shape ``(len(blocks), M, 3T-1)``.

    Each column is a partition sample minus the one just before it in
    time, which cancels every other user.  Defaults to all data blocks.
    """
    if not 1 <= j <= frame.J:
        raise ValueError(f"user index {j} outside 1..{frame.J}")
    blocks = np.arange(2, frame.n_blocks) if blocks is None else np.asarray(blocks)
    if blocks.size and blocks.min() < 2:
        raise ValueError("difference windows exist only for blocks l >= 2")
    cols = _itic_columns(frame, j, blocks)
    Y = frame.Y
    return np.transpose(Y[:, cols] - Y[:, cols - 1], (1, 0, 2))


def itic_difference_block(frame: ReceivedFrame, j: int, l: int) -> IticWindow:
    if l < 2:
        raise ValueError("difference windows exist only for blocks l >= 2")
    return IticWindow(itic_windows(frame, j, [l])[0], j, l)


def mmpl_windows(frame: ReceivedFrame, blocks: Sequence[int] | None = None) -> np.ndarray:
    """Raw partition windows, shape ``(len(blocks), M, 3TJ-J+1)``.

    A window starts at partition ``J`` of the first slot of block ``l-2``
    and ends at partition ``J`` of the last slot of block ``l``.
    """
    blocks = np.arange(2, frame.n_blocks) if blocks is None else np.asarray(blocks)
    if blocks.size and blocks.min() < 2:
        raise ValueError("partition windows exist only for blocks l >= 2")
    T, J = frame.T, frame.J
    start = (T * (blocks - 2)) * J + (J - 1)
    cols = start[:, None] + np.arange(3 * T * J - J + 1)
    return np.transpose(frame.Y[:, cols], (1, 0, 2))


def mmpl_gather_block(frame: ReceivedFrame, l: int) -> MmplWindow:
    if l < 2:
        raise ValueError("partition windows exist only for blocks l >= 2")
    return MmplWindow(mmpl_windows(frame, [l])[0], l)


# -- covariances and costs --------------------------------------------------

def _check_snr(snr: float) -> None:
    if not (snr > 0 and math.isfinite(snr)):
        raise ValueError(f"decoder SNR must be positive and finite, got {snr}")


def itic_noise_level(j: int, delays: DelayProfile, snr: float) -> float:
    """Variance of a differenced noise sample for user ``j``."""
    _check_snr(snr)
    return delays.symbol_period / snr * (1.0 / delays.gap(j) + 1.0 / delays.gap(j - 1))


def mmpl_noise_diag(T: int, delays: DelayProfile, snr: float) -> np.ndarray:
    """Diagonal noise covariance of a raw window; column ``w`` is partition ``(J-1+w) mod J``."""
    _check_snr(snr)
    J = delays.J
    parts = (J - 1 + np.arange(3 * T * J - J + 1)) % J
    return delays.symbol_period / snr / delays.gaps[parts]


def itic_covariance(P_prev, P_cur, snr: float, delays: DelayProfile, j: int) -> np.ndarray:
    """``(U Abar)^H (U Abar) + sigma^2 I`` (broadcasts over leading axes)."""
    P_prev = np.asarray(getattr(P_prev, "entries", P_prev))
    P_cur = np.asarray(getattr(P_cur, "entries", P_cur))
    UA = _unitary_stack(P_prev, P_cur) @ build_Abar(P_prev.shape[-1])
    V = np.swapaxes(UA.conj(), -1, -2) @ UA
    return V + itic_noise_level(j, delays, snr) * np.eye(V.shape[-1])


def mmpl_covariance(pairs, snr: float, delays: DelayProfile) -> np.ndarray:
    """Window covariance for per-user ``(P_prev, P_cur)`` pairs, user 1 first."""
    pairs = [(np.asarray(getattr(a, "entries", a)), np.asarray(getattr(b, "entries", b)))
             for a, b in pairs]
    J = len(pairs)
    if J != delays.J:
        raise ValueError(f"{J} user pairs given for a {delays.J}-user delay profile")
    T = pairs[0][0].shape[-1]
    V = np.diag(mmpl_noise_diag(T, delays, snr)).astype(complex)
    for j, (Pp, Pc) in enumerate(pairs, start=1):
        UA = _unitary_stack(Pp, Pc) @ build_Atilde(j, T, J)
        V = V + np.swapaxes(UA.conj(), -1, -2) @ UA
    return V


def gaussian_cost(window: np.ndarray, V: np.ndarray) -> float:
    """Direct ``M ln det V + Tr[W V^{-1} W^H]`` without caching."""
    window = np.asarray(window)
    sign, logdet = np.linalg.slogdet(V)
    if sign.real <= 0:
        raise CovarianceError("window covariance is not positive definite")
    quad = np.trace(window @ np.linalg.solve(V, window.conj().T)).real
    return window.shape[0] * logdet + quad


def window_gram(windows: np.ndarray) -> np.ndarray:
    """``R[a, b] = sum_m W[m, a] conj(W[m, b])`` so that the trace term is ``sum(Q * R)``."""
    return np.einsum("...ma,...mb->...ab", windows, windows.conj())


@dataclass
class CostCache:
    """Per-pair log-determinants and inverse Cholesky factors of the window covariance.

    ``V = L L^H``; ``inv_factor = L^{-1}`` and ``precision = V^{-1}``.
    """

    logdet: np.ndarray
    inv_factor: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        n = self.precision.shape[-1]
        Q = self.precision.reshape(-1, n * n)
        # real(sum Q*R) == [Re Q, -Im Q] . [Re R, Im R]
        self._qri = np.ascontiguousarray(np.concatenate([Q.real, -Q.imag], axis=1).T)

    @classmethod
    def from_covariances(cls, V: np.ndarray) -> "CostCache":
        try:
            L = np.linalg.cholesky(V)
        except np.linalg.LinAlgError as exc:
            raise CovarianceError("window covariance is not Hermitian positive definite") from exc
        diag = np.diagonal(L, axis1=-2, axis2=-1).real
        if not np.all(diag > 0):
            raise CovarianceError("non-positive Cholesky pivot")
        n = V.shape[-1]
        W = np.linalg.solve(L, np.broadcast_to(np.eye(n), V.shape))
        Q = np.swapaxes(W.conj(), -1, -2) @ W
        return cls(2.0 * np.log(diag).sum(-1), W, Q)

    def __len__(self) -> int:
        return self.logdet.shape[0]

    def quadratic(self, gram: np.ndarray, rows: slice | np.ndarray | None = None) -> np.ndarray:
        """Trace terms for every cached pair (or ``rows``); ``gram`` is ``(..., n, n)``."""
        n = gram.shape[-1]
        g = gram.reshape(*gram.shape[:-2], n * n)
        gri = np.concatenate([g.real, g.imag], axis=-1)
        q = self._qri if rows is None else self._qri[:, rows]
        return gri @ q

    def costs(self, windows: np.ndarray, rows: slice | np.ndarray | None = None) -> np.ndarray:
        M = windows.shape[-2]
        ld = self.logdet if rows is None else self.logdet[rows]
        return M * ld + self.quadratic(window_gram(windows), rows)

    def cost(self, window: np.ndarray, pair: int) -> float:
        return float(self.costs(window, slice(pair, pair + 1))[..., 0])


def itic_cache(candidates: np.ndarray, pilot: np.ndarray, snr: float,
               delays: DelayProfile, j: int) -> CostCache:
    C = candidates.shape[0]
    prev = np.concatenate([candidates, pilot[None]])
    V = itic_covariance(prev[:, None], candidates[None, :], snr, delays, j)
    return CostCache.from_covariances(V.reshape((C + 1) * C, *V.shape[-2:]))


def mmpl_cache(candidates: np.ndarray, pilot: np.ndarray, snr: float,
               delays: DelayProfile, state_cap: int = DEFAULT_STATE_CAP) -> CostCache:
    C = candidates.shape[0]
    J = delays.J
    S = C ** J
    if S > state_cap:
        raise CandidateCapError(f"MMPL state space {C}^{J} = {S} exceeds cap {state_cap}")
    T = candidates.shape[-1]
    prev = np.concatenate([candidates, pilot[None]])
    U = _unitary_stack(prev[:, None], candidates[None, :])  # (C+1, C, N, 3T)
    digits = np.array(np.unravel_index(np.arange(S), (C,) * J))  # (J, S)
    prev_digits = np.concatenate([digits, np.full((J, 1), C)], axis=1)  # pilot row last
    n = 3 * T * J - J + 1
    V = np.broadcast_to(np.diag(mmpl_noise_diag(T, delays, snr)), ((S + 1) * S, n, n)).astype(complex)
    for j in range(J):
        UA = U @ build_Atilde(j + 1, T, J)
        B = np.swapaxes(UA.conj(), -1, -2) @ UA  # (C+1, C, n, n)
        V = V + B[prev_digits[j][:, None], digits[j][None, :]].reshape((S + 1) * S, n, n)
    return CostCache.from_covariances(V)


def _pair_index(prev: int | None, cur: int, S: int) -> int:
    return (S if prev is None else prev) * S + cur


def itic_cost(window, P_prev, P_cur, snr: float, delays: DelayProfile, j: int | None = None,
              cache: CostCache | None = None) -> float:
    """ITIC branch cost for one window and one candidate pair.

    With a cache, ``P_prev``/``P_cur`` are candidate indices (``P_prev=None``
    for the pilot); otherwise they are matrices and the cost is evaluated
    directly.
    """
    Y = getattr(window, "Ybar", window)
    if j is None:
        j = window.j
    if cache is not None:
        S = int(math.isqrt(4 * len(cache) + 1) - 1) // 2  # len = (S+1) S
        return cache.cost(Y, _pair_index(P_prev, P_cur, S))
    return gaussian_cost(Y, itic_covariance(P_prev, P_cur, snr, delays, j))


def mmpl_cost(window, pairs, snr: float, delays: DelayProfile,
              cache: CostCache | None = None, C: int | None = None) -> float:
    """MMPL branch cost; ``pairs`` lists ``(P_prev, P_cur)`` per user.

    With a cache, ``pairs`` holds candidate indices (``None`` for the pilot)
    and ``C`` is the candidate count.
    """
    Y = getattr(window, "Ytilde", window)
    if cache is not None:
        J = len(pairs)
        S = C ** J
        if all(p is None for p, _ in pairs):
            prev = None
        else:
            prev = int(np.ravel_multi_index([p for p, _ in pairs], (C,) * J))
        cur = int(np.ravel_multi_index([c for _, c in pairs], (C,) * J))
        return cache.cost(Y, _pair_index(prev, cur, S))
    return gaussian_cost(Y, mmpl_covariance(pairs, snr, delays))


# -- chain metrics and decoding methods ------------------------------------

class BranchMetric:
    """Branch costs of one frame over ``n_states`` states.

    Block ``l`` (2-based data block) has window ``windows[l - 2]``.
    """

    def __init__(self, cache: CostCache, windows: np.ndarray, n_states: int):
        if len(cache) != (n_states + 1) * n_states:
            raise ValueError("cache size does not match the state count")
        self.cache = cache
        self.S = n_states
        self.M = windows.shape[-2]
        self.gram = window_gram(windows)
        self.n_blocks = windows.shape[0]
        self._tables = None

    @property
    def last_block(self) -> int:
        return self.n_blocks + 1

    def _costs(self, k, rows):
        return self.M * self.cache.logdet[rows] + self.cache.quadratic(self.gram[k], rows)

    def first(self) -> np.ndarray:
        """Block-2 costs with the pilot as the previous matrix."""
        S = self.S
        return self._costs(0, slice(S * S, S * S + S))

    def row(self, l: int, prev: int) -> np.ndarray:
        S = self.S
        return self._costs(l - 2, slice(prev * S, prev * S + S))

    def table(self, l: int) -> np.ndarray:
        """``(S, S)`` costs indexed ``[prev, cur]`` for block ``l >= 3``.

        Served from the batched tables so every consumer sees identical floats.
        """
        return self.tables()[l - 3]

    def tables(self) -> np.ndarray:
        if self._tables is None:
            S = self.S
            self._tables = self._costs(slice(1, None), slice(0, S * S)).reshape(-1, S, S)
        return self._tables


def decode_method0(metric: BranchMetric) -> np.ndarray:
    """Per-block joint pair decision; the current half of each pair is returned."""
    S = metric.S
    out = np.empty(metric.n_blocks, dtype=np.int64)
    out[0] = np.argmin(metric.first())
    for l in range(3, metric.last_block + 1):
        out[l - 2] = np.argmin(metric.table(l)) % S
    return out


def forward_costs(metric: BranchMetric) -> np.ndarray:
    """Accumulated costs ``phi[l-2, s]``: best chain cost ending in state ``s`` at block ``l``."""
    phi = np.empty((metric.n_blocks, metric.S))
    phi[0] = metric.first()
    tables = metric.tables()
    for k in range(1, metric.n_blocks):
        phi[k] = (phi[k - 1][:, None] + tables[k - 1]).min(axis=0)
    return phi


def decode_method1(metric: BranchMetric, return_costs: bool = False):
    """Causal dynamic programming: decide ``argmin phi_l`` at each block."""
    phi = forward_costs(metric)
    out = np.argmin(phi, axis=1)
    return (out, phi) if return_costs else out


def resolve_schedule(schedule, last_block: int) -> list[int]:
    """Window ends ``k_1 < k_2 < ...``; the frame's last block always closes a window.

    ``None`` or ``"frame"`` decodes the whole frame at once, ``"block"`` closes
    a window at every block, an integer ``w`` uses windows of ``w`` blocks and
    a sequence gives explicit window ends.
    """
    if schedule is None or schedule == "frame":
        ends = []
    elif schedule == "block":
        ends = list(range(2, last_block + 1))
    elif isinstance(schedule, (int, np.integer)):
        if schedule < 1:
            raise ValueError("window length must be >= 1")
        ends = list(range(1 + int(schedule), last_block + 1, int(schedule)))
    else:
        ends = [int(k) for k in schedule]
    if any(b <= a for a, b in zip(ends, ends[1:])) or (ends and ends[0] < 2):
        raise ValueError(f"window ends must be increasing block indices >= 2, got {ends}")
    ends = [k for k in ends if k <= last_block]
    if not ends or ends[-1] != last_block:
        ends.append(last_block)
    return ends


def decode_method2(metric: BranchMetric, schedule=None) -> np.ndarray:
    """Windowed non-causal DP with backtracking at each window end."""
    phi = forward_costs(metric)
    out = np.empty(metric.n_blocks, dtype=np.int64)
    start = 1
    for k in resolve_schedule(schedule, metric.last_block):
        out[k - 2] = np.argmin(phi[k - 2])
        for l in range(k - 1, start, -1):
            out[l - 2] = np.argmin(phi[l - 2] + metric.table(l + 1)[:, out[l - 1]])
        start = k
    return out


def decode_method3(metric: BranchMetric, full_tables: bool = False) -> np.ndarray:
    """Decision feedback: previous decision frozen, search over the current state only.

    By default only the needed row of branch costs is evaluated per block.
    ``full_tables=True`` evaluates every table in one batched product and
    follows the per-row minimisers, which is faster for small state spaces.
    """
    out = np.empty(metric.n_blocks, dtype=np.int64)
    out[0] = np.argmin(metric.first())
    if full_tables:
        best = np.argmin(metric.tables(), axis=2).tolist()
        s = int(out[0])
        for k, row in enumerate(best, start=1):
            s = row[s]
            out[k] = s
        return out
    for l in range(3, metric.last_block + 1):
        out[l - 2] = np.argmin(metric.row(l, out[l - 3]))
    return out


def brute_force_sequence_decode(metric: BranchMetric, horizon: int | None = None,
                                cap: int = DEFAULT_BRUTE_FORCE_CAP):
    """Exhaustive minimiser of the summed branch costs over blocks ``2..horizon+1``.

    Sums are accumulated block by block, left to right, so the optimum
    equals the DP's accumulated cost bit for bit.  Returns
    ``(sequence, minimum)``; ties go to the lexicographically lowest
    sequence after the final state has been minimised.
    """
    horizon = metric.n_blocks if horizon is None else horizon
    S = metric.S
    if S ** horizon > cap:
        raise CandidateCapError(f"{S}^{horizon} sequences exceed cap {cap}")
    acc = metric.first()
    for l in range(3, horizon + 2):
        acc = acc[..., :, None] + metric.table(l)
    flat = acc.reshape(-1, S) if horizon > 1 else acc[None]
    best_last = int(np.argmin(flat.min(axis=0)))
    best_prefix = int(np.argmin(flat[:, best_last]))
    seq = np.array(np.unravel_index(best_prefix, (S,) * (horizon - 1)) + (best_last,)
                   if horizon > 1 else (best_last,), dtype=np.int64)
    return seq, float(flat[best_prefix, best_last])


METHODS = {
    "m0": decode_method0,
    "m1": decode_method1,
    "m2": decode_method2,
    "m3": decode_method3,
}


# Below this many states the batched decision-feedback path is used.
BATCHED_FEEDBACK_STATES = 64


def _run_method(metric: BranchMetric, method: str, schedule=None) -> np.ndarray:
    if method == "m2":
        return decode_method2(metric, schedule)
    if method == "m3":
        return decode_method3(metric, full_tables=metric.S <= BATCHED_FEEDBACK_STATES)
    return METHODS[method](metric)


class IticDecoder:
    """Per-user interference-cancelling decoder; one cache per user."""

    family = "itic"

    def __init__(self, candidates: np.ndarray, pilot: np.ndarray, delays: DelayProfile,
                 snr: float):
        self.candidates = candidates
        self.C = candidates.shape[0]
        self.J = delays.J
        self.caches = [itic_cache(candidates, pilot, snr, delays, j) for j in range(1, self.J + 1)]

    def metrics(self, frame: ReceivedFrame) -> list[BranchMetric]:
        return [BranchMetric(self.caches[j - 1], itic_windows(frame, j), self.C)
                for j in range(1, self.J + 1)]

    def decode(self, frame: ReceivedFrame, method: str, schedule=None) -> np.ndarray:
        """Candidate index decisions of shape ``(J, n_data_blocks)``."""
        return np.stack([_run_method(metric, method, schedule) for metric in self.metrics(frame)])


class MmplDecoder:
    """Joint decoder over all users on raw partition samples."""

    family = "mmpl"

    def __init__(self, candidates: np.ndarray, pilot: np.ndarray, delays: DelayProfile,
                 snr: float, state_cap: int = DEFAULT_STATE_CAP):
        self.candidates = candidates
        self.C = candidates.shape[0]
        self.J = delays.J
        self.S = self.C ** self.J
        self.cache = mmpl_cache(candidates, pilot, snr, delays, state_cap)

    def metric(self, frame: ReceivedFrame) -> BranchMetric:
        return BranchMetric(self.cache, mmpl_windows(frame), self.S)

    def split(self, states: np.ndarray) -> np.ndarray:
        """Map joint states to per-user candidate indices, shape ``(J, ...)``."""
        return np.array(np.unravel_index(states, (self.C,) * self.J))

    def decode(self, frame: ReceivedFrame, method: str, schedule=None) -> np.ndarray:
        return self.split(_run_method(self.metric(frame), method, schedule))


def make_decoder(family: str, candidates: np.ndarray, pilot: np.ndarray,
                 delays: DelayProfile, snr: float, state_cap: int = DEFAULT_STATE_CAP):
    if family == "itic":
        return IticDecoder(candidates, pilot, delays, snr)
    if family == "mmpl":
        return MmplDecoder(candidates, pilot, delays, snr, state_cap)
    raise ValueError(f"unknown decoder family {family!r}")
