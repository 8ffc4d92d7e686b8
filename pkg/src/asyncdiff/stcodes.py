"""Constellations, square orthogonal data-matrix codecs and the
full-diversity verifier.

Candidate data matrices are indexed by their ``K*b`` input bits read
little-endian: bit ``i`` of the index is the ``i``-th source bit, and
symbol ``k`` consumes bits ``k*b .. k*b + b - 1``.  The symbol label formed
by those bits selects the constellation point carrying that Gray label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

UNITARY_TOL = 1e-12
RANK_RTOL = 1e-8
DEFAULT_CANDIDATE_CAP = 1 << 16
DEFAULT_QUADRUPLE_CAP = 1 << 24


class AdmissibilityError(ValueError):
    """Raised when a codec cannot produce unitary matrices from a constellation."""


class CandidateCapError(RuntimeError):
    """Raised when an exhaustive enumeration would exceed its configured cap."""


def _gray(k: int) -> int:
    return k ^ (k >> 1)


@dataclass(frozen=True, eq=False)
class Constellation:
    """Constant-amplitude constellation with Gray bit labels.

    ``labels[k]`` is the bit label of ``points[k]``.
    """

    points: np.ndarray
    bits_per_symbol: int
    amplitude: float
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=complex)
        if pts.size != 1 << self.bits_per_symbol:
            raise ValueError("constellation size must be 2**bits_per_symbol")
        if not np.allclose(np.abs(pts), self.amplitude, rtol=0, atol=1e-12):
            raise ValueError("constellation points must have constant amplitude")
        if sorted(int(v) for v in self.labels) != list(range(pts.size)):
            raise ValueError("bit labels must be a bijection onto 0..2**b-1")
        object.__setattr__(self, "points", pts)
        inv = np.empty(pts.size, dtype=np.int64)
        inv[np.asarray(self.labels)] = np.arange(pts.size)
        object.__setattr__(self, "_by_label", inv)

    @property
    def order(self) -> int:
        return self.points.size

    def point_for_label(self, label: int) -> complex:
        return self.points[self._by_label[label]]

    def by_label(self) -> np.ndarray:
        """Points reordered so that entry ``v`` carries label ``v``."""
        return self.points[self._by_label]


def make_psk_constellation(order: int, rotation: float = 0.0,
                           amplitude: float = 1.0) -> Constellation:
    """Rotated ``order``-PSK, ``amplitude * exp(i(2 pi k / order + rotation))``.

    Point ``k`` carries the Gray label ``k ^ (k >> 1)``.
    """
    if order < 2 or order & (order - 1):
        raise ValueError(f"PSK order must be a power of two >= 2, got {order}")
    if not amplitude > 0:
        raise ValueError(f"amplitude must be positive, got {amplitude}")
    k = np.arange(order)
    points = amplitude * np.exp(1j * (2 * np.pi * k / order + rotation))
    labels = np.array([_gray(int(v)) for v in k])
    return Constellation(points, int(math.log2(order)), float(amplitude), labels)


@dataclass(frozen=True)
class DataMatrix:
    entries: np.ndarray
    candidate_index: int

    def __post_init__(self):
        e = self.entries
        n = e.shape[0]
        err = np.linalg.norm(e.conj().T @ e - np.eye(n))
        if err > UNITARY_TOL * 10 * n:
            raise AdmissibilityError(f"data matrix is not unitary (error {err:.3g})")


@dataclass(frozen=True)
class OstbcCodec:
    """Square orthogonal code mapping ``K`` symbols to an ``N x N`` matrix.

    ``kind`` is ``"alamouti"`` (N=K=2) or ``"rate1real4"`` (N=K=4, the real
    orthogonal design which stays orthogonal only for constellations that
    are real up to a common phase).
    """

    kind: str

    def __post_init__(self):
        if self.kind not in ("alamouti", "rate1real4"):
            raise ValueError(f"unknown codec kind {self.kind!r}")

    @property
    def N(self) -> int:
        return 2 if self.kind == "alamouti" else 4

    @property
    def K(self) -> int:
        return self.N

    @property
    def T(self) -> int:
        return self.N

    def check_admissible(self, constellation: Constellation) -> None:
        amp2 = constellation.amplitude ** 2
        if abs(amp2 * self.K - 1.0) > 1e-12:
            raise AdmissibilityError(
                f"{self.kind} needs amplitude 1/sqrt({self.K}) for unitary "
                f"matrices, got {constellation.amplitude:.6g}")
        if self.kind == "rate1real4":
            ratio = constellation.points / constellation.points[0]
            if np.max(np.abs(ratio.imag)) > 1e-12:
                raise AdmissibilityError(
                    "rate1real4 is orthogonal only for constellations that are "
                    "real up to a common phase (e.g. rotated BPSK)")

    def matrix(self, symbols: Sequence[complex]) -> np.ndarray:
        p = np.asarray(symbols, dtype=complex)
        if p.shape != (self.K,):
            raise ValueError(f"{self.kind} takes {self.K} symbols, got {p.shape[0] if p.ndim else 0}")
        return _stack_matrices(self.kind, p[None, :])[0]


def _stack_matrices(kind: str, p: np.ndarray) -> np.ndarray:
    """Vectorised codeword construction; ``p`` has shape ``(batch, K)``."""
    if kind == "alamouti":
        p1, p2 = p[:, 0], p[:, 1]
        return np.stack([np.stack([p1, -p2.conj()], -1),
                         np.stack([p2, p1.conj()], -1)], 1)
    p1, p2, p3, p4 = p.T
    rows = [(p1, -p2, -p3, -p4),
            (p2, p1, p4, -p3),
            (p3, -p4, p1, p2),
            (p4, p3, -p2, p1)]
    return np.stack([np.stack(r, -1) for r in rows], 1)


def build_data_matrix(symbols: Sequence[complex], codec: OstbcCodec,
                      constellation: Optional[Constellation] = None,
                      candidate_index: int = -1) -> DataMatrix:
    """Build one data matrix; validates admissibility when a constellation is given."""
    if constellation is not None:
        codec.check_admissible(constellation)
    return DataMatrix(codec.matrix(symbols), candidate_index)


def candidate_symbols(codec: OstbcCodec, constellation: Constellation,
                      cap: int = DEFAULT_CANDIDATE_CAP) -> np.ndarray:
    """Symbol vectors of every candidate, shape ``(2**(K*b), K)``."""
    kb = codec.K * constellation.bits_per_symbol
    count = 1 << kb
    if count > cap:
        raise CandidateCapError(f"{count} candidates exceed cap {cap}")
    idx = np.arange(count)
    b = constellation.bits_per_symbol
    mask = (1 << b) - 1
    labels = np.stack([(idx >> (k * b)) & mask for k in range(codec.K)], -1)
    return constellation.by_label()[labels]


def candidate_matrices(codec: OstbcCodec, constellation: Constellation,
                       cap: int = DEFAULT_CANDIDATE_CAP) -> np.ndarray:
    """All candidate data matrices as an array of shape ``(C, N, N)``."""
    codec.check_admissible(constellation)
    mats = _stack_matrices(codec.kind, candidate_symbols(codec, constellation, cap))
    gram = np.einsum("cji,cjk->cik", mats.conj(), mats)
    err = np.abs(gram - np.eye(codec.N)).max()
    if err > UNITARY_TOL:
        raise AdmissibilityError(f"candidate set not unitary (max error {err:.3g})")
    return mats


def enumerate_data_matrices(codec: OstbcCodec, constellation: Constellation,
                            cap: int = DEFAULT_CANDIDATE_CAP) -> list[DataMatrix]:
    mats = candidate_matrices(codec, constellation, cap)
    return [DataMatrix(m, i) for i, m in enumerate(mats)]


def build_Abar(T: int) -> np.ndarray:
    """``3T x (3T-1)`` differencing matrix: column ``k`` is ``e_{k+1} - e_k``."""
    if T < 2:
        raise ValueError(f"block length must be >= 2, got {T}")
    n = 3 * T - 1
    A = np.zeros((3 * T, n))
    k = np.arange(n)
    A[k, k] = -1.0
    A[k + 1, k] = 1.0
    return A


def build_G(P1, P2, P3, P4) -> np.ndarray:
    """Stack ``(I, P1, P1 P2)`` over ``(I, P3, P3 P4)`` and apply the differencing matrix.

    Arguments may be ``DataMatrix`` objects or arrays; leading batch
    dimensions are broadcast.
    """
    P1, P2, P3, P4 = (np.asarray(getattr(p, "entries", p)) for p in (P1, P2, P3, P4))
    shapes = {p.shape[-2:] for p in (P1, P2, P3, P4)}
    if len(shapes) != 1 or P1.shape[-1] != P1.shape[-2]:
        raise ValueError(f"data matrices must share one square shape, got {shapes}")
    N = P1.shape[-1]
    batch = np.broadcast_shapes(P1.shape[:-2], P2.shape[:-2], P3.shape[:-2], P4.shape[:-2])
    eye = np.broadcast_to(np.eye(N), batch + (N, N))
    P1, P2, P3, P4 = (np.broadcast_to(p, batch + (N, N)) for p in (P1, P2, P3, P4))
    top = np.concatenate([eye, P1, P1 @ P2], -1)
    bottom = np.concatenate([eye, P3, P3 @ P4], -1)
    return np.concatenate([top, bottom], -2) @ build_Abar(N)


def numeric_rank(M: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    s = np.linalg.svd(M, compute_uv=False)
    return np.sum(s > rtol * s[..., :1], axis=-1)


def block_pair_inverse(X1: np.ndarray, X2: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Closed-form inverse of ``[[I, X1], [I, X2]]``.

    Requires ``X2 - X1`` to be a nonzero multiple of a unitary matrix.
    """
    X1 = np.asarray(X1, dtype=complex)
    X2 = np.asarray(X2, dtype=complex)
    N = X1.shape[0]
    diff = X2 - X1
    fro2 = np.vdot(diff, diff).real
    if fro2 <= tol:
        raise ValueError("block_pair_inverse requires X1 != X2")
    gram = diff.conj().T @ diff
    if np.abs(gram - fro2 / N * np.eye(N)).max() > tol * max(1.0, fro2):
        raise ValueError("(X2-X1)^H (X2-X1) must be a scaled identity")
    Xbar = N * diff.conj().T / fro2
    eye = np.eye(N)
    return np.block([[eye + X1 @ Xbar, -X1 @ Xbar], [-Xbar, Xbar]])


@dataclass
class DiversityReport:
    verdict: str
    witness: Optional[tuple[int, int, int, int]]
    quadruples_checked: int
    case2_failures: list[int] = field(default_factory=list)
    witness_matrices: Optional[tuple[np.ndarray, ...]] = field(default=None, repr=False)

    @property
    def full_diversity(self) -> bool:
        return self.verdict == "FullDiversity"


def _condition_rows(P: np.ndarray, i1, i2, i3, i4) -> np.ndarray:
    """``w @ [P1 P2 + N (I - P1) (P3-P1)^H / |P3-P1|^2 (P3 P4 - P1 P2)]`` per quadruple."""
    N = P.shape[-1]
    P1, P2, P3, P4 = P[i1], P[i2], P[i3], P[i4]
    d = P3 - P1
    fro2 = np.einsum("qij,qij->q", d.conj(), d).real
    P12 = P1 @ P2
    inner = (np.eye(N) - P1) @ (np.swapaxes(d.conj(), -1, -2) / fro2[:, None, None]) @ (P3 @ P4 - P12)
    return (P12 + N * inner).sum(axis=-2)


def eq_condition_holds(P1, P2, P3, P4, atol: float = 1e-9) -> bool:
    """True when the rank condition vector differs from the all-ones vector."""
    mats = np.stack([np.asarray(getattr(p, "entries", p)) for p in (P1, P2, P3, P4)])
    row = _condition_rows(mats, [0], [1], [2], [3])[0]
    return bool(np.abs(row - 1).max() > atol)


def _quadruple_chunks(C: int, chunk: int = 1 << 16):
    total = C ** 4
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total))
        yield np.unravel_index(flat, (C,) * 4)


def check_full_diversity(codec: OstbcCodec, constellation: Constellation,
                         cap: int = DEFAULT_QUADRUPLE_CAP, atol: float = 1e-9) -> DiversityReport:
    """Exhaustively evaluate the quadruple condition over all candidates.

    Every quadruple with ``P1 != P3`` is tested, plus ``w P1 != w`` for every
    candidate ``P1`` (the ``P1 == P3`` case).  The first violating quadruple
    in canonical order is returned as the witness.
    """
    P = candidate_matrices(codec, constellation)
    C = P.shape[0]
    if C ** 4 > cap:
        raise CandidateCapError(f"{C ** 4} quadruples exceed cap {cap}")
    checked = 0
    witness = None
    for i1, i2, i3, i4 in _quadruple_chunks(C):
        keep = i1 != i3
        i1, i2, i3, i4 = i1[keep], i2[keep], i3[keep], i4[keep]
        rows = _condition_rows(P, i1, i2, i3, i4)
        bad = np.abs(rows - 1).max(axis=-1) <= atol
        checked += i1.size
        if witness is None and bad.any():
            k = int(np.argmax(bad))
            witness = (int(i1[k]), int(i2[k]), int(i3[k]), int(i4[k]))
    case2 = np.abs(P.sum(axis=-2) - 1).max(axis=-1) <= atol
    case2_failures = [int(i) for i in np.flatnonzero(case2)]
    checked += C
    if witness is None and case2_failures:
        c = case2_failures[0]
        # w P1 = w is the instance P2 = P4 = P1 with P1 = P3; any P2 != P4 exposes it.
        witness = (c, 0, c, 1)
    verdict = "Fails" if witness is not None else "FullDiversity"
    mats = tuple(P[i] for i in witness) if witness is not None else None
    return DiversityReport(verdict, witness, checked, case2_failures, mats)


def rank_oracle(codec: OstbcCodec, constellation: Constellation,
                cap: int = DEFAULT_QUADRUPLE_CAP):
    """Direct rank test of ``G`` over every quadruple with ``(P1,P2) != (P3,P4)``.

    Returns ``(full_rank, i1, i2, i3, i4)`` arrays in canonical order.
    """
    P = candidate_matrices(codec, constellation)
    C, N = P.shape[0], P.shape[-1]
    if C ** 4 > cap:
        raise CandidateCapError(f"{C ** 4} quadruples exceed cap {cap}")
    out = []
    for i1, i2, i3, i4 in _quadruple_chunks(C):
        keep = (i1 != i3) | (i2 != i4)
        i1, i2, i3, i4 = i1[keep], i2[keep], i3[keep], i4[keep]
        full = numeric_rank(build_G(P[i1], P[i2], P[i3], P[i4])) == 2 * N
        out.append((full, i1, i2, i3, i4))
    return tuple(np.concatenate(parts) for parts in zip(*out))


def verifier_predicate(P: np.ndarray, i1, i2, i3, i4, atol: float = 1e-9) -> np.ndarray:
    """Per-quadruple full-rank prediction from the closed-form conditions."""
    i1, i2, i3, i4 = (np.asarray(i) for i in (i1, i2, i3, i4))
    pred = np.empty(i1.size, dtype=bool)
    c1 = i1 != i3
    if c1.any():
        rows = _condition_rows(P, i1[c1], i2[c1], i3[c1], i4[c1])
        pred[c1] = np.abs(rows - 1).max(axis=-1) > atol
    case2_ok = np.abs(P.sum(axis=-2) - 1).max(axis=-1) > atol
    pred[~c1] = case2_ok[i1[~c1]]
    return pred


def witness_violates(report: DiversityReport, codec: OstbcCodec,
                     constellation: Constellation) -> bool:
    """Re-evaluate a reported witness from scratch; True when it really fails."""
    if report.witness is None:
        return False
    P = candidate_matrices(codec, constellation)
    i1, i2, i3, i4 = report.witness
    G = build_G(P[i1], P[i2], P[i3], P[i4])
    return int(numeric_rank(G)) < 2 * P.shape[-1]
