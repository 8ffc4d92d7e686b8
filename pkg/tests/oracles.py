"""Independent reference constructions used by the tests.

Everything here is written from the index definitions with explicit loops,
sharing no code with the library's vectorised paths.
"""

import numpy as np

from asyncdiff.channel import build_interleave_matrix
from asyncdiff.stcodes import OstbcCodec, candidate_matrices, make_psk_constellation


def abar_loops(T):
    n = 3 * T
    A = np.zeros((n, n - 1))
    for c in range(n - 1):
        A[c, c] = -1
        A[c + 1, c] = 1
    return A


def atilde_runs(j, T, J):
    """Stair matrix laid out from its row run lengths ``(j, J, ..., J, J-j+1)``."""
    width = 3 * T * J - J + 1
    runs = [j] + [J] * (3 * T - 2) + [J - j + 1]
    A = np.zeros((3 * T, width))
    col = 0
    for r, n in enumerate(runs):
        for _ in range(n):
            A[r, col] = 1
            col += 1
    assert col == width
    return A


def random_unitary(N, rng):
    z = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
    q, r = np.linalg.qr(z)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def default_candidates(N):
    if N == 2:
        return candidate_matrices(OstbcCodec("alamouti"), make_psk_constellation(4, np.pi / 8, 2 ** -0.5))
    return candidate_matrices(OstbcCodec("rate1real4"), make_psk_constellation(2, np.pi / 4, 0.5))


def random_chain(J, N, L, rng, candidates=None):
    """Random data matrices and chained codewords per user, random unitary ``S^0``."""
    if candidates is None:
        candidates = default_candidates(N)
    P = candidates[rng.integers(0, len(candidates), (J, L))]
    S = np.empty((J, L, N, N), dtype=complex)
    for j in range(J):
        S[j, 0] = random_unitary(N, rng)
        for l in range(1, L):
            S[j, l] = S[j, l - 1] @ P[j, l]
    return S, P


def received_by_interleave(S, H):
    """``Y = sum_j H_j X_j A_j`` from per-user symbol streams and 0/1 overlap matrices."""
    J, L, N, T = S.shape
    D = L * T
    Y = 0
    for j in range(J):
        X = np.zeros((N, D), dtype=complex)
        for l in range(L):
            for t in range(T):
                X[:, l * T + t] = S[j, l][:, t]
        Y = Y + H[j] @ X @ build_interleave_matrix(j + 1, D, J)
    return Y


def y_at(Y, J, T, l, t, i):
    """Partition sample ``y_{t,i}^l`` with ``t, i`` 1-based and ``l`` 0-based."""
    return Y[:, (T * l + t - 1) * J + i - 1]


def ybar_sample(Y, J, T, l, t, j):
    prev = (l, t - 1, J) if j == 1 and t > 1 else (l - 1, T, J) if j == 1 else (l, t, j - 1)
    return y_at(Y, J, T, l, t, j) - y_at(Y, J, T, *prev)


def itic_window_loops(Y, J, T, j, l):
    cols = [(l - 2, t) for t in range(2, T + 1)]
    cols += [(l - 1, t) for t in range(1, T + 1)] + [(l, t) for t in range(1, T + 1)]
    return np.stack([ybar_sample(Y, J, T, b, t, j) for b, t in cols], axis=1)


def mmpl_window_loops(Y, J, T, l):
    order = [(b, t, i) for b in (l - 2, l - 1, l) for t in range(1, T + 1) for i in range(1, J + 1)]
    start = order.index((l - 2, 1, J))
    return np.stack([y_at(Y, J, T, *k) for k in order[start:]], axis=1)


def u_matrix(P_prev, P_cur):
    N = P_prev.shape[0]
    return np.hstack([np.eye(N), P_prev, P_prev @ P_cur])
