import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from asyncdiff.channel import DelayProfile, ReceivedFrame, draw_channel, transmit_frame
from asyncdiff.decoders import (BranchMetric, CostCache, build_Atilde, brute_force_sequence_decode,
                                decode_method0, decode_method1, decode_method2, decode_method3,
                                gaussian_cost, itic_cache, itic_cost, itic_covariance,
                                itic_difference_block, itic_windows, make_decoder, mmpl_cache,
                                mmpl_cost, mmpl_covariance, mmpl_gather_block, mmpl_windows,
                                resolve_schedule)
from asyncdiff.diffmod import encode_indices, initial_codewords
from asyncdiff.stcodes import (CandidateCapError, OstbcCodec, build_Abar, candidate_matrices,
                               make_psk_constellation)
from oracles import (atilde_runs, itic_window_loops, mmpl_window_loops, random_chain,
                     random_unitary, received_by_interleave, u_matrix)

ALAMOUTI = OstbcCodec("alamouti")
BPSK_P = candidate_matrices(ALAMOUTI, make_psk_constellation(2, math.pi / 4, 2 ** -0.5))
PILOT = np.eye(2, dtype=complex)


# -- stair matrix -----------------------------------------------------------

def test_atilde_single_user_is_identity():
    assert np.array_equal(build_Atilde(1, 2, 1), np.eye(6))


def test_atilde_two_users_user_two():
    # [PUBLISHED] 6 x 11: row 1 covers columns 1-2, rows 2-5 runs of 2, row 6 the last column
    A = build_Atilde(2, 2, 2)
    assert A.shape == (6, 11)
    assert np.flatnonzero(A[0]).tolist() == [0, 1]
    for r in range(1, 5):
        assert np.flatnonzero(A[r]).tolist() == [2 * r, 2 * r + 1]
    assert np.flatnonzero(A[5]).tolist() == [10]


@pytest.mark.parametrize("J", [1, 2, 3, 4])
@pytest.mark.parametrize("T", [2, 4])
def test_atilde_matches_run_oracle(J, T):
    for j in range(1, J + 1):
        A = build_Atilde(j, T, J)
        assert np.array_equal(A, atilde_runs(j, T, J))
        sums = A.sum(axis=1)
        assert sums[0] == j and sums[-1] == J - j + 1 and np.all(sums[1:-1] == J)
    # every column belongs to exactly one row for each user
    assert all(np.all(build_Atilde(j, T, J).sum(axis=0) == 1) for j in range(1, J + 1))


def test_atilde_bad_index():
    with pytest.raises(ValueError):
        build_Atilde(0, 2, 2)
    with pytest.raises(ValueError):
        build_Atilde(1, 1, 2)


# -- windows ----------------------------------------------------------------

def _noiseless(J, N, M, L, seed):
    rng = np.random.default_rng(seed)
    S, P = random_chain(J, N, L, rng)
    H = draw_channel(J, M, N, rng)
    frame = transmit_frame(S, H, DelayProfile.equal_spacing(J), math.inf)
    return frame, S, P, H.H


@pytest.mark.parametrize("J,N,M", [(1, 2, 1), (2, 2, 2), (3, 2, 2), (2, 4, 3), (3, 4, 1)])
def test_itic_window_identity(J, N, M):
    frame, S, P, H = _noiseless(J, N, M, 6, J * 100 + N)
    T = N
    for j in range(1, J + 1):
        W = itic_windows(frame, j)
        for l in range(2, 6):
            ref = itic_window_loops(frame.Y, J, T, j, l)
            assert np.array_equal(W[l - 2], ref)
            rhs = H[j - 1] @ S[j - 1, l - 2] @ u_matrix(P[j - 1, l - 1], P[j - 1, l]) @ build_Abar(T)
            assert np.linalg.norm(ref - rhs) < 1e-9


@pytest.mark.parametrize("J,N,M", [(1, 2, 1), (2, 2, 2), (3, 2, 2), (2, 4, 3)])
def test_mmpl_window_identity(J, N, M):
    frame, S, P, H = _noiseless(J, N, M, 6, J * 10 + N)
    T = N
    W = mmpl_windows(frame)
    assert W.shape[-1] == 3 * T * J - J + 1
    for l in range(2, 6):
        ref = mmpl_window_loops(frame.Y, J, T, l)
        assert np.array_equal(W[l - 2], ref)
        rhs = sum(H[j] @ S[j, l - 2] @ u_matrix(P[j, l - 1], P[j, l]) @ build_Atilde(j + 1, T, J)
                  for j in range(J))
        assert np.linalg.norm(ref - rhs) < 1e-9


def test_itic_single_user_is_time_difference(rng):
    Y = rng.standard_normal((2, 13)) + 0j
    f = ReceivedFrame(Y, J=1, T=2)
    w = itic_difference_block(f, 1, 3)
    cols = [3, 4, 5, 6, 7]
    assert np.array_equal(w.Ybar, Y[:, cols] - Y[:, [c - 1 for c in cols]])


def test_zero_frame_zero_windows():
    f = ReceivedFrame(np.zeros((2, 2 * 13), dtype=complex), J=2, T=2)
    assert not itic_difference_block(f, 2, 3).Ybar.any()
    assert not mmpl_gather_block(f, 4).Ytilde.any()


def test_window_block_range():
    f = ReceivedFrame(np.zeros((1, 13), dtype=complex), J=1, T=2)
    with pytest.raises(ValueError):
        itic_difference_block(f, 1, 1)
    with pytest.raises(ValueError):
        mmpl_gather_block(f, 1)


# -- costs ------------------------------------------------------------------

DELAYS2 = DelayProfile((0.0, 0.3))


def test_cost_at_zero_window_is_logdet():
    V = itic_covariance(BPSK_P[1], BPSK_P[2], 3.0, DELAYS2, 1)
    c = itic_cost(np.zeros((3, 5)), BPSK_P[1], BPSK_P[2], 3.0, DELAYS2, 1)
    assert c == pytest.approx(3 * np.linalg.slogdet(V)[1], rel=1e-12)


def test_mmpl_cost_at_zero_window_is_logdet():
    pairs = [(BPSK_P[0], BPSK_P[3]), (BPSK_P[2], BPSK_P[1])]
    V = mmpl_covariance(pairs, 2.0, DELAYS2)
    assert mmpl_cost(np.zeros((2, 11)), pairs, 2.0, DELAYS2) == pytest.approx(
        2 * np.linalg.slogdet(V)[1], rel=1e-12)


def test_covariance_noise_terms():
    # noise level uses both adjacent gaps of user j
    V = itic_covariance(BPSK_P[0], BPSK_P[0], 4.0, DELAYS2, 2)
    UA = u_matrix(BPSK_P[0], BPSK_P[0]) @ build_Abar(2)
    sigma = (1 / 0.7 + 1 / 0.3) / 4.0
    assert np.allclose(V, UA.conj().T @ UA + sigma * np.eye(5))
    D = np.diag(mmpl_covariance([(PILOT, PILOT), (PILOT, PILOT)], 4.0, DELAYS2) -
                sum((u_matrix(PILOT, PILOT) @ build_Atilde(j, 2, 2)).T @
                    (u_matrix(PILOT, PILOT) @ build_Atilde(j, 2, 2)) for j in (1, 2)))
    gaps = [0.7, 0.3] * 5 + [0.7]  # first column is partition J
    assert np.allclose(D, 1 / (4.0 * np.array(gaps)))


@given(st.integers(0, 10 ** 6))
def test_receive_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((3, 5)) + 1j * rng.standard_normal((3, 5))
    Q = random_unitary(3, rng)
    a = itic_cost(Y, BPSK_P[1], BPSK_P[3], 5.0, DELAYS2, 1)
    b = itic_cost(Q @ Y, BPSK_P[1], BPSK_P[3], 5.0, DELAYS2, 1)
    assert a == pytest.approx(b, rel=1e-10)


@pytest.mark.parametrize("snr", [0.1, 3.0, 1e3])
def test_itic_cache_matches_direct(snr, rng):
    cache = itic_cache(BPSK_P, PILOT, snr, DELAYS2, 2)
    Y = rng.standard_normal((2, 5)) + 1j * rng.standard_normal((2, 5))
    for p in [None, 0, 1, 2, 3]:
        for c in range(4):
            Pp = PILOT if p is None else BPSK_P[p]
            direct = itic_cost(Y, Pp, BPSK_P[c], snr, DELAYS2, 2)
            cached = itic_cost(Y, p, c, snr, DELAYS2, 2, cache=cache)
            assert abs(direct - cached) <= 1e-9 * abs(direct)


def test_mmpl_cache_matches_direct(rng):
    cache = mmpl_cache(BPSK_P, PILOT, 2.0, DELAYS2)
    Y = rng.standard_normal((2, 11)) + 1j * rng.standard_normal((2, 11))
    for trial in range(30):
        a, b, c, d = rng.integers(0, 4, 4)
        pairs = [(BPSK_P[a], BPSK_P[b]), (BPSK_P[c], BPSK_P[d])]
        direct = mmpl_cost(Y, pairs, 2.0, DELAYS2)
        cached = mmpl_cost(Y, [(a, b), (c, d)], 2.0, DELAYS2, cache=cache, C=4)
        assert abs(direct - cached) <= 1e-9 * abs(direct)
    pilot_pairs = [(PILOT, BPSK_P[1]), (PILOT, BPSK_P[2])]
    assert mmpl_cost(Y, [(None, 1), (None, 2)], 2.0, DELAYS2, cache=cache, C=4) == pytest.approx(
        mmpl_cost(Y, pilot_pairs, 2.0, DELAYS2), rel=1e-9)


def test_covariances_positive_definite():
    for snr in (1e-3, 1.0, 1e6):
        cache = mmpl_cache(BPSK_P, PILOT, snr, DelayProfile((0.0, 0.01)))
        assert np.all(np.isfinite(cache.logdet))


def test_non_pd_covariance_raises():
    with pytest.raises(np.linalg.LinAlgError):
        CostCache.from_covariances(-np.eye(3)[None])


def test_noiseless_pair_argmin_itic(rng):
    frame, S, P, H = _noiseless(2, 2, 2, 5, 7)
    # random unitary S^0 is fine; the identity holds for any S^{l-2}
    Ps = candidate_matrices(ALAMOUTI, make_psk_constellation(4, math.pi / 8, 2 ** -0.5))
    W = itic_difference_block(frame, 1, 3)
    costs = np.array([[itic_cost(W, Ps[a], Ps[b], 1e6, DelayProfile.equal_spacing(2))
                       for b in range(16)] for a in range(16)])
    a, b = np.unravel_index(np.argmin(costs), costs.shape)
    assert np.allclose(Ps[a], P[0, 2]) and np.allclose(Ps[b], P[0, 3])


def test_noiseless_tuple_argmin_mmpl():
    rng = np.random.default_rng(3)
    idx = rng.integers(0, 4, (2, 3))
    S = encode_indices(idx, BPSK_P, initial_codewords(2))
    d = DelayProfile((0.0, 0.4))
    frame = transmit_frame(S, draw_channel(2, 2, 2, rng), d, math.inf)
    W = mmpl_gather_block(frame, 3)
    best, arg = np.inf, None
    for t in np.ndindex(4, 4, 4, 4):
        c = mmpl_cost(W, [(BPSK_P[t[0]], BPSK_P[t[1]]), (BPSK_P[t[2]], BPSK_P[t[3]])], 1e6, d)
        if c < best:
            best, arg = c, t
    assert arg == (idx[0, 0], idx[0, 1], idx[1, 0], idx[1, 1])


# -- decoding methods --------------------------------------------------------

def _metric(seed, n_data=5, snr_db=3.0, J=2, C_states=None):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, 4, (J, n_data))
    S = encode_indices(idx, BPSK_P, initial_codewords(2))
    d = DelayProfile.equal_spacing(J)
    snr = 10 ** (snr_db / 10)
    frame = transmit_frame(S, draw_channel(J, 2, 2, rng), d, snr, rng)
    dec = make_decoder("itic", BPSK_P, PILOT, d, snr)
    return dec.metrics(frame)[0], idx


def test_method1_equals_method0_on_one_block():
    m, _ = _metric(1, n_data=1)
    assert decode_method1(m).tolist() == decode_method0(m).tolist()


@pytest.mark.parametrize("seed", range(20))
def test_method1_final_matches_brute_force(seed):
    m, _ = _metric(seed, n_data=4 + seed % 2, snr_db=0.0)
    seq, best = brute_force_sequence_decode(m)
    out, phi = decode_method1(m, return_costs=True)
    assert out[-1] == seq[-1]
    assert phi[-1].min() == best
    assert decode_method2(m, "frame").tolist() == seq.tolist()


@pytest.mark.parametrize("seed", range(10))
def test_method2_window_ends_match_method1(seed):
    m, _ = _metric(100 + seed, n_data=9, snr_db=0.0)
    m1 = decode_method1(m)
    for sched in ([3, 6], 2, "frame"):
        m2 = decode_method2(m, sched)
        for k in resolve_schedule(sched, m.last_block):
            assert m2[k - 2] == m1[k - 2]
    assert decode_method2(m, "block").tolist() == m1.tolist()


@pytest.mark.parametrize("seed", range(5))
def test_method3_batched_equals_rowwise(seed):
    m, _ = _metric(200 + seed, n_data=12, snr_db=0.0)
    assert decode_method3(m).tolist() == decode_method3(m, full_tables=True).tolist()


def test_method3_uses_pilot_then_feedback():
    m, _ = _metric(5, n_data=4, snr_db=0.0)
    out = decode_method3(m)
    assert out[0] == np.argmin(m.first())
    for l in range(3, m.last_block + 1):
        assert out[l - 2] == np.argmin(m.table(l)[out[l - 3]])


def test_brute_force_cap():
    m, _ = _metric(0, n_data=5)
    with pytest.raises(CandidateCapError):
        brute_force_sequence_decode(m, cap=100)


def test_resolve_schedule():
    assert resolve_schedule("frame", 7) == [7]
    assert resolve_schedule(None, 7) == [7]
    assert resolve_schedule("block", 4) == [2, 3, 4]
    assert resolve_schedule(2, 7) == [3, 5, 7]
    assert resolve_schedule([3, 5], 7) == [3, 5, 7]
    with pytest.raises(ValueError):
        resolve_schedule([5, 3], 7)
    with pytest.raises(ValueError):
        resolve_schedule(0, 7)


@pytest.mark.parametrize("family", ["itic", "mmpl"])
@pytest.mark.parametrize("method", ["m0", "m1", "m2", "m3"])
@pytest.mark.parametrize("J", [1, 2, 3])
def test_noiseless_decoding_exact(family, method, J):
    rng = np.random.default_rng(J)
    idx = rng.integers(0, 4, (J, 10))
    S = encode_indices(idx, BPSK_P, initial_codewords(2))
    d = DelayProfile.equal_spacing(J)
    frame = transmit_frame(S, draw_channel(J, 2, 2, rng), d, math.inf)
    dec = make_decoder(family, BPSK_P, PILOT, d, 1e6)
    assert np.array_equal(dec.decode(frame, method), idx)


def test_mmpl_single_user_matches_itic_at_high_snr():
    # [DERIVED] J=1: both decoders see the same information; compare decisions on shared draws
    agree = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, 4, (1, 16))
        S = encode_indices(idx, BPSK_P, initial_codewords(2))
        d = DelayProfile((0.0,))
        frame = transmit_frame(S, draw_channel(1, 2, 2, rng), d, 100.0, rng)
        a = make_decoder("itic", BPSK_P, PILOT, d, 100.0).decode(frame, "m1")
        b = make_decoder("mmpl", BPSK_P, PILOT, d, 100.0).decode(frame, "m1")
        agree += np.array_equal(a, b)
    assert agree == 20


def test_mmpl_state_cap():
    Ps = candidate_matrices(ALAMOUTI, make_psk_constellation(4, math.pi / 8, 2 ** -0.5))
    with pytest.raises(CandidateCapError):
        make_decoder("mmpl", Ps, PILOT, DelayProfile.equal_spacing(3), 10.0)


def test_unknown_family():
    with pytest.raises(ValueError):
        make_decoder("zf", BPSK_P, PILOT, DELAYS2, 10.0)


def test_branch_metric_size_check():
    cache = itic_cache(BPSK_P, PILOT, 1.0, DELAYS2, 1)
    with pytest.raises(ValueError):
        BranchMetric(cache, np.zeros((2, 1, 5)), 3)


def test_gaussian_cost_direct():
    V = np.diag([1.0, 2.0])
    W = np.array([[1.0, 2.0]])
    assert gaussian_cost(W, V) == pytest.approx(math.log(2) + 1 + 2)
