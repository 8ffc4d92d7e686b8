"""Seeded Monte Carlo BER experiments.

Every frame draws from its own stream ``SeedSequence(seed, spawn_key=(frame,))``
so results depend only on ``(seed, config)`` and never on how frames are
spread over workers.  The same frame index yields the same channel, bits and
unit noise at every SNR point and for every decoder, which makes curves and
decoder comparisons paired.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np

from .channel import DelayProfile, draw_channel, partition_noise, transmit_frame
from .decoders import DEFAULT_STATE_CAP, make_decoder
from .diffmod import encode_indices, initial_codewords
from .stcodes import (AdmissibilityError, CandidateCapError, OstbcCodec,
                      candidate_matrices, make_psk_constellation)

log = logging.getLogger(__name__)

WORKERS_ENV = "ASYNCDIFF_WORKERS"
# Decoder SNR used when the channel itself is noiseless.
NOISELESS_DECODER_SNR = 1e6
CSV_FIELDS = ["snr_db", "user", "bits", "bit_errors", "ber", "frames", "seed"]


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending setting."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class SimConfig:
    J: int = 2
    M: int = 2
    codec: str = "alamouti"
    constellation_order: int = 2
    rotation: float = math.pi / 4
    amplitude: Optional[float] = None
    delays: tuple = (0.0, 0.5)
    decoder: str = "itic"
    method: str = "m3"
    window_schedule: object = "frame"
    data_blocks: int = 64
    frames: int = 100
    seed: int = 0
    snr_db: tuple = (0.0, 5.0, 10.0)
    early_stop_errors: int = 0
    state_cap: int = DEFAULT_STATE_CAP
    chunk_frames: int = 25

    def __post_init__(self):
        object.__setattr__(self, "delays", tuple(float(d) for d in self.delays))
        object.__setattr__(self, "snr_db", tuple(float(s) for s in self.snr_db))
        if isinstance(self.window_schedule, list):
            object.__setattr__(self, "window_schedule", tuple(self.window_schedule))
        self.validate()

    @property
    def N(self) -> int:
        return OstbcCodec(self.codec).N

    @property
    def K(self) -> int:
        return OstbcCodec(self.codec).K

    @property
    def b(self) -> int:
        return int(math.log2(self.constellation_order))

    @property
    def resolved_amplitude(self) -> float:
        return self.amplitude if self.amplitude is not None else 1.0 / math.sqrt(self.K)

    def validate(self) -> None:
        for key in ("J", "M", "data_blocks", "frames", "chunk_frames"):
            if not isinstance(getattr(self, key), (int, np.integer)) or getattr(self, key) < 1:
                raise ConfigError(key, f"must be a positive integer, got {getattr(self, key)!r}")
        if self.codec not in ("alamouti", "rate1real4"):
            raise ConfigError("codec", f"unknown codec {self.codec!r}")
        if self.decoder not in ("itic", "mmpl"):
            raise ConfigError("decoder", f"unknown decoder family {self.decoder!r}")
        if self.method not in ("m0", "m1", "m2", "m3"):
            raise ConfigError("method", f"unknown method {self.method!r}")
        if len(self.delays) != self.J:
            raise ConfigError("delays", f"expected {self.J} offsets, got {len(self.delays)}")
        try:
            DelayProfile.from_fractions(self.delays)
        except ValueError as exc:
            raise ConfigError("delays", str(exc)) from exc
        if not self.snr_db:
            raise ConfigError("snr_db", "grid is empty")
        if any(b <= a for a, b in zip(self.snr_db, self.snr_db[1:])):
            raise ConfigError("snr_db", f"grid must be strictly increasing, got {list(self.snr_db)}")
        if self.early_stop_errors < 0:
            raise ConfigError("early_stop_errors", "must be >= 0")
        try:
            constellation = make_psk_constellation(self.constellation_order, self.rotation,
                                                   self.resolved_amplitude)
            OstbcCodec(self.codec).check_admissible(constellation)
        except AdmissibilityError as exc:
            raise ConfigError("amplitude" if "amplitude" in str(exc) else "constellation_order",
                              str(exc)) from exc
        except ValueError as exc:
            raise ConfigError("constellation_order", str(exc)) from exc

    def check_caps(self) -> None:
        """Raise ``CandidateCapError`` when the MMPL state space is too large."""
        if self.decoder == "mmpl":
            states = (1 << (self.K * self.b)) ** self.J
            if states > self.state_cap:
                raise CandidateCapError(
                    f"MMPL state space {states} exceeds state_cap {self.state_cap}")

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["delays"] = list(self.delays)
        d["snr_db"] = list(self.snr_db)
        if isinstance(self.window_schedule, tuple):
            d["window_schedule"] = list(self.window_schedule)
        return d


@dataclass
class BerPoint:
    snr_db: float
    bit_errors: int
    bits: int
    frames: int
    user_errors: list[int]
    user_bits: list[int]
    frame_error_sq: float = 0.0
    stopped_early: bool = False
    delta_tau: Optional[float] = field(default=None)

    @property
    def ber(self) -> float:
        return self.bit_errors / self.bits if self.bits else float("nan")

    @property
    def user_ber(self) -> list[float]:
        return [e / b if b else float("nan") for e, b in zip(self.user_errors, self.user_bits)]

    @property
    def std_error(self) -> float:
        """Standard error of the BER with errors clustered per frame."""
        if self.frames < 2 or not self.bits:
            return float("nan")
        mean = self.bit_errors / self.frames
        var = (self.frame_error_sq - self.frames * mean * mean) / (self.frames - 1)
        return math.sqrt(max(var, 0.0) * self.frames) / self.bits


# -- one frame ------------------------------------------------------------

@dataclass(frozen=True)
class _Setup:
    candidates: np.ndarray
    init: object
    delays: DelayProfile
    decoder: object


@lru_cache(maxsize=16)
def _setup(config: SimConfig, snr_db: float, delays: tuple) -> _Setup:
    codec = OstbcCodec(config.codec)
    constellation = make_psk_constellation(config.constellation_order, config.rotation,
                                           config.resolved_amplitude)
    candidates = candidate_matrices(codec, constellation)
    init = initial_codewords(codec.N)
    profile = DelayProfile.from_fractions(delays)
    snr = db_to_linear(snr_db)
    dec_snr = NOISELESS_DECODER_SNR if math.isinf(snr) else snr
    decoder = make_decoder(config.decoder, candidates, init.P1, profile, dec_snr, config.state_cap)
    return _Setup(candidates, init, profile, decoder)


def db_to_linear(snr_db: float) -> float:
    return math.inf if math.isinf(snr_db) else 10.0 ** (snr_db / 10.0)


def frame_rng(seed: int, frame: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(frame,)))


def simulate_frame(config: SimConfig, snr_db: float, frame: int,
                   delays: Optional[tuple] = None) -> np.ndarray:
    """Bit errors per user for one frame, shape ``(J,)``."""
    s = _setup(config, snr_db, config.delays if delays is None else delays)
    rng = frame_rng(config.seed, frame)
    C = s.candidates.shape[0]
    channels = draw_channel(config.J, config.M, config.N, rng)
    idx = rng.integers(0, C, size=(config.J, config.data_blocks))
    codewords = encode_indices(idx, s.candidates, s.init)
    frame_data = transmit_frame(codewords, channels, s.delays, math.inf)
    # unit noise is drawn unconditionally so realisations match across SNR points
    D = (config.data_blocks + 2) * config.N
    snr = db_to_linear(snr_db)
    noise = partition_noise(config.M, D + 1, s.delays, 1.0, rng)
    if not math.isinf(snr):
        frame_data = dataclasses.replace(frame_data, Y=frame_data.Y + noise / math.sqrt(snr))
    decided = s.decoder.decode(frame_data, config.method, config.window_schedule)
    return np.bitwise_count(np.bitwise_xor(decided, idx)).sum(axis=1, dtype=np.int64)


def _run_chunk(args) -> tuple[np.ndarray, float]:
    config, snr_db, delays, start, stop = args
    errors = np.zeros(config.J, dtype=np.int64)
    sq = 0.0
    for f in range(start, stop):
        e = simulate_frame(config, snr_db, f, delays)
        errors += e
        sq += float(e.sum()) ** 2
    return errors, sq


def resolve_workers(workers: Optional[int] = None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, int(workers))


def run_ber_point(config: SimConfig, snr_db: float, workers: Optional[int] = None,
                  delays: Optional[Sequence[float]] = None,
                  executor: Optional[ProcessPoolExecutor] = None) -> BerPoint:
    """Simulate ``config.frames`` frames at one SNR (fewer with early stopping).

    Frames are processed in fixed chunks; with early stopping the point
    ends after the first chunk, in frame order, at which the error count
    reaches the threshold, so the result is independent of ``workers``.
    """
    config.check_caps()
    delays = tuple(config.delays if delays is None else delays)
    if delays != config.delays:
        config.replace(delays=delays)  # validation only
    bits_per_frame = config.data_blocks * config.K * config.b
    chunks = [(config, float(snr_db), delays, a, min(a + config.chunk_frames, config.frames))
              for a in range(0, config.frames, config.chunk_frames)]
    workers = resolve_workers(workers)
    errors = np.zeros(config.J, dtype=np.int64)
    sq = 0.0
    frames = 0
    stopped = False
    own = None
    if executor is None and workers > 1:
        executor = own = ProcessPoolExecutor(workers)
    try:
        wave = workers if executor is not None else 1
        for w in range(0, len(chunks), wave):
            batch = chunks[w:w + wave]
            results = executor.map(_run_chunk, batch) if executor is not None else map(_run_chunk, batch)
            for chunk, (e, s) in zip(batch, results):
                if stopped:
                    continue
                errors += e
                sq += s
                frames += chunk[4] - chunk[3]
                if config.early_stop_errors and errors.sum() >= config.early_stop_errors:
                    stopped = frames < config.frames
                    if stopped:
                        break
            if stopped:
                break
    finally:
        if own is not None:
            own.shutdown()
    user_bits = [frames * bits_per_frame] * config.J
    point = BerPoint(float(snr_db), int(errors.sum()), sum(user_bits), frames,
                     [int(e) for e in errors], user_bits, sq, stopped)
    log.info("snr %.2f dB: %d/%d errors over %d frames", snr_db, point.bit_errors, point.bits, frames)
    return point


def sweep_snr(config: SimConfig, csv_path: Optional[str] = None,
              workers: Optional[int] = None) -> list[BerPoint]:
    workers = resolve_workers(workers)
    executor = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        curve = [run_ber_point(config, s, workers, executor=executor) for s in config.snr_db]
    finally:
        if executor is not None:
            executor.shutdown()
    if csv_path:
        write_csv(curve, csv_path, config.seed)
        write_metadata(config, curve, csv_path)
    return curve


def sweep_delay(config: SimConfig, snr_db: float, delta_taus: Iterable[float],
                csv_path: Optional[str] = None, workers: Optional[int] = None) -> list[BerPoint]:
    """Two-user BER at a fixed SNR for each offset ``tau_2 - tau_1`` (fractions of T_s)."""
    if config.J != 2:
        raise ConfigError("J", "delay sweeps are defined for two users")
    workers = resolve_workers(workers)
    executor = ProcessPoolExecutor(workers) if workers > 1 else None
    curve = []
    try:
        for dt in delta_taus:
            delays = (0.0, float(dt))
            try:
                DelayProfile.from_fractions(delays)
            except ValueError as exc:
                raise ConfigError("delays", str(exc)) from exc
            p = run_ber_point(config, snr_db, workers, delays=delays, executor=executor)
            p.delta_tau = float(dt)
            curve.append(p)
    finally:
        if executor is not None:
            executor.shutdown()
    if csv_path:
        write_csv(curve, csv_path, config.seed, key="delta_tau")
        write_metadata(config, curve, csv_path, extra={"sweep": "delay", "snr_db": snr_db})
    return curve


def estimate_diversity_slope(curve, window: tuple[float, float] | None = None) -> float:
    """Negative least-squares slope of ``log10(BER)`` against ``SNR_dB / 10``.

    ``curve`` holds ``BerPoint`` objects or ``(snr_db, ber)`` pairs; points
    with zero BER or outside ``window`` are ignored.
    """
    pts = [(p.snr_db, p.ber) if isinstance(p, BerPoint) else (float(p[0]), float(p[1]))
           for p in curve]
    lo, hi = window if window is not None else (-math.inf, math.inf)
    pts = [(s, b) for s, b in pts if lo <= s <= hi and b > 0]
    if len(pts) < 2:
        raise ValueError("need at least two points with nonzero BER inside the window")
    x = np.array([s / 10.0 for s, _ in pts])
    y = np.log10([b for _, b in pts])
    slope = np.polyfit(x, y, 1)[0]
    return float(-slope)


def snr_at_ber(curve, target: float) -> float:
    """SNR (dB) where the curve crosses ``target``, log-linear interpolation."""
    pts = sorted((p.snr_db, p.ber) for p in curve)
    for (s0, b0), (s1, b1) in zip(pts, pts[1:]):
        if b0 >= target >= b1 and b0 > 0 and b1 > 0 and b0 != b1:
            t = (math.log10(b0) - math.log10(target)) / (math.log10(b0) - math.log10(b1))
            return s0 + t * (s1 - s0)
    raise ValueError(f"curve does not cross BER {target}")


# -- output -------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(curve: Sequence[BerPoint], path: str, seed: int, key: Optional[str] = None) -> None:
    fields = ([key] if key else []) + CSV_FIELDS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for p in curve:
            lead = [_fmt(getattr(p, key))] if key else []
            rows = [(str(u + 1), b, e) for u, (b, e) in enumerate(zip(p.user_bits, p.user_errors))]
            rows.append(("all", p.bits, p.bit_errors))
            for user, bits, errs in rows:
                w.writerow(lead + [_fmt(p.snr_db), user, bits, errs,
                                   _fmt(errs / bits if bits else float("nan")), p.frames, seed])


def write_metadata(config: SimConfig, curve: Sequence[BerPoint], csv_path: str,
                   extra: Optional[dict] = None) -> str:
    meta = {
        "config": config.to_dict(),
        "stopping": {
            "frames_per_point": config.frames,
            "early_stop_errors": config.early_stop_errors,
            "points": [{"snr_db": p.snr_db, "delta_tau": p.delta_tau, "frames": p.frames,
                        "stopped_early": p.stopped_early, "std_error": p.std_error}
                       for p in curve],
        },
    }
    if extra:
        meta.update(extra)
    path = os.path.splitext(csv_path)[0] + ".meta.json"
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=str)
    return path
