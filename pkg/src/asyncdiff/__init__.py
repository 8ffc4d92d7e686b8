"""Asynchronous multi-user differential space-time coding simulator."""

from .channel import DelayProfile, ReceivedFrame, draw_channel, transmit_frame
from .decoders import IticDecoder, MmplDecoder, make_decoder
from .diffmod import encode_frame, encode_indices, initial_codewords
from .simkit import SimConfig, run_ber_point, sweep_delay, sweep_snr
from .stcodes import OstbcCodec, check_full_diversity, make_psk_constellation

__version__ = "0.1.0"

__all__ = [
    "DelayProfile", "ReceivedFrame", "draw_channel", "transmit_frame",
    "IticDecoder", "MmplDecoder", "make_decoder",
    "encode_frame", "encode_indices", "initial_codewords",
    "SimConfig", "run_ber_point", "sweep_delay", "sweep_snr",
    "OstbcCodec", "check_full_diversity", "make_psk_constellation",
]
