"""
Analysis tools for ts3codec.
Complexity accounting (MACs, receptive field), mel cepstral distortion,
codebook usage statistics and the pluggable scorer registry.
"""

import logging
import math
from dataclasses import dataclass, field
from importlib.metadata import entry_points
from typing import Callable, Dict, Iterable, List, Optional

import librosa
import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .framing import Waveform, padded_length
from .model import CodecConfig, TokenSequence

logger = logging.getLogger(__name__)

MACS_CONVENTION = (
    "one MAC per scalar multiply in every matrix product; affine in->out over N frames = in*out*N; "
    "attention = 4*D^2*N + 2*D*sum_i min(i+1, W); FFN = 2*D*ffn*N; norms, softmax and activations excluded"
)
# Figures reported for the full-scale models under an unpublished counting convention.
REFERENCE_GMACS = {"X1": 7.6, "X2": 7.6, "X3": 6.2, "X4": 6.2}

MCD_CONSTANT = 10.0 * math.sqrt(2.0) / math.log(10.0)
MCD_N_MFCC = 13
MCD_N_FFT = 400
MCD_HOP = 160
MCD_N_MELS = 40

SCORER_ENTRY_POINT_GROUP = "ts3codec.scorers"


def linear_macs(in_features: int, out_features: int, frames: int) -> int:
    return in_features * out_features * frames


def attention_context(frames: int, window: int) -> int:
    """Total attended positions over `frames` causal rows with window W: sum_i min(i + 1, W)."""
    full = max(0, frames - window)
    ramp = min(frames, window)
    return ramp * (ramp + 1) // 2 + full * window


@dataclass
class MacsReport:
    """Per-component MAC counts for a fixed stretch of audio."""
    config_id: str
    seconds: float
    frames: int
    components: Dict[str, int]
    convention: str = MACS_CONVENTION
    reference_gmacs: Optional[float] = None

    @property
    def total(self) -> int:
        return sum(self.components.values())

    @property
    def gmacs(self) -> float:
        return self.total / 1e9

    def to_dict(self) -> Dict:
        return {
            "config_id": self.config_id,
            "seconds": self.seconds,
            "frames": self.frames,
            "components": dict(self.components),
            "total": self.total,
            "gmacs": self.gmacs,
            "convention": self.convention,
            "reference_gmacs": self.reference_gmacs,
        }


def _stack_macs(cfg: CodecConfig, frames: int) -> Dict[str, int]:
    t = cfg.transformer
    d = t.embed_dim
    attention = t.num_layers * (4 * d * d * frames + 2 * d * attention_context(frames, t.window))
    ffn = t.num_layers * 2 * d * t.ffn_dim * frames
    return {"attention": attention, "ffn": ffn}


def macs(cfg: CodecConfig, seconds: float = 1.0) -> MacsReport:
    """
    Closed-form MAC count for `seconds` of audio.

    Args:
        cfg: Codec configuration
        seconds: Audio duration; frames are counted after end padding

    Returns:
        MacsReport whose components sum to its total
    """
    if seconds <= 0:
        raise ConfigError(f"MACs need a positive duration, got {seconds}")
    frames = padded_length(int(round(seconds * cfg.sample_rate)), cfg.frame_size) // cfg.frame_size
    d = cfg.embed_dim
    encoder_stem = (linear_macs(cfg.frame_size, cfg.encoder_mid_dim, frames)
                    + linear_macs(cfg.encoder_mid_dim, cfg.encoder_out_dim, frames))
    if cfg.encoder_out_dim != d:
        encoder_stem += linear_macs(cfg.encoder_out_dim, d, frames)
    decoder_stem = (linear_macs(cfg.decoder_in_dim, cfg.decoder_mid_dim, frames)
                    + linear_macs(cfg.decoder_mid_dim, cfg.frame_size, frames))
    if cfg.decoder_in_dim != d:
        decoder_stem += linear_macs(d, cfg.decoder_in_dim, frames)
    stack = _stack_macs(cfg, frames)
    components = {
        "encoder_stem": encoder_stem,
        "encoder_attention": stack["attention"],
        "encoder_ffn": stack["ffn"],
        "vq_projections": 2 * linear_macs(d, cfg.codebook_dim, frames),
        "vq_search": linear_macs(cfg.codebook_dim, cfg.codebook_size, frames),
        "decoder_attention": stack["attention"],
        "decoder_ffn": stack["ffn"],
        "decoder_stem": decoder_stem,
    }
    return MacsReport(config_id=cfg.config_id, seconds=seconds, frames=frames, components=components,
                      reference_gmacs=REFERENCE_GMACS.get(cfg.config_id))


def receptive_field_frames(cfg: CodecConfig) -> int:
    """Past frames reaching one output frame of a single stack: num_layers * (window - 1) + 1."""
    return cfg.transformer.receptive_field


def window_sweep(cfg: CodecConfig, windows: Iterable[int]) -> List[Dict]:
    """MACs and receptive field of `cfg` with each candidate attention window."""
    rows = []
    for window in windows:
        data = cfg.to_dict()
        data["transformer"]["window"] = window
        data["config_id"] = "custom"
        candidate = CodecConfig.from_dict(data)
        frames = receptive_field_frames(candidate)
        rows.append({
            "window": window,
            "gmacs": macs(candidate).gmacs,
            "receptive_field_frames": frames,
            "receptive_field_ms": 1000.0 * frames * candidate.frame_size / candidate.sample_rate,
        })
    return rows


def mfcc(samples: np.ndarray, sample_rate: int) -> np.ndarray:
    """(13, frames) MFCCs with C0 removed; 25 ms window, 10 ms hop."""
    coefficients = librosa.feature.mfcc(y=np.asarray(samples, dtype=np.float64), sr=sample_rate,
                                        n_mfcc=MCD_N_MFCC + 1, n_fft=MCD_N_FFT, hop_length=MCD_HOP,
                                        n_mels=MCD_N_MELS)
    return coefficients[1:]


def mcd(x: Waveform, y: Waveform) -> float:
    """
    Mel cepstral distortion in dB between two aligned waveforms.

    Frame-wise Euclidean distance over MFCCs 1..13, scaled by 10*sqrt(2)/ln(10)
    and averaged over frames.
    """
    if len(x) != len(y):
        raise ShapeError(f"MCD needs equal lengths, got {len(x)} and {len(y)}")
    if x.sample_rate != y.sample_rate:
        raise DataError(f"MCD needs equal sample rates, got {x.sample_rate} and {y.sample_rate}")
    difference = mfcc(x.samples, x.sample_rate) - mfcc(y.samples, y.sample_rate)
    return float(MCD_CONSTANT * np.mean(np.sqrt(np.sum(difference ** 2, axis=0))))


@dataclass
class CodebookStats:
    utilization: float
    perplexity: float
    distinct: int = 0
    counts: np.ndarray = field(default=None, repr=False)


def codebook_stats(tokens: TokenSequence, codebook_size: int) -> CodebookStats:
    """Fraction of entries used and exp(entropy) of the empirical id distribution."""
    if len(tokens) == 0:
        raise DataError("Codebook statistics need at least one token")
    tokens.validate(codebook_size)
    counts = np.bincount(tokens.ids, minlength=codebook_size)
    probabilities = counts[counts > 0] / len(tokens)
    entropy = float(-np.sum(probabilities * np.log(probabilities)))
    distinct = int(np.count_nonzero(counts))
    return CodebookStats(utilization=distinct / codebook_size, perplexity=math.exp(entropy),
                         distinct=distinct, counts=counts)


Scorer = Callable[[Waveform, Waveform], float]
_scorers: Dict[str, Scorer] = {}
_entry_points_loaded = False


def register_scorer(name: str, scorer: Optional[Scorer] = None):
    """
    Register a reference-vs-decoded metric under `name`.

    Usable directly or as a decorator. External packages can also expose scorers
    through the `ts3codec.scorers` entry-point group.
    """
    def decorator(fn: Scorer) -> Scorer:
        if name in _scorers and _scorers[name] is not fn:
            raise ConfigError(f"A scorer named {name!r} is already registered")
        _scorers[name] = fn
        return fn

    return decorator(scorer) if scorer is not None else decorator


def available_scorers() -> Dict[str, Scorer]:
    """Registered scorers, including entry-point plugins (loaded once)."""
    global _entry_points_loaded
    if not _entry_points_loaded:
        _entry_points_loaded = True
        for entry in entry_points(group=SCORER_ENTRY_POINT_GROUP):
            try:
                register_scorer(entry.name, entry.load())
            except Exception as e:
                logger.warning("Skipping scorer plugin %s: %s", entry.name, e)
    return dict(_scorers)


register_scorer("mcd", mcd)
