"""
Codec model for ts3codec.
Linear stem encoder, sliding-window transformer, factorized single-codebook VQ,
transformer decoder and linear stem decoder, plus the named configurations.
"""

import math
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError, ShapeError, TokenError
from .framing import (
    SAMPLE_RATE, FrameMatrix, Waveform, from_frames, pad_to_multiple, padded_length, to_frames,
)
from .xformer import TransformerConfig, TransformerStack

# Elements of the query-entry difference tensor held at once during nearest-neighbour search.
_SEARCH_BUDGET = 1 << 24


@dataclass
class CodecConfig:
    """Full architecture description of a codec."""
    config_id: str = "custom"
    frame_size: int = 320
    encoder_mid_dim: int = 768
    encoder_out_dim: int = 1024
    decoder_in_dim: int = 1024
    decoder_mid_dim: int = 768
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    codebook_size: int = 65536
    codebook_dim: int = 8
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if isinstance(self.transformer, dict):
            self.transformer = TransformerConfig.from_dict(self.transformer)
        self.validate()

    def validate(self):
        """Raise ConfigError on inconsistent fields."""
        for name in ("frame_size", "encoder_mid_dim", "encoder_out_dim", "decoder_in_dim",
                     "decoder_mid_dim", "codebook_size", "codebook_dim"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"codec.{name} must be a positive integer, got {value!r}")
        if self.codebook_size < 2:
            raise ConfigError(f"codec.codebook_size must be at least 2, got {self.codebook_size}")
        if self.sample_rate != SAMPLE_RATE:
            raise ConfigError(f"codec.sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        self.transformer.validate()

    @property
    def embed_dim(self) -> int:
        return self.transformer.embed_dim

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.frame_size

    @property
    def bits_per_token(self) -> int:
        return bits_for(self.codebook_size)

    @property
    def stem_shapes(self) -> Dict[str, Tuple[int, int]]:
        """The E-1, E-2, D-1 and D-2 linear shapes."""
        return {
            "E-1": (self.frame_size, self.encoder_mid_dim),
            "E-2": (self.encoder_mid_dim, self.encoder_out_dim),
            "D-1": (self.decoder_in_dim, self.decoder_mid_dim),
            "D-2": (self.decoder_mid_dim, self.frame_size),
        }

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['transformer'] = self.transformer.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'CodecConfig':
        """Build a config from a dict; a preset config_id supplies defaults for missing fields."""
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        for key in data:
            if key not in known:
                raise ConfigError(f"Unknown codec field: {key}")
        config_id = data.get('config_id', "custom")
        if config_id not in NAMED_CONFIGS:
            return cls(**data)
        preset = named_config(config_id).to_dict()
        transformer = dict(preset['transformer'])
        transformer.update(data.pop('transformer', None) or {})
        merged = dict(preset)
        merged.update(data)
        merged['transformer'] = transformer
        if merged != preset:
            merged['config_id'] = "custom"
        return cls(**merged)


def bits_for(codebook_size: int) -> int:
    """ceil(log2(codebook_size)), at least 1."""
    return max(1, (codebook_size - 1).bit_length())


def _full_scale_config(config_id: str, frame_size: int, mid: int, layers: int, ffn: int,
                  window: int, codebook_size: int) -> CodecConfig:
    return CodecConfig(
        config_id=config_id,
        frame_size=frame_size,
        encoder_mid_dim=mid,
        encoder_out_dim=1024,
        decoder_in_dim=1024,
        decoder_mid_dim=mid,
        transformer=TransformerConfig(num_layers=layers, embed_dim=1024, num_heads=16,
                                      ffn_dim=ffn, window=window),
        codebook_size=codebook_size,
        codebook_dim=8,
    )


NAMED_CONFIGS = {
    "X1": lambda: _full_scale_config("X1", 320, 768, 8, 4096, 32, 65536),
    "X2": lambda: _full_scale_config("X2", 320, 768, 8, 4096, 32, 131072),
    "X3": lambda: _full_scale_config("X3", 400, 1024, 8, 4096, 16, 65536),
    "X4": lambda: _full_scale_config("X4", 400, 1024, 8, 4096, 16, 131072),
    "X5": lambda: _full_scale_config("X5", 400, 1024, 10, 2048, 16, 65536),
    "tiny": lambda: CodecConfig(
        config_id="tiny",
        frame_size=320,
        encoder_mid_dim=256,
        encoder_out_dim=64,
        decoder_in_dim=64,
        decoder_mid_dim=256,
        transformer=TransformerConfig(num_layers=2, embed_dim=64, num_heads=4, ffn_dim=256, window=16),
        codebook_size=1024,
        codebook_dim=8,
    ),
}


def named_config(config_id: str) -> CodecConfig:
    """Return the preset configuration for an id (X1..X5 or tiny)."""
    try:
        return NAMED_CONFIGS[config_id]()
    except KeyError:
        valid = ", ".join(NAMED_CONFIGS)
        raise ConfigError(f"Unknown config id {config_id!r}; valid ids: {valid}") from None


@dataclass
class TokenSequence:
    """Quantizer output for one utterance."""
    ids: np.ndarray
    frame_rate: float
    original_length: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def validate(self, codebook_size: int, frame_size: Optional[int] = None):
        """Check id range and, when frame_size is given, the length invariant."""
        bad = np.flatnonzero((self.ids < 0) | (self.ids >= codebook_size))
        if bad.size:
            position = int(bad[0])
            raise TokenError(
                f"Token {int(self.ids[position])} at position {position} is outside codebook of size {codebook_size}"
            )
        if frame_size is not None:
            expected = padded_length(self.original_length, frame_size) // frame_size
            if len(self) != expected:
                raise TokenError(
                    f"{len(self)} tokens cannot describe {self.original_length} samples "
                    f"(expected {expected} at frame size {frame_size})"
                )


@dataclass
class QuantizerOutput:
    """Per-frame quantization results; low-dimensional vectors are codebook_dim wide."""
    ids: torch.Tensor
    pre_quant: torch.Tensor
    post_quant: torch.Tensor
    quantized: torch.Tensor


@dataclass
class CodecOutput:
    """Training-path output of the codec."""
    reconstruction: torch.Tensor
    pre_quant: torch.Tensor
    post_quant: torch.Tensor
    ids: torch.Tensor


class Codebook(nn.Module):
    """Codebook entries plus squared-Euclidean nearest-neighbour search."""

    def __init__(self, codebook_size: int, codebook_dim: int):
        super().__init__()
        bound = 1.0 / math.sqrt(codebook_dim)
        self.embeddings = nn.Parameter(torch.empty(codebook_size, codebook_dim).uniform_(-bound, bound))

    @property
    def size(self) -> int:
        return int(self.embeddings.shape[0])

    def nearest(self, vectors: torch.Tensor) -> torch.Tensor:
        """Index of the closest entry for each row of (..., codebook_dim); ties go to the lowest index."""
        embeddings = self.embeddings.detach()
        flat = vectors.detach().reshape(-1, embeddings.shape[1])
        rows = max(1, _SEARCH_BUDGET // (self.size * embeddings.shape[1]))
        ids = []
        for start in range(0, flat.shape[0], rows):
            chunk = flat[start:start + rows]
            # direct differences keep exact ties exact
            distances = (chunk[:, None, :] - embeddings[None]).pow(2).sum(-1)
            ids.append(distances.argmin(dim=1))
        if not ids:
            return torch.zeros(vectors.shape[:-1], dtype=torch.long, device=vectors.device)
        return torch.cat(ids).reshape(vectors.shape[:-1])

    def lookup(self, ids: torch.Tensor) -> torch.Tensor:
        return nn.functional.embedding(ids, self.embeddings)


def quantize(codebook: Codebook, down_proj: nn.Linear, latent: torch.Tensor) -> Tuple[int, torch.Tensor]:
    """
    Quantize a single D-dimensional latent.

    Args:
        codebook: Codebook to search
        down_proj: Learned D -> codebook_dim projection
        latent: D-vector

    Returns:
        Tuple of (token id, codebook entry in the low-dimensional space)

    Raises:
        DataError: If the latent has non-finite values
    """
    if not torch.all(torch.isfinite(latent)):
        raise DataError("Cannot quantize a latent with non-finite values")
    low = down_proj(latent.reshape(1, -1))
    index = codebook.nearest(low)
    return int(index[0]), codebook.lookup(index)[0]


class FactorizedQuantizer(nn.Module):
    """Single-codebook VQ performed in a learned low-dimensional projection."""

    def __init__(self, embed_dim: int, codebook_size: int, codebook_dim: int):
        super().__init__()
        self.down_proj = nn.Linear(embed_dim, codebook_dim)
        self.codebook = Codebook(codebook_size, codebook_dim)
        self.up_proj = nn.Linear(codebook_dim, embed_dim)

    def forward(self, latents: torch.Tensor) -> QuantizerOutput:
        """Quantize (B, N, D) latents; the returned `quantized` carries straight-through gradients."""
        if not torch.all(torch.isfinite(latents)):
            raise DataError("Encoder produced non-finite latents")
        low = self.down_proj(latents)
        ids = self.codebook.nearest(low)
        post = self.codebook.lookup(ids)
        straight_through = low + (post - low).detach()
        return QuantizerOutput(ids=ids, pre_quant=low, post_quant=post,
                               quantized=self.up_proj(straight_through))

    def dequantize(self, ids: torch.Tensor) -> torch.Tensor:
        return self.up_proj(self.codebook.lookup(ids))


class EncoderStem(nn.Module):
    """Frame -> embedding: bias-free linear, biased linear, optional connector; no activations."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.first = nn.Linear(cfg.frame_size, cfg.encoder_mid_dim, bias=False)
        self.second = nn.Linear(cfg.encoder_mid_dim, cfg.encoder_out_dim)
        self.connector = (nn.Linear(cfg.encoder_out_dim, cfg.embed_dim)
                          if cfg.encoder_out_dim != cfg.embed_dim else nn.Identity())

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.connector(self.second(self.first(frames)))


class DecoderStem(nn.Module):
    """Embedding -> frame: optional connector, biased linear, bias-free linear; no activations."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.connector = (nn.Linear(cfg.embed_dim, cfg.decoder_in_dim)
                          if cfg.decoder_in_dim != cfg.embed_dim else nn.Identity())
        self.first = nn.Linear(cfg.decoder_in_dim, cfg.decoder_mid_dim)
        self.second = nn.Linear(cfg.decoder_mid_dim, cfg.frame_size, bias=False)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        return self.second(self.first(self.connector(embeddings)))


class TS3Codec(nn.Module):
    """Transformer-only streaming codec."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder_stem = EncoderStem(cfg)
        self.encoder = TransformerStack(cfg.transformer)
        self.quantizer = FactorizedQuantizer(cfg.embed_dim, cfg.codebook_size, cfg.codebook_dim)
        self.decoder = TransformerStack(cfg.transformer)
        self.decoder_stem = DecoderStem(cfg)

    def _reference(self) -> torch.Tensor:
        return self.quantizer.codebook.embeddings

    def _as_tensor(self, array) -> torch.Tensor:
        ref = self._reference()
        return torch.as_tensor(np.asarray(array), dtype=ref.dtype, device=ref.device)

    def encode_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, N, F) frames -> (B, N, D) encoder latents."""
        if frames.shape[-1] != self.cfg.frame_size:
            raise ShapeError(f"Frames of size {frames.shape[-1]} do not match frame_size {self.cfg.frame_size}")
        return self.encoder(self.encoder_stem(frames))

    def synthesize(self, embeddings: torch.Tensor) -> torch.Tensor:
        """(B, N, D) decoder inputs -> (B, N, F) frames."""
        return self.decoder_stem(self.decoder(embeddings))

    def forward(self, waves: torch.Tensor) -> CodecOutput:
        """Training path over a (B, T) batch with T a multiple of frame_size."""
        latents = self.encode_frames(to_frames(waves, self.cfg.frame_size))
        q = self.quantizer(latents)
        reconstruction = from_frames(self.synthesize(q.quantized))
        return CodecOutput(reconstruction=reconstruction, pre_quant=q.pre_quant,
                           post_quant=q.post_quant, ids=q.ids)

    def encode(self, frames: FrameMatrix) -> torch.Tensor:
        """Encode an F x N frame matrix into D x N latents."""
        if frames.frame_size != self.cfg.frame_size:
            raise ShapeError(
                f"Frame matrix has frame size {frames.frame_size}, model expects {self.cfg.frame_size}"
            )
        batch = self._as_tensor(frames.data.T).unsqueeze(0)
        return self.encode_frames(batch).squeeze(0).T

    @torch.no_grad()
    def tokenize(self, wave: Waveform) -> TokenSequence:
        """Pad, frame, encode and quantize a waveform."""
        padded = pad_to_multiple(wave, self.cfg.frame_size)
        batch = to_frames(self._as_tensor(padded.samples).unsqueeze(0), self.cfg.frame_size)
        ids = self.quantizer(self.encode_frames(batch)).ids.squeeze(0)
        return TokenSequence(ids=ids.cpu().numpy(), frame_rate=self.cfg.frame_rate,
                             original_length=len(wave))

    def check_ids(self, ids: torch.Tensor):
        bad = torch.nonzero((ids < 0) | (ids >= self.cfg.codebook_size))
        if bad.numel():
            position = int(bad[0, -1])
            raise TokenError(
                f"Token id at position {position} is outside codebook of size {self.cfg.codebook_size}"
            )

    @torch.no_grad()
    def decode(self, tokens: TokenSequence) -> Waveform:
        """Look up, up-project, run the decoder and truncate to the original length."""
        tokens.validate(self.cfg.codebook_size)
        ids = torch.as_tensor(tokens.ids, dtype=torch.long, device=self._reference().device).unsqueeze(0)
        frames = self.synthesize(self.quantizer.dequantize(ids))
        samples = from_frames(frames).squeeze(0).cpu().numpy()
        return Waveform(samples[:tokens.original_length])


def param_count(cfg: CodecConfig) -> int:
    """Exact number of learnable scalars, counted on a meta-device model (no memory is allocated)."""
    with torch.device("meta"):
        model = TS3Codec(cfg)
    return sum(p.numel() for p in model.parameters())


def param_breakdown(cfg: CodecConfig) -> Dict[str, int]:
    """Learnable scalars per top-level component."""
    with torch.device("meta"):
        model = TS3Codec(cfg)
    return {name: sum(p.numel() for p in child.parameters()) for name, child in model.named_children()}

