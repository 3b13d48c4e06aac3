"""
Discriminators for ts3codec training.
Multi-period (waveform folded by period) and multi-scale STFT (complex spectrogram)
adversaries, each returning logits plus intermediate feature maps.
"""

import logging
from dataclasses import dataclass, field, asdict, fields
from typing import Any, Dict, List, Tuple

import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils.parametrizations import weight_norm
from einops import rearrange

from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdversaryConfig:
    """Discriminator hyperparameters."""
    periods: List[int] = field(default_factory=lambda: [2, 3, 5, 7, 11])
    mpd_channels: int = 32
    mpd_max_channels: int = 1024
    mpd_kernel_size: int = 5
    mpd_strides: List[int] = field(default_factory=lambda: [3, 3, 3, 3, 1])
    stft_windows: List[int] = field(default_factory=lambda: [2048, 1024, 512, 256, 128])
    stft_channels: int = 32
    negative_slope: float = 0.1

    def __post_init__(self):
        if not self.periods or any(p < 1 for p in self.periods):
            raise ConfigError(f"adversary.periods must be positive, got {self.periods}")
        if not self.stft_windows or any(w < 4 for w in self.stft_windows):
            raise ConfigError(f"adversary.stft_windows must be >= 4, got {self.stft_windows}")
        if self.mpd_kernel_size % 2 != 1:
            raise ConfigError(f"adversary.mpd_kernel_size must be odd, got {self.mpd_kernel_size}")
        if self.mpd_channels < 1 or self.stft_channels < 1 or self.mpd_max_channels < 1:
            raise ConfigError("adversary channel widths must be positive")

    @property
    def min_length(self) -> int:
        return max(self.stft_windows)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AdversaryConfig':
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"Unknown adversary field: {key}")
        return cls(**data)

    @classmethod
    def tiny(cls) -> 'AdversaryConfig':
        """Desk-scale widths and STFT resolutions."""
        return cls(mpd_channels=8, mpd_max_channels=64, stft_windows=[512, 256, 128], stft_channels=8)


@dataclass
class DiscriminatorOutput:
    """Logit map and feature maps (logit layer excluded) per sub-discriminator."""
    logits: List[torch.Tensor]
    features: List[List[torch.Tensor]]

    def __add__(self, other: 'DiscriminatorOutput') -> 'DiscriminatorOutput':
        return DiscriminatorOutput(self.logits + other.logits, self.features + other.features)


def fold_period(x: torch.Tensor, period: int) -> torch.Tensor:
    """(B, T) or (T,) -> (B, 1, ceil(T/period), period), zero-padding the tail."""
    if x.dim() == 1:
        x = x.unsqueeze(0)
    length = x.shape[-1]
    remainder = length % period
    if remainder:
        x = F.pad(x, (0, period - remainder))
    return rearrange(x, "b (t p) -> b 1 t p", p=period)


class PeriodDiscriminator(nn.Module):
    """Strided 2-D convolution stack over the period-folded waveform."""

    def __init__(self, period: int, cfg: AdversaryConfig):
        super().__init__()
        self.period = period
        kernel = cfg.mpd_kernel_size
        self.convs = nn.ModuleList()
        in_channels, out_channels = 1, cfg.mpd_channels
        for stride in cfg.mpd_strides:
            self.convs.append(weight_norm(nn.Conv2d(
                in_channels, out_channels, (kernel, 1), (stride, 1), padding=((kernel - 1) // 2, 0)
            )))
            in_channels = out_channels
            out_channels = min(out_channels * 4, cfg.mpd_max_channels)
        self.output_conv = weight_norm(nn.Conv2d(in_channels, 1, (3, 1), 1, padding=(1, 0)))
        self.activation = nn.LeakyReLU(cfg.negative_slope)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        h = fold_period(x, self.period)
        features = []
        for conv in self.convs:
            h = self.activation(conv(h))
            features.append(h)
        return self.output_conv(h), features


class MultiPeriodDiscriminator(nn.Module):
    """One PeriodDiscriminator per configured period."""

    def __init__(self, cfg: AdversaryConfig):
        super().__init__()
        self.discriminators = nn.ModuleList([PeriodDiscriminator(p, cfg) for p in cfg.periods])

    def forward(self, wave: torch.Tensor) -> DiscriminatorOutput:
        logits, features = [], []
        for disc in self.discriminators:
            logit, feats = disc(wave)
            logits.append(logit)
            features.append(feats)
        return DiscriminatorOutput(logits, features)


class STFTDiscriminator(nn.Module):
    """2-D convolution stack over the real/imaginary channels of one STFT resolution."""

    def __init__(self, window: int, cfg: AdversaryConfig):
        super().__init__()
        self.window = window
        self.hop = window // 4
        self.register_buffer("hann", torch.hann_window(window, periodic=False), persistent=False)
        channels = cfg.stft_channels

        def conv(cin, cout, kernel, stride=(1, 1), dilation=(1, 1)):
            padding = ((kernel[0] - 1) * dilation[0] // 2, (kernel[1] - 1) * dilation[1] // 2)
            return weight_norm(nn.Conv2d(cin, cout, kernel, stride, padding, dilation))

        self.convs = nn.ModuleList([
            conv(2, channels, (3, 9)),
            conv(channels, channels, (3, 9), stride=(1, 2), dilation=(1, 1)),
            conv(channels, channels, (3, 9), stride=(1, 2), dilation=(2, 1)),
            conv(channels, channels, (3, 9), stride=(1, 2), dilation=(4, 1)),
            conv(channels, channels, (3, 3)),
        ])
        self.output_conv = conv(channels, 1, (3, 3))
        self.activation = nn.LeakyReLU(cfg.negative_slope)

    def spectrogram(self, wave: torch.Tensor) -> torch.Tensor:
        """(B, T) or (T,) -> (B, 2, frames, bins) real/imaginary channels."""
        if wave.dim() == 1:
            wave = wave.unsqueeze(0)
        spec = torch.stft(wave, n_fft=self.window, hop_length=self.hop, win_length=self.window,
                          window=self.hann.to(wave.dtype), normalized=True, center=True,
                          return_complex=True)
        spec = rearrange(spec, "b f t -> b 1 t f")
        return torch.cat([spec.real, spec.imag], dim=1)

    def forward(self, wave: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        h = self.spectrogram(wave)
        features = []
        for conv in self.convs:
            h = self.activation(conv(h))
            features.append(h)
        return self.output_conv(h), features


class MultiScaleSTFTDiscriminator(nn.Module):
    """One STFTDiscriminator per configured window size (hop = window / 4)."""

    def __init__(self, cfg: AdversaryConfig):
        super().__init__()
        self.min_length = cfg.min_length
        self.discriminators = nn.ModuleList([STFTDiscriminator(w, cfg) for w in cfg.stft_windows])

    def forward(self, wave: torch.Tensor) -> DiscriminatorOutput:
        if wave.shape[-1] < self.min_length:
            raise ShapeError(
                f"MS-STFT discriminator needs at least {self.min_length} samples, got {wave.shape[-1]}"
            )
        logits, features = [], []
        for disc in self.discriminators:
            logit, feats = disc(wave)
            logits.append(logit)
            features.append(feats)
        return DiscriminatorOutput(logits, features)


class Discriminators(nn.Module):
    """MPD and MS-STFT discriminators evaluated together."""

    def __init__(self, cfg: AdversaryConfig):
        super().__init__()
        self.cfg = cfg
        self.mpd = MultiPeriodDiscriminator(cfg)
        self.msstft = MultiScaleSTFTDiscriminator(cfg)
        logger.debug("Built %d period and %d STFT discriminators",
                     len(cfg.periods), len(cfg.stft_windows))

    def forward(self, wave: torch.Tensor) -> DiscriminatorOutput:
        return self.mpd(wave) + self.msstft(wave)
