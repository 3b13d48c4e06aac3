"""
Training objectives for ts3codec.
Multi-scale mel reconstruction, least-squares adversarial terms, feature matching,
codebook/commitment terms and their weighted combination.
"""

import math
from dataclasses import dataclass, asdict, fields
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import librosa
import torch
from torch import nn
from torch.nn import functional as F

from .errors import CodecError, ConfigError, ShapeError
from .framing import SAMPLE_RATE

# (n_fft, n_mels); hop is n_fft // 4.
DEFAULT_MEL_SCALES: Tuple[Tuple[int, int], ...] = (
    (64, 10), (128, 15), (256, 23), (512, 35), (1024, 53), (2048, 80),
)
LOG_EPS = 1e-5
GENERATOR_TERMS = ("mel", "gan_g", "feature", "vq", "commitment")
DISCRIMINATOR_TERMS = ("gan_d",)

Number = Union[float, torch.Tensor]


def vq_weight_for(codebook_size: int) -> float:
    """VQ loss weight proportional to codebook size: 8192 -> 4, 65536 -> 32, 131072 -> 64."""
    return codebook_size / 2048.0


@dataclass
class LossWeights:
    """Weights of the generator objective terms."""
    reconstruction: float = 15.0
    gan: float = 1.0
    feature: float = 1.0
    vq: float = 32.0
    commitment: float = 0.25

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"Loss weight {f.name} must be non-negative")

    @classmethod
    def for_codebook(cls, codebook_size: int, **overrides) -> 'LossWeights':
        return cls(vq=vq_weight_for(codebook_size), **overrides)

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class LossReport:
    """Scalar values of every objective term for one step, plus weighted totals."""
    mel: float
    gan_g: float
    gan_d: float
    feature: float
    vq: float
    commitment: float
    generator_total: float
    discriminator_total: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())

    def check_totals(self, weights: LossWeights, tolerance: float = 1e-9) -> bool:
        """True if the stored totals equal the weighted sums of the stored terms."""
        generator, discriminator = total_losses(self.to_dict(), weights)
        return (abs(generator - self.generator_total) <= tolerance * max(1.0, abs(generator))
                and abs(discriminator - self.discriminator_total) <= tolerance * max(1.0, abs(discriminator)))


class MultiScaleMelLoss(nn.Module):
    """Sum over scales of the L1 distance between log-mel spectrograms."""

    def __init__(self, scales: Sequence[Tuple[int, int]] = DEFAULT_MEL_SCALES,
                 sample_rate: int = SAMPLE_RATE):
        super().__init__()
        self.scales = [tuple(s) for s in scales]
        for n_fft, n_mels in self.scales:
            basis = librosa.filters.mel(sr=sample_rate, n_fft=n_fft, n_mels=n_mels,
                                        fmin=0.0, fmax=sample_rate / 2)
            self.register_buffer(f"mel_{n_fft}", torch.from_numpy(basis).float(), persistent=False)
            self.register_buffer(f"window_{n_fft}", torch.hann_window(n_fft), persistent=False)

    def log_mel(self, wave: torch.Tensor, n_fft: int) -> torch.Tensor:
        """(B, T) -> (B, n_mels, frames) natural-log mel magnitudes."""
        window = getattr(self, f"window_{n_fft}").to(wave.dtype)
        spec = torch.stft(wave, n_fft=n_fft, hop_length=n_fft // 4, win_length=n_fft, window=window,
                          center=True, pad_mode="constant", return_complex=True).abs()
        mel = torch.matmul(getattr(self, f"mel_{n_fft}").to(wave.dtype), spec)
        return torch.log(LOG_EPS + mel)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if x.shape != y.shape:
            raise ShapeError(f"Mel loss needs equal shapes, got {tuple(x.shape)} and {tuple(y.shape)}")
        if x.dim() == 1:
            x, y = x.unsqueeze(0), y.unsqueeze(0)
        total = x.new_zeros(())
        for n_fft, _ in self.scales:
            total = total + F.l1_loss(self.log_mel(x, n_fft), self.log_mel(y, n_fft))
        return total


_default_mel_loss: Optional[MultiScaleMelLoss] = None


def multiscale_mel_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Multi-scale mel L1 distance with the default scale set."""
    global _default_mel_loss
    if _default_mel_loss is None:
        _default_mel_loss = MultiScaleMelLoss()
    return _default_mel_loss.to(x.device)(x, y)


def _as_list(logits) -> List[torch.Tensor]:
    return list(logits) if isinstance(logits, (list, tuple)) else [logits]


def discriminator_adversarial_loss(real_logits, fake_logits) -> torch.Tensor:
    """mean((real - 1)^2) + mean(fake^2), averaged over sub-discriminators."""
    real_logits, fake_logits = _as_list(real_logits), _as_list(fake_logits)
    losses = [torch.mean((r - 1) ** 2) + torch.mean(f ** 2) for r, f in zip(real_logits, fake_logits)]
    return torch.stack(losses).mean()


def generator_adversarial_loss(fake_logits) -> torch.Tensor:
    """mean((fake - 1)^2), averaged over sub-discriminators."""
    return torch.stack([torch.mean((f - 1) ** 2) for f in _as_list(fake_logits)]).mean()


def lsgan_losses(real_logits, fake_logits) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Least-squares adversarial losses.

    Args:
        real_logits: Logit tensor or list of per-sub-discriminator logits for real audio
        fake_logits: Same for generated audio

    Returns:
        Tuple of (discriminator loss, generator loss)
    """
    return (discriminator_adversarial_loss(real_logits, fake_logits),
            generator_adversarial_loss(fake_logits))


def feature_matching_loss(real_features: List[List[torch.Tensor]],
                          fake_features: List[List[torch.Tensor]]) -> torch.Tensor:
    """L1 between feature maps, averaged over layers then sub-discriminators; real maps are constants."""
    if len(real_features) != len(fake_features):
        raise ShapeError(
            f"Feature sets cover {len(real_features)} and {len(fake_features)} sub-discriminators"
        )
    per_disc = []
    for i, (real_maps, fake_maps) in enumerate(zip(real_features, fake_features)):
        if len(real_maps) != len(fake_maps):
            raise ShapeError(f"Sub-discriminator {i} has {len(real_maps)} vs {len(fake_maps)} feature maps")
        per_layer = []
        for j, (real, fake) in enumerate(zip(real_maps, fake_maps)):
            if real.shape != fake.shape:
                raise ShapeError(
                    f"Feature map {j} of sub-discriminator {i}: {tuple(real.shape)} vs {tuple(fake.shape)}"
                )
            per_layer.append(F.l1_loss(fake, real.detach()))
        per_disc.append(torch.stack(per_layer).mean())
    return torch.stack(per_disc).mean()


def vq_losses(pre_quant: torch.Tensor, post_quant: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Codebook and commitment terms, both per-dimension mean L1.

    The codebook term only reaches the codebook (encoder side detached); the
    commitment term only reaches the encoder (codebook side detached).
    """
    if pre_quant.shape != post_quant.shape:
        raise ShapeError(f"VQ loss needs equal shapes, got {tuple(pre_quant.shape)} and {tuple(post_quant.shape)}")
    codebook_loss = F.l1_loss(post_quant, pre_quant.detach())
    commitment_loss = F.l1_loss(pre_quant, post_quant.detach())
    return codebook_loss, commitment_loss


def total_losses(terms: Mapping[str, Number], weights: LossWeights) -> Tuple[Number, Number]:
    """
    Weighted generator and discriminator totals.

    Args:
        terms: Mapping with mel, gan_g, feature, vq, commitment and gan_d
        weights: Loss weights

    Returns:
        Tuple of (generator total, discriminator total)
    """
    for name in GENERATOR_TERMS + DISCRIMINATOR_TERMS:
        if name not in terms:
            raise CodecError(f"Missing loss term: {name}")
    generator = (weights.reconstruction * terms["mel"]
                 + weights.gan * terms["gan_g"]
                 + weights.feature * terms["feature"]
                 + weights.vq * terms["vq"]
                 + weights.commitment * terms["commitment"])
    return generator, terms["gan_d"]
