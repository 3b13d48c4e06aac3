"""
Framing for ts3codec.
Converts between waveforms and the non-overlapping F x N frame matrix the codec operates on.
"""

from dataclasses import dataclass

import numpy as np
import torch
from einops import rearrange

from .errors import DataError, ShapeError

SAMPLE_RATE = 16000


@dataclass
class Waveform:
    """Mono audio at the codec sample rate, amplitudes in [-1, 1]."""
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise ShapeError(f"Waveform must be one-dimensional, got shape {self.samples.shape}")
        if not np.issubdtype(self.samples.dtype, np.floating):
            self.samples = self.samples.astype(np.float32)
        if self.sample_rate != SAMPLE_RATE:
            raise DataError(f"Waveform sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("Waveform contains non-finite samples")

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        """Length in seconds."""
        return len(self) / self.sample_rate


@dataclass
class FrameMatrix:
    """F x N matrix whose column n holds samples [n*F, (n+1)*F)."""
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] < 1:
            raise ShapeError(f"FrameMatrix needs shape F x N with N >= 1, got {self.data.shape}")

    @property
    def frame_size(self) -> int:
        return int(self.data.shape[0])

    @property
    def num_frames(self) -> int:
        return int(self.data.shape[1])


def padded_length(length: int, frame_size: int) -> int:
    """Smallest multiple of frame_size that is >= length (one frame for empty input)."""
    if frame_size <= 0:
        raise ShapeError(f"frame_size must be positive, got {frame_size}")
    frames = max(1, -(-length // frame_size))
    return frames * frame_size


def pad_to_multiple(wave: Waveform, frame_size: int) -> Waveform:
    """
    Zero-pad a waveform at the end to a whole number of frames.

    Args:
        wave: Input waveform
        frame_size: Samples per frame

    Returns:
        New waveform whose length is the smallest multiple of frame_size >= len(wave);
        an empty waveform becomes one frame of zeros.
    """
    target = padded_length(len(wave), frame_size)
    if target == len(wave):
        return Waveform(wave.samples.copy(), wave.sample_rate)
    samples = np.zeros(target, dtype=wave.samples.dtype)
    samples[:len(wave)] = wave.samples
    return Waveform(samples, wave.sample_rate)


def frame(wave: Waveform, frame_size: int) -> FrameMatrix:
    """Reshape a padded waveform into an F x N frame matrix."""
    if frame_size <= 0:
        raise ShapeError(f"frame_size must be positive, got {frame_size}")
    length = len(wave)
    if length == 0 or length % frame_size != 0:
        needed = padded_length(length, frame_size) - length
        raise ShapeError(
            f"Waveform length {length} is not a positive multiple of frame size {frame_size}; "
            f"pad with {needed} samples first"
        )
    return FrameMatrix(wave.samples.reshape(length // frame_size, frame_size).T.copy())


def unframe(frames: FrameMatrix) -> Waveform:
    """Inverse of frame: concatenate columns in time order."""
    return Waveform(frames.data.T.reshape(-1).copy())


def frame_rate(frame_size: int, sample_rate: int = SAMPLE_RATE) -> float:
    """Frames per second for a frame size."""
    return sample_rate / frame_size


def to_frames(batch: torch.Tensor, frame_size: int) -> torch.Tensor:
    """Batched framing: (B, T) -> (B, N, F), same sample layout as frame()."""
    if batch.shape[-1] % frame_size != 0:
        raise ShapeError(f"Batch length {batch.shape[-1]} is not a multiple of frame size {frame_size}")
    return rearrange(batch, "b (n f) -> b n f", f=frame_size)


def from_frames(frames: torch.Tensor) -> torch.Tensor:
    """Batched unframing: (B, N, F) -> (B, N*F)."""
    return rearrange(frames, "b n f -> b (n f)")
