"""
Audio input/output for ts3codec.
WAV reading with downmixing and polyphase resampling to 16 kHz, 16-bit PCM writing,
and raw s16le conversion for pipe streaming.
"""

import logging
from math import gcd

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from core.errors import DataError
from core.framing import SAMPLE_RATE, Waveform

logger = logging.getLogger(__name__)

PCM_SCALE = 32768.0
PCM_MAX = 1.0 - 1.0 / PCM_SCALE


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float32) / PCM_SCALE
    if data.dtype == np.int32:
        return (data.astype(np.float64) / 2.0 ** 31).astype(np.float32)
    if data.dtype == np.uint8:
        return (data.astype(np.float32) - 128.0) / 128.0
    if np.issubdtype(data.dtype, np.floating):
        return data.astype(np.float32)
    raise DataError(f"Unsupported WAV sample type {data.dtype}")


def resample(samples: np.ndarray, source_rate: int, target_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Polyphase resampling with the reduced up/down ratio."""
    if source_rate == target_rate:
        return samples
    divisor = gcd(source_rate, target_rate)
    return resample_poly(samples, target_rate // divisor, source_rate // divisor).astype(np.float32)


def load_wav(path: str) -> Waveform:
    """
    Read a WAV file as a mono 16 kHz Waveform.

    Args:
        path: WAV file path (8/16/32-bit integer or float)

    Returns:
        Waveform with float32 samples
    """
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as e:
        raise DataError(f"Cannot read WAV {path}: {e}") from e
    samples = _to_float(data)
    if samples.ndim == 2:
        logger.warning("%s has %d channels; downmixing to mono", path, samples.shape[1])
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise DataError(f"WAV {path} contains no samples")
    if rate != SAMPLE_RATE:
        logger.info("Resampling %s from %d Hz to %d Hz", path, rate, SAMPLE_RATE)
        samples = resample(samples, rate)
    return Waveform(samples)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, PCM_MAX)
    return np.round(clipped * PCM_SCALE).astype(np.int16)


def save_wav(path: str, wave: Waveform):
    """Write a Waveform as 16-bit PCM mono."""
    wavfile.write(path, wave.sample_rate, to_pcm16(wave.samples))


def pcm_bytes_to_float(data: bytes) -> np.ndarray:
    """Raw little-endian s16 mono bytes -> float32 samples. Length must be even."""
    if len(data) % 2:
        raise DataError(f"s16le stream has an odd byte count ({len(data)})")
    return np.frombuffer(data, dtype='<i2').astype(np.float32) / PCM_SCALE


def float_to_pcm_bytes(samples: np.ndarray) -> bytes:
    return to_pcm16(samples).astype('<i2').tobytes()
