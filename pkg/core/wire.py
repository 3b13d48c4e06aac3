"""
Wire layer for ts3codec.
Fixed-width token packing, the .ts3c bitstream container, rate accounting and
stateful streaming encoder/decoder sessions.

Container layout (big-endian):
    magic 4s "TS3C" | version u8 | config_id u8 | sample_rate u32 | frame_size u16 |
    codebook_size u32 | original_length u64 | token_count u32 | packed payload
"""

import logging
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, NamedTuple, TextIO

import numpy as np
import torch

from .errors import BitstreamError, DataError, SessionError, TokenError
from .framing import SAMPLE_RATE, Waveform, padded_length
from .model import CodecConfig, TokenSequence, TS3Codec, bits_for, named_config, quantize

logger = logging.getLogger(__name__)

MAGIC = b"TS3C"
VERSION = 1
HEADER = struct.Struct(">4sBBIHIQI")
CONFIG_CODES = {"custom": 0, "X1": 1, "X2": 2, "X3": 3, "X4": 4, "X5": 5, "tiny": 6}
CONFIG_NAMES = {code: name for name, code in CONFIG_CODES.items()}


def pack_tokens(ids, bits_per_token: int) -> bytes:
    """
    Concatenate fixed-width token fields MSB-first; the last byte is zero-padded.

    Raises:
        TokenError: If an id does not fit in bits_per_token bits (message names the index)
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if not 1 <= bits_per_token <= 32:
        raise TokenError(f"bits_per_token must be in [1, 32], got {bits_per_token}")
    bad = np.flatnonzero((ids < 0) | (ids >= (1 << bits_per_token)))
    if bad.size:
        index = int(bad[0])
        raise TokenError(f"Token {int(ids[index])} at index {index} does not fit in {bits_per_token} bits")
    shifts = np.arange(bits_per_token - 1, -1, -1, dtype=np.int64)
    bits = ((ids[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="big").tobytes()


def unpack_tokens(payload: bytes, bits_per_token: int, count: int) -> np.ndarray:
    """
    Inverse of pack_tokens.

    The payload must be exactly ceil(count * bits_per_token / 8) bytes with zero padding bits.
    """
    if count < 0:
        raise BitstreamError(f"Token count must be non-negative, got {count}")
    total_bits = count * bits_per_token
    expected = (total_bits + 7) // 8
    if len(payload) < expected:
        raise BitstreamError(f"Payload truncated: {len(payload)} bytes, need {expected} for {count} tokens")
    if len(payload) > expected:
        raise BitstreamError(f"Payload has {len(payload) - expected} trailing bytes after {count} tokens")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="big")
    if bits[total_bits:].any():
        raise BitstreamError("Nonzero padding bits after the last token")
    fields = bits[:total_bits].reshape(count, bits_per_token).astype(np.int64)
    weights = np.int64(1) << np.arange(bits_per_token - 1, -1, -1, dtype=np.int64)
    return fields @ weights


class Rates(NamedTuple):
    frame_rate: float
    token_rate: float
    bitrate: float


def rates(cfg: CodecConfig) -> Rates:
    """Frame rate, token rate (one codebook) and fixed-width bitrate of a config."""
    frame_rate = cfg.sample_rate / cfg.frame_size
    return Rates(frame_rate, frame_rate, frame_rate * cfg.bits_per_token)


def config_code(cfg: CodecConfig) -> int:
    return CONFIG_CODES.get(cfg.config_id, 0)


@dataclass(eq=False)
class BitstreamContainer:
    """Header fields plus token ids of one encoded utterance."""
    config_id: int
    sample_rate: int
    frame_size: int
    codebook_size: int
    original_length: int
    ids: np.ndarray
    version: int = VERSION

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitstreamContainer):
            return NotImplemented
        return self._header_fields() == other._header_fields() and np.array_equal(self.ids, other.ids)

    def _header_fields(self) -> tuple:
        return (self.version, self.config_id, self.sample_rate, self.frame_size, self.codebook_size,
                self.original_length, self.token_count)

    @property
    def bits_per_token(self) -> int:
        return bits_for(self.codebook_size)

    @property
    def token_count(self) -> int:
        return int(self.ids.shape[0])

    @property
    def config_name(self) -> str:
        return CONFIG_NAMES.get(self.config_id, f"unknown({self.config_id})")

    @property
    def duration(self) -> float:
        return self.original_length / self.sample_rate

    @classmethod
    def from_tokens(cls, tokens: TokenSequence, cfg: CodecConfig) -> 'BitstreamContainer':
        tokens.validate(cfg.codebook_size, cfg.frame_size)
        return cls(config_id=config_code(cfg), sample_rate=cfg.sample_rate, frame_size=cfg.frame_size,
                   codebook_size=cfg.codebook_size, original_length=tokens.original_length, ids=tokens.ids)

    def to_tokens(self) -> TokenSequence:
        return TokenSequence(ids=self.ids, frame_rate=self.sample_rate / self.frame_size,
                             original_length=self.original_length)

    def payload(self) -> bytes:
        return pack_tokens(self.ids, self.bits_per_token)

    def to_bytes(self) -> bytes:
        header = HEADER.pack(MAGIC, self.version, self.config_id, self.sample_rate, self.frame_size,
                             self.codebook_size, self.original_length, self.token_count)
        return header + self.payload()

    @classmethod
    def from_bytes(cls, data: bytes) -> 'BitstreamContainer':
        """Parse and fully validate a serialized container."""
        if len(data) < HEADER.size:
            raise BitstreamError(f"Container too short: {len(data)} bytes, header needs {HEADER.size}")
        (magic, version, config_id, sample_rate, frame_size, codebook_size,
         original_length, token_count) = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BitstreamError(f"Bad container magic {magic!r}")
        if version != VERSION:
            raise BitstreamError(f"Unsupported container version {version} (expected {VERSION})")
        if config_id not in CONFIG_NAMES:
            raise BitstreamError(f"Unknown config id code {config_id}")
        if sample_rate != SAMPLE_RATE:
            raise BitstreamError(f"Unsupported sample rate {sample_rate}")
        if frame_size < 1 or codebook_size < 2:
            raise BitstreamError(f"Invalid frame_size {frame_size} or codebook_size {codebook_size}")
        if config_id:
            preset = named_config(CONFIG_NAMES[config_id])
            if (frame_size, codebook_size) != (preset.frame_size, preset.codebook_size):
                raise BitstreamError(
                    f"Config {preset.config_id} needs frame {preset.frame_size} and codebook "
                    f"{preset.codebook_size}, header declares {frame_size} and {codebook_size}"
                )
        expected_tokens = padded_length(original_length, frame_size) // frame_size
        if token_count != expected_tokens:
            raise BitstreamError(
                f"Header declares {token_count} tokens but {original_length} samples need {expected_tokens}"
            )
        ids = unpack_tokens(data[HEADER.size:], bits_for(codebook_size), token_count)
        bad = np.flatnonzero(ids >= codebook_size)
        if bad.size:
            raise BitstreamError(
                f"Token {int(ids[bad[0]])} at index {int(bad[0])} exceeds codebook size {codebook_size}"
            )
        return cls(config_id=config_id, sample_rate=sample_rate, frame_size=frame_size,
                   codebook_size=codebook_size, original_length=original_length, ids=ids, version=version)

    def check_compatible(self, cfg: CodecConfig):
        """Raise BitstreamError unless the model config can decode this container."""
        if (self.config_id != config_code(cfg) or self.frame_size != cfg.frame_size
                or self.codebook_size != cfg.codebook_size or self.sample_rate != cfg.sample_rate):
            raise BitstreamError(
                f"Container was encoded with config {self.config_name} "
                f"(frame {self.frame_size}, codebook {self.codebook_size}) but the model is "
                f"{cfg.config_id} (frame {cfg.frame_size}, codebook {cfg.codebook_size})"
            )


def write_container(path: str, container: BitstreamContainer):
    from utils.file_manager import write_atomic

    write_atomic(path, container.to_bytes())


def read_container(path: str) -> BitstreamContainer:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise BitstreamError(f"Cannot read container {path}: {e}") from e
    return BitstreamContainer.from_bytes(data)


def measured_bitrate(container: BitstreamContainer) -> float:
    """Payload bits per second of audio."""
    return len(container.payload()) * 8 / container.duration


def header_overhead_bps(container: BitstreamContainer) -> float:
    return HEADER.size * 8 / container.duration


class EncoderSession:
    """Incremental waveform -> token encoder for one stream."""

    def __init__(self, model: TS3Codec):
        self.model = model.eval()
        self.cfg = model.cfg
        self.state = model.encoder.init_state(1)
        self._remainder = np.zeros(0, dtype=np.float64)
        self.samples_consumed = 0
        self.tokens_emitted = 0
        self.flushed = False

    @property
    def algorithmic_latency_ms(self) -> float:
        return 1000.0 * self.cfg.frame_size / self.cfg.sample_rate

    @property
    def buffered_samples(self) -> int:
        return int(self._remainder.shape[0])

    @torch.no_grad()
    def _encode_frame(self, samples: np.ndarray) -> int:
        frame = self.model._as_tensor(samples).unsqueeze(0)
        self.state, latent = self.model.encoder.step(self.state, self.model.encoder_stem(frame))
        token, _ = quantize(self.model.quantizer.codebook, self.model.quantizer.down_proj, latent[0])
        return token

    def feed_samples(self, samples) -> np.ndarray:
        """Buffer samples and emit one token per completed frame."""
        if self.flushed:
            raise SessionError("Encoder session was already flushed")
        samples = np.asarray(samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise DataError("Cannot encode non-finite samples")
        buffer = np.concatenate([self._remainder, samples])
        frame_size = self.cfg.frame_size
        complete = buffer.shape[0] // frame_size
        ids = [self._encode_frame(buffer[i * frame_size:(i + 1) * frame_size]) for i in range(complete)]
        self._remainder = buffer[complete * frame_size:]
        self.samples_consumed += samples.shape[0]
        self.tokens_emitted += complete
        return np.asarray(ids, dtype=np.int64)

    def flush(self) -> np.ndarray:
        """Zero-pad a non-empty remainder into a final token and close the session."""
        if self.flushed:
            raise SessionError("Encoder session was already flushed")
        ids = []
        if self._remainder.shape[0] or self.samples_consumed == 0:
            # An empty stream still produces one all-zero frame, matching offline padding.
            frame = np.zeros(self.cfg.frame_size, dtype=np.float64)
            frame[:self._remainder.shape[0]] = self._remainder
            ids.append(self._encode_frame(frame))
            self._remainder = np.zeros(0, dtype=np.float64)
            self.tokens_emitted += 1
        self.flushed = True
        return np.asarray(ids, dtype=np.int64)


class DecoderSession:
    """Incremental token -> waveform decoder; every token yields exactly frame_size samples."""

    def __init__(self, model: TS3Codec):
        self.model = model.eval()
        self.cfg = model.cfg
        self.state = model.decoder.init_state(1)
        self.tokens_consumed = 0
        self.samples_emitted = 0
        self.flushed = False

    @property
    def algorithmic_latency_ms(self) -> float:
        return 1000.0 * self.cfg.frame_size / self.cfg.sample_rate

    @torch.no_grad()
    def feed_tokens(self, ids) -> np.ndarray:
        if self.flushed:
            raise SessionError("Decoder session was already flushed")
        ids = torch.as_tensor(np.asarray(ids, dtype=np.int64).reshape(-1),
                              device=self.model._reference().device)
        self.model.check_ids(ids)
        frames = []
        for token in ids:
            embedding = self.model.quantizer.dequantize(token.reshape(1))
            self.state, hidden = self.model.decoder.step(self.state, embedding)
            frames.append(self.model.decoder_stem(hidden)[0].cpu().numpy())
        self.tokens_consumed += len(frames)
        self.samples_emitted += len(frames) * self.cfg.frame_size
        if not frames:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate(frames)

    def flush(self) -> np.ndarray:
        """No samples are held back; closes the session."""
        if self.flushed:
            raise SessionError("Decoder session was already flushed")
        self.flushed = True
        return np.zeros(0, dtype=np.float32)


def encode_waveform(model: TS3Codec, wave: Waveform, stream: bool = False,
                    chunk_size: int = 1600) -> BitstreamContainer:
    """Encode a waveform into a container, offline or through an EncoderSession."""
    if not stream:
        return BitstreamContainer.from_tokens(model.tokenize(wave), model.cfg)
    session = EncoderSession(model)
    parts = [session.feed_samples(wave.samples[start:start + chunk_size])
             for start in range(0, len(wave), chunk_size)]
    parts.append(session.flush())
    tokens = TokenSequence(ids=np.concatenate(parts), frame_rate=model.cfg.frame_rate,
                           original_length=len(wave))
    return BitstreamContainer.from_tokens(tokens, model.cfg)


def decode_container(model: TS3Codec, container: BitstreamContainer, stream: bool = False) -> Waveform:
    """Decode a container to original_length samples."""
    container.check_compatible(model.cfg)
    if not stream:
        return model.decode(container.to_tokens())
    session = DecoderSession(model)
    samples = np.concatenate([session.feed_tokens(container.ids), session.flush()])
    return Waveform(samples[:container.original_length])


def stream_encode(model: TS3Codec, source: BinaryIO, sink: TextIO, chunk_bytes: int = 3200) -> int:
    """
    Read raw s16le mono PCM from `source`, write one decimal token id per line to `sink`.

    Returns:
        Number of tokens written
    """
    from utils.audio_io import pcm_bytes_to_float

    session = EncoderSession(model)
    pending = b""
    count = 0
    while True:
        chunk = source.read(chunk_bytes)
        if not chunk:
            break
        pending += chunk
        usable = len(pending) - len(pending) % 2
        for token in session.feed_samples(pcm_bytes_to_float(pending[:usable])):
            sink.write(f"{int(token)}\n")
            count += 1
        sink.flush()
        pending = pending[usable:]
    if pending:
        raise DataError("PCM stream ended in the middle of a sample")
    for token in session.flush():
        sink.write(f"{int(token)}\n")
        count += 1
    sink.flush()
    logger.info("Streamed %d tokens (%d samples)", count, session.samples_consumed)
    return count


def stream_decode(model: TS3Codec, source: Iterable[str], sink: BinaryIO) -> int:
    """
    Read one token id per line from `source`, write raw s16le mono PCM to `sink`.

    Returns:
        Number of samples written
    """
    from utils.audio_io import float_to_pcm_bytes

    session = DecoderSession(model)
    for line_number, line in enumerate(source, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            token = int(line)
        except ValueError:
            raise TokenError(f"Line {line_number}: {line!r} is not a token id") from None
        sink.write(float_to_pcm_bytes(session.feed_tokens([token])))
        sink.flush()
    session.flush()
    logger.info("Streamed %d samples from %d tokens", session.samples_emitted, session.tokens_consumed)
    return session.samples_emitted
