"""
Checkpoint archive for ts3codec.
Handles the self-describing binary checkpoint format and its integrity checks.

Layout:
    magic      4 bytes  b"TS3K"
    version    4 bytes  little-endian u32
    kind       1 byte   1 = inference, 2 = training
    digest    32 bytes  SHA-256 of the compressed body
    body       zlib( u32 header length | JSON header | torch.save payload )

The JSON header carries the codec configuration, a manifest of every stored
array (name, shape, dtype) and free-form metadata.
"""

import io
import json
import logging
import zlib
from typing import Any, Dict, Tuple

import torch
from cryptography.hazmat.primitives import hashes

from .errors import CheckpointError
from .model import CodecConfig, TS3Codec

logger = logging.getLogger(__name__)

KIND_INFERENCE = 1
KIND_TRAINING = 2
KIND_NAMES = {KIND_INFERENCE: "inference", KIND_TRAINING: "training"}


def array_manifest(state: Dict[str, Any], prefix: str = "") -> Dict[str, Dict[str, Any]]:
    """Flatten nested state dicts into {name: {shape, dtype}} for every tensor."""
    manifest = {}
    for key, value in state.items():
        name = f"{prefix}{key}"
        if isinstance(value, torch.Tensor):
            manifest[name] = {"shape": list(value.shape), "dtype": str(value.dtype).replace("torch.", "")}
        elif isinstance(value, dict):
            manifest.update(array_manifest(value, prefix=f"{name}."))
    return manifest


class CheckpointArchive:
    """Builds and parses checkpoint bytes."""

    MAGIC_NUMBER = b"TS3K"
    VERSION = 1
    DIGEST_SIZE = 32
    PREAMBLE_SIZE = 4 + 4 + 1 + DIGEST_SIZE

    def _digest(self, body: bytes) -> bytes:
        digest = hashes.Hash(hashes.SHA256())
        digest.update(body)
        return digest.finalize()

    def encode(self, kind: int, header: Dict[str, Any], payload: Dict[str, Any]) -> bytes:
        """
        Serialize a checkpoint.

        Args:
            kind: KIND_INFERENCE or KIND_TRAINING
            header: JSON-serializable header (config, metadata)
            payload: Tensors and nested state dicts for torch.save

        Returns:
            Checkpoint file bytes
        """
        if kind not in KIND_NAMES:
            raise CheckpointError(f"Unknown checkpoint kind: {kind}")
        header = dict(header)
        header["kind"] = KIND_NAMES[kind]
        header["arrays"] = array_manifest(payload)
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        buffer = io.BytesIO()
        torch.save(payload, buffer)
        body = zlib.compress(len(header_bytes).to_bytes(4, "little") + header_bytes + buffer.getvalue())
        return (
            self.MAGIC_NUMBER
            + self.VERSION.to_bytes(4, "little")
            + bytes([kind])
            + self._digest(body)
            + body
        )

    def read_header(self, data: bytes) -> Tuple[int, Dict[str, Any], bytes]:
        """Validate the preamble and return (kind, header, raw payload bytes)."""
        if len(data) < self.PREAMBLE_SIZE:
            raise CheckpointError("Invalid checkpoint: file too small")
        if data[:4] != self.MAGIC_NUMBER:
            raise CheckpointError("Invalid checkpoint: wrong magic number")
        version = int.from_bytes(data[4:8], "little")
        if version != self.VERSION:
            raise CheckpointError(f"Unsupported checkpoint version: {version} (expected {self.VERSION})")
        kind = data[8]
        if kind not in KIND_NAMES:
            raise CheckpointError(f"Invalid checkpoint: unknown kind {kind}")
        digest = data[9:self.PREAMBLE_SIZE]
        body = data[self.PREAMBLE_SIZE:]
        if self._digest(body) != digest:
            raise CheckpointError("Checkpoint corruption detected: digest mismatch")
        try:
            raw = zlib.decompress(body)
            header_length = int.from_bytes(raw[:4], "little")
            header = json.loads(raw[4:4 + header_length].decode("utf-8"))
        except (zlib.error, UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"Checkpoint corruption detected: {e}") from e
        return kind, header, raw[4 + header_length:]

    def decode(self, data: bytes, map_location: str = "cpu") -> Tuple[int, Dict[str, Any], Dict[str, Any]]:
        """Parse checkpoint bytes into (kind, header, payload)."""
        kind, header, raw_payload = self.read_header(data)
        try:
            payload = torch.load(io.BytesIO(raw_payload), map_location=map_location, weights_only=True)
        except Exception as e:
            raise CheckpointError(f"Checkpoint payload could not be loaded: {e}") from e
        return kind, header, payload


def read_checkpoint(path: str, map_location: str = "cpu") -> Tuple[int, Dict[str, Any], Dict[str, Any]]:
    """Read and validate a checkpoint file."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    return CheckpointArchive().decode(data, map_location=map_location)


def read_config(path: str) -> CodecConfig:
    """Codec configuration stored in a checkpoint, without loading weights."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    _, header, _ = CheckpointArchive().read_header(data)
    return CodecConfig.from_dict(header["codec"])


def save_inference(path: str, model: TS3Codec, metadata: Dict[str, Any] = None):
    """Write a generator-only checkpoint (no discriminators, no optimizer state)."""
    from utils.file_manager import write_atomic

    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    header = {"codec": model.cfg.to_dict(), "meta": metadata or {}}
    write_atomic(path, CheckpointArchive().encode(KIND_INFERENCE, header, {"generator": state}))
    logger.info("Wrote inference checkpoint %s", path)


def load_model(path: str, device: str = "cpu") -> TS3Codec:
    """Build a codec in eval mode from an inference or training checkpoint."""
    _, header, payload = read_checkpoint(path, map_location=device)
    cfg = CodecConfig.from_dict(header["codec"])
    try:
        state = payload["generator"]
        model = TS3Codec(cfg).to(next(iter(state.values())).dtype)
        model.load_state_dict(state)
    except (KeyError, StopIteration, RuntimeError) as e:
        raise CheckpointError(f"Checkpoint weights do not match config {cfg.config_id}: {e}") from e
    return model.to(device).eval()
