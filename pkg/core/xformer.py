"""
Sliding-window causal transformer for ts3codec.
Shared by encoder and decoder; provides an offline full-sequence path and a
streaming one-frame step path that compute the same function.

A window of W frames means every frame attends to itself plus the W-1 frames
before it, so W=1 reduces to framewise processing.
"""

import math
from dataclasses import dataclass, field, asdict, fields
from typing import Any, Dict, List, Tuple

import torch
from torch import nn
from torch.nn import functional as F
from einops import rearrange

from .errors import ConfigError, ShapeError


@dataclass
class TransformerConfig:
    """Hyperparameters of one transformer stack."""
    num_layers: int = 8
    embed_dim: int = 1024
    num_heads: int = 16
    ffn_dim: int = 4096
    window: int = 32
    rope_base: float = 10000.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        """Raise ConfigError if the configuration is inconsistent."""
        for name in ("num_layers", "embed_dim", "num_heads", "ffn_dim", "window"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"transformer.{name} must be a positive integer, got {value!r}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"transformer.embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"transformer head dimension must be even for rotary encoding, got {self.head_dim}")
        if self.rope_base <= 0:
            raise ConfigError(f"transformer.rope_base must be positive, got {self.rope_base}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def receptive_field(self) -> int:
        """Frames of past input that can reach one output frame of the stack."""
        return self.num_layers * (self.window - 1) + 1

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TransformerConfig':
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"Unknown transformer field: {key}")
        return cls(**data)


@dataclass
class LayerState:
    """Rolling key/value caches of a stack, one entry per layer, plus the next frame index."""
    keys: List[torch.Tensor] = field(default_factory=list)
    values: List[torch.Tensor] = field(default_factory=list)
    position: int = 0
    signature: Tuple[int, int, int, int] = (0, 0, 0, 0)

    @property
    def cache_length(self) -> int:
        return int(self.keys[0].shape[2]) if self.keys else 0


def attention_mask(num_frames: int, window: int) -> torch.Tensor:
    """
    Boolean N x N mask of allowed attention pairs.

    Entry (i, j) is True iff max(0, i - W + 1) <= j <= i.
    """
    if num_frames < 1 or window < 1:
        raise ShapeError(f"attention_mask needs N >= 1 and W >= 1, got N={num_frames}, W={window}")
    rows = torch.arange(num_frames).unsqueeze(1)
    cols = torch.arange(num_frames).unsqueeze(0)
    return (cols <= rows) & (cols > rows - window)


def rotary_tables(positions: torch.Tensor, head_dim: int, base: float,
                  dtype: torch.dtype) -> Tuple[torch.Tensor, torch.Tensor]:
    """Cosine and sine tables of shape (len(positions), head_dim // 2) for absolute frame indices."""
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    angles = positions.to(torch.float64).unsqueeze(1) * inv_freq.unsqueeze(0)
    return angles.cos().to(dtype), angles.sin().to(dtype)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate (..., N, head_dim) by half-split pairs."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def _windowed_attention(q: torch.Tensor, key_windows: torch.Tensor, value_windows: torch.Tensor,
                        valid: torch.Tensor) -> torch.Tensor:
    # q: (B, H, N, d); windows: (B, H, N, W, d); valid: (N, W)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = torch.einsum("bhnd,bhnwd->bhnw", q, key_windows) * scale
    scores = scores.masked_fill(~valid, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return torch.einsum("bhnw,bhnwd->bhnd", weights, value_windows)


class TransformerLayer(nn.Module):
    """Pre-norm block: windowed rotary self-attention then a GELU feed-forward, each with a residual."""

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.attn_norm = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out_proj = nn.Linear(d, d)
        self.ffn_norm = nn.LayerNorm(d)
        self.ffn_in = nn.Linear(d, cfg.ffn_dim)
        self.activation = nn.GELU()
        self.ffn_out = nn.Linear(cfg.ffn_dim, d)

    def _project(self, x: torch.Tensor, start: int) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h = self.attn_norm(x)
        q, k, v = rearrange(self.qkv(h), "b n (three h d) -> three b h n d",
                            three=3, h=self.cfg.num_heads)
        positions = torch.arange(start, start + x.shape[1], device=x.device)
        cos, sin = rotary_tables(positions, self.cfg.head_dim, self.cfg.rope_base, x.dtype)
        cos, sin = cos.to(x.device), sin.to(x.device)
        return apply_rotary(q, cos, sin), apply_rotary(k, cos, sin), v

    def _finish(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        x = x + self.out_proj(rearrange(context, "b h n d -> b n (h d)"))
        return x + self.ffn_out(self.activation(self.ffn_in(self.ffn_norm(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Offline path over (B, N, D) starting at frame 0."""
        window = self.cfg.window
        num_frames = x.shape[1]
        q, k, v = self._project(x, 0)
        pad = (0, 0, window - 1, 0)
        key_windows = rearrange(F.pad(k, pad).unfold(2, window, 1), "b h n d w -> b h n w d")
        value_windows = rearrange(F.pad(v, pad).unfold(2, window, 1), "b h n d w -> b h n w d")
        offsets = torch.arange(window, device=x.device) - (window - 1)
        valid = (torch.arange(num_frames, device=x.device).unsqueeze(1) + offsets.unsqueeze(0)) >= 0
        return self._finish(x, _windowed_attention(q, key_windows, value_windows, valid))

    def step(self, x: torch.Tensor, key_cache: torch.Tensor, value_cache: torch.Tensor,
             position: int) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Streaming path for one frame (B, 1, D) given caches of shape (B, H, L, d), L < W."""
        window = self.cfg.window
        q, k, v = self._project(x, position)
        keys = torch.cat([key_cache, k], dim=2)
        values = torch.cat([value_cache, v], dim=2)
        filled = keys.shape[2]
        pad = (0, 0, window - filled, 0)
        key_windows = F.pad(keys, pad).unsqueeze(2)
        value_windows = F.pad(values, pad).unsqueeze(2)
        valid = (torch.arange(window, device=x.device) >= window - filled).unsqueeze(0)
        y = self._finish(x, _windowed_attention(q, key_windows, value_windows, valid))
        start = max(0, filled - (window - 1))
        return y, keys[:, :, start:], values[:, :, start:]


class TransformerStack(nn.Module):
    """A stack of TransformerLayer blocks operating on (B, N, D) embeddings."""

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList([TransformerLayer(cfg) for _ in range(cfg.num_layers)])

    @property
    def signature(self) -> Tuple[int, int, int, int]:
        return (self.cfg.num_layers, self.cfg.embed_dim, self.cfg.num_heads, self.cfg.window)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(
                f"Transformer input must be (B, N, {self.cfg.embed_dim}), got {tuple(x.shape)}"
            )
        for layer in self.layers:
            x = layer(x)
        return x

    def init_state(self, batch_size: int = 1) -> LayerState:
        """Empty caches for a new stream."""
        param = next(self.parameters())
        shape = (batch_size, self.cfg.num_heads, 0, self.cfg.head_dim)
        empty = [param.new_zeros(shape) for _ in self.layers]
        return LayerState(
            keys=empty,
            values=[t.clone() for t in empty],
            position=0,
            signature=self.signature,
        )

    def step(self, state: LayerState, frame_embedding: torch.Tensor) -> Tuple[LayerState, torch.Tensor]:
        """
        Advance the stream by one frame.

        Args:
            state: State from init_state() or a previous step() of this stack
            frame_embedding: (B, D) embedding of the next frame

        Returns:
            The successor state and the (B, D) output for this frame position.
        """
        if state.signature != self.signature:
            raise ConfigError(
                f"Stream state was built for stack {state.signature}, not {self.signature}"
            )
        if frame_embedding.dim() != 2 or frame_embedding.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(
                f"Frame embedding must be (B, {self.cfg.embed_dim}), got {tuple(frame_embedding.shape)}"
            )
        x = frame_embedding.unsqueeze(1)
        keys, values = [], []
        for layer, key_cache, value_cache in zip(self.layers, state.keys, state.values):
            x, key_cache, value_cache = layer.step(x, key_cache, value_cache, state.position)
            keys.append(key_cache)
            values.append(value_cache)
        successor = LayerState(keys=keys, values=values, position=state.position + 1,
                               signature=state.signature)
        return successor, x.squeeze(1)


def forward_offline(stack: TransformerStack, inputs: torch.Tensor) -> torch.Tensor:
    """Run a stack over a D x N embedding matrix (single sequence) and return D x N."""
    if inputs.dim() != 2 or inputs.shape[0] != stack.cfg.embed_dim:
        raise ShapeError(f"Expected a {stack.cfg.embed_dim} x N matrix, got {tuple(inputs.shape)}")
    return stack(inputs.T.unsqueeze(0)).squeeze(0).T
