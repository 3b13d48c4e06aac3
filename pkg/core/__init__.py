"""
Core module for ts3codec.
Contains the codec model, its training objectives and the streaming wire layer.
"""

__version__ = "1.0.0"

from .errors import (
    CodecError, ConfigError, DataError, ShapeError, TokenError, BitstreamError,
    CheckpointError, SessionError, TrainingDivergedError,
)
from .framing import Waveform, FrameMatrix, frame, unframe
from .model import CodecConfig, TokenSequence, TS3Codec, named_config, param_count
from .trainer import TrainerConfig, Trainer, lr_at_step
from .wire import BitstreamContainer, EncoderSession, DecoderSession, rates

__all__ = [
    'CodecError', 'ConfigError', 'DataError', 'ShapeError', 'TokenError', 'BitstreamError',
    'CheckpointError', 'SessionError', 'TrainingDivergedError',
    'Waveform', 'FrameMatrix', 'frame', 'unframe',
    'CodecConfig', 'TokenSequence', 'TS3Codec', 'named_config', 'param_count',
    'TrainerConfig', 'Trainer', 'lr_at_step',
    'BitstreamContainer', 'EncoderSession', 'DecoderSession', 'rates',
]
