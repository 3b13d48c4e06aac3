"""
Utilities module for ts3codec.
Contains audio file helpers and run-directory file management.
"""

from .audio_io import load_wav, save_wav
from .file_manager import FileManager, load_config, write_atomic

__all__ = ['load_wav', 'save_wav', 'FileManager', 'load_config', 'write_atomic']
