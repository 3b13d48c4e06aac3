"""
Command-line module for ts3codec.
Contains the argument parser and subcommand implementations.
"""

from .commands import build_parser, main

__all__ = ['build_parser', 'main']
