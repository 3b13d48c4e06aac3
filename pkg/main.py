#!/usr/bin/env python3
"""
ts3codec - A transformer-only streaming speech codec for low-bitrate coding.
Main command-line entry point.
"""

import sys
import os

# Add the project root to the Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from cli import main


if __name__ == "__main__":
    sys.exit(main())
