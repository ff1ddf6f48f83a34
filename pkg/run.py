#!/usr/bin/env python3
"""
Quantized KV Cache - Startup Script
Runs the benchmark and analysis CLI (see `python run.py --help`).
"""

import os
import sys

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from bench_cli import main

if __name__ == '__main__':
    main()
