#!/usr/bin/env python3
"""
WiFi CSI pose estimation command suite.
Usage:
  python wiflow.py synth --out data/synth --subjects 5
  python wiflow.py train --data data/synth --split random --config configs/desk.json --out runs/desk
  python wiflow.py inspect --config configs/default.json
"""
import sys
from pathlib import Path

# Project root
ROOT = Path(__file__).resolve().parent
sys.path.insert(0, str(ROOT))

from core.cli import run  # noqa: E402

if __name__ == "__main__":
    sys.exit(run())
