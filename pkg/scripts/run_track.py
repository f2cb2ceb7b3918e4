"""Run the track experiment with its shipped config; extra CLI flags pass through."""

import sys
from pathlib import Path

from mempert.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "track.json"

if __name__ == "__main__":
    sys.exit(main(["track", "--config", str(CONFIG), *sys.argv[1:]]))
