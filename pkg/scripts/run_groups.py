"""Run the groups experiment with its shipped config; extra CLI flags pass through."""

import sys
from pathlib import Path

from mempert.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "groups.json"

if __name__ == "__main__":
    sys.exit(main(["scatter", "--config", str(CONFIG), *sys.argv[1:]]))
