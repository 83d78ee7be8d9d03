"""Launcher for the celltraffic pipeline.

Loads .env (when present) so CELLTRAFFIC_* settings reach the run config,
then hands the command line to src.cli.
"""
from __future__ import annotations

import sys
from pathlib import Path

from dotenv import load_dotenv

ROOT = Path(__file__).resolve().parent
ENV_PATH = ROOT / ".env"


def main() -> int:
    if ENV_PATH.exists():
        load_dotenv(dotenv_path=ENV_PATH)
    else:
        print("[INFO] no .env found; using defaults and CELLTRAFFIC_* environment only.", file=sys.stderr)

    from src.cli import main as cli_main

    return cli_main(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
