"""Rebuild the committed synthetic fixtures and print their sha256.

A rebuilt fixture only replaces the committed one together with its pinned
digest in src/modules/synth_bench.py (FIXTURES[name].sha256).
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from src.modules.snapshot_cache import load_series, series_checksum  # noqa: E402
from src.modules.synth_bench import FIXTURE_ROOT, FIXTURES, write_fixture  # noqa: E402


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description="Regenerate the named synthetic fixtures.")
    parser.add_argument("names", nargs="*", help="Fixture names (default: all)")
    parser.add_argument("--root", default=str(FIXTURE_ROOT), help="Output directory (default: the committed fixtures/)")
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    names = args.names or sorted(FIXTURES)
    unknown = [name for name in names if name not in FIXTURES]
    if unknown:
        print(f"[ERROR] unknown fixtures: {', '.join(unknown)}")
        return 2

    for name in names:
        target = write_fixture(name, args.root)
        digest = series_checksum(load_series(target))
        status = "matches" if digest == FIXTURES[name].sha256 else "DIFFERS from"
        print(f"{name}: sha256={digest} ({status} the pinned digest) -> {target}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
