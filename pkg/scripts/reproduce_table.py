#!/usr/bin/env python3
"""Recompute the model-score column of the published reference scorecard.

Feeds scripts/fixtures/published_scores.csv through the score command and
prints the recomputed table; rows whose provided score disagrees with the
computed one beyond 0.02 are reported as anomalies on stderr (one row is
expected to be).

Usage: python3 scripts/reproduce_table.py
"""

import sys
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO_ROOT / "src"))

from bell import cli  # noqa: E402


def main() -> int:
    table = REPO_ROOT / "scripts" / "fixtures" / "published_scores.csv"
    return cli.main(["score", str(table)])


if __name__ == "__main__":
    sys.exit(main())
