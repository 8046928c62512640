#!/usr/bin/env python3
"""Run the fully offline demo benchmark twice and show cache determinism.

The first pass executes every task against the scripted backends; the second
pass must issue zero engine calls and reproduce the scorecard byte for byte.

Usage: python3 scripts/demo_offline_run.py [out_dir]
"""

import json
import sys
import tempfile
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO_ROOT / "src"))

from bell import pipeline  # noqa: E402
from bell.score import scorecard_markdown  # noqa: E402


def main() -> int:
    out_dir = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="bell-demo-")
    raw = json.loads((REPO_ROOT / "scripts" / "fixtures" / "demo_config.json").read_text())
    raw["dataset"]["path"] = str(REPO_ROOT / "scripts" / "fixtures" / "math_mini.jsonl")
    raw["out_dir"] = out_dir
    config = pipeline.config_from_dict(raw)

    print(f"running {len(config.techniques)} techniques on the mini fixture -> {out_dir}")
    first = pipeline.run(config)
    print(f"first pass: {first.engine_calls} engine calls")
    print(scorecard_markdown([first.scorecard]))

    scorecard_bytes = (first.out_dir / "scorecard.json").read_bytes()
    second = pipeline.run(config)
    identical = (second.out_dir / "scorecard.json").read_bytes() == scorecard_bytes
    print(f"second pass: {second.engine_calls} engine calls, byte-identical={identical}")
    if second.engine_calls != 0 or not identical:
        print("determinism check FAILED", file=sys.stderr)
        return 1
    print(f"artifacts: manifest.json, scorecard.{{json,csv,md}}, transcripts/ under {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
