#!/usr/bin/env python3
"""Ranked score as a function of training-set size.

Sweeps the `train_users` subsample knob over a config (default: the
web-visit benchmark with the correlation predictor only) and prints one
line per training size. Example:

    python scripts/learning_curve.py --sizes 2000 8000 32711
"""

import argparse
import copy
import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from cflab import harness  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", type=Path, default=ROOT / "configs" / "msweb.json")
    parser.add_argument("--sizes", type=int, nargs="+", default=[2000, 5000, 10000, 32711])
    parser.add_argument("--algorithm", default="CR+",
                        help="name of the one algorithm from the config to sweep")
    parser.add_argument("--protocol", default="allbut1")
    args = parser.parse_args()

    doc = json.loads(args.config.read_text())
    doc["protocols"] = [args.protocol]
    doc["algorithms"] = [a for a in doc["algorithms"] if a["name"] == args.algorithm]
    if not doc["algorithms"]:
        print(f"algorithm {args.algorithm!r} not in config", file=sys.stderr)
        return 2
    print(f"{'train users':>12}  {'ranked score':>12}  cases")
    for size in args.sizes:
        run_doc = copy.deepcopy(doc)
        run_doc["dataset"]["train_users"] = size
        run_doc["output_dir"] = f"{doc.get('output_dir', 'out')}_curve_{size}"
        config = harness.parse_config(run_doc, args.config.parent)
        result = harness.run(config)
        report = next(iter(result.reports.values()))
        score = report.aggregate[args.algorithm]
        print(f"{size:>12}  {score:>12.2f}  {report.case_count}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
