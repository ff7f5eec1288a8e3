#!/usr/bin/env python3
"""Download the published anonymous web-visit dataset into data/.

The two log files (training and test) are fetched from the UCI repository
and validated by parsing them. Needs network access; if the machine is
offline, obtain `anonymous-msweb.data` and `anonymous-msweb.test` by other
means and place them in the data/ directory yourself.
"""

import sys
import urllib.request
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from cflab.votedata import load_msweb  # noqa: E402

BASE = "https://archive.ics.uci.edu/ml/machine-learning-databases/anonymous"
FILES = ("anonymous-msweb.data", "anonymous-msweb.test")
DATA_DIR = Path(__file__).resolve().parent.parent / "data"


def main() -> int:
    DATA_DIR.mkdir(exist_ok=True)
    for name in FILES:
        dest = DATA_DIR / name
        if dest.exists():
            print(f"{dest} already present")
            continue
        url = f"{BASE}/{name}"
        print(f"fetching {url}")
        try:
            with urllib.request.urlopen(url, timeout=60) as resp:
                dest.write_bytes(resp.read())
        except OSError as exc:
            print(f"download failed: {exc}", file=sys.stderr)
            print(
                "no network access? place the published files in data/ manually",
                file=sys.stderr,
            )
            return 1
    for name in FILES:
        db = load_msweb(DATA_DIR / name)
        print(f"{name}: {len(db.users)} users, {len(db.items)} items, {db.num_votes} votes")
    return 0


if __name__ == "__main__":
    sys.exit(main())
