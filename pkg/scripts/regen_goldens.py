#!/usr/bin/env python3
"""Regenerate the golden stability report from the reference config.

Run after an intentional numerical change, then review the diff:
    python3 scripts/regen_goldens.py
"""

import shutil
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from entroflow import cli  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]


def main():
    with tempfile.TemporaryDirectory() as tmp:
        code = cli.main([
            "stability",
            "--config", str(ROOT / "configs" / "stability_reference.json"),
            "--out", tmp,
        ])
        if code != 0:
            raise SystemExit(f"stability run failed with exit code {code}")
        target = ROOT / "tests" / "data" / "golden_stability.json"
        target.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy(Path(tmp) / "stability_report.json", target)
        print(f"wrote {target}")


if __name__ == "__main__":
    main()
