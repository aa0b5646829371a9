#!/usr/bin/env python3
"""
Lightweight validator for target CSV files (id,task,value_mm).
Runs the dataset loader and reports what it would accept, reject or refuse;
exits non-zero on failure.
"""

import sys
from pathlib import Path

from data_io import TASKS, load_targets_csv
from errors import DataFormatError


def validate(path: Path) -> int:
    path = Path(path)
    if not path.exists():
        print(f"❌ File not found: {path}")
        return 1

    try:
        frame, rejected = load_targets_csv(path)
    except DataFormatError as exc:
        print(f"❌ {exc}")
        print(f"❌ Validation failed for {path}")
        return 1

    for row in rejected:
        spec = TASKS[row["task"]]
        print(f"⚠️ Line {row['line']}: {row['value_mm']} mm outside {spec.name} range "
              f"[{spec.lo:.2f}, {spec.hi:.2f}]")

    rows = len(frame) + len(rejected)
    if rejected:
        print(f"⚠️ {len(rejected)} row(s) will be rejected at load time")
    for task, count in frame["task"].value_counts().sort_index().items():
        print(f"   {task}: {count} row(s)")
    print(f"✅ target validation passed ({rows} data row(s))")
    return 0


def main():
    path = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("targets.csv")
    raise SystemExit(validate(path))


if __name__ == "__main__":
    main()
