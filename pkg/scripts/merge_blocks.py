"""Concatenate block_*/energies.csv of a split simulation run into one CSV."""

import csv
import sys
from pathlib import Path


def merge(root: Path) -> Path:
    blocks = sorted(root.glob("block_*/energies.csv"))
    if not blocks:
        raise SystemExit(f"no block_*/energies.csv under {root}")
    out = root / "energies.csv"
    header = None
    expected = 0
    with open(out, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        for path in blocks:
            with open(path, newline="", encoding="ascii") as src:
                reader = csv.reader(src)
                head = next(reader)
                if header is None:
                    header = head
                    writer.writerow(header)
                elif head != header:
                    raise SystemExit(f"{path}: header differs from the first block")
                for row in reader:
                    if int(row[0]) != expected:
                        raise SystemExit(f"{path}: expected realization {expected}, found {row[0]}")
                    expected += 1
                    writer.writerow(row)
    print(f"{expected} realizations from {len(blocks)} blocks -> {out}")
    return out


if __name__ == "__main__":
    merge(Path(sys.argv[1] if len(sys.argv) > 1 else "results/md_reference"))
