"""Build data/bcw.csv from the MASS `biopsy` table (Wisconsin breast cancer, 699 rows).

Columns V1..V9 are kept, the label is 1 for malignant; the 16 missing V6
values are filled with the column median.
"""
import argparse
import csv
import statistics
from pathlib import Path


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("source", help="biopsy.csv (R datasets export)")
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "bcw.csv"))
    args = ap.parse_args()

    with open(args.source, newline="") as fh:
        rows = list(csv.DictReader(fh))
    feats = [f"V{i}" for i in range(1, 10)]
    med = {f: statistics.median(float(r[f]) for r in rows if r[f] not in ("", "NA")) for f in feats}
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(feats + ["label"])
        for r in rows:
            vals = [float(r[f]) if r[f] not in ("", "NA") else med[f] for f in feats]
            w.writerow([f"{v:g}" for v in vals] + [1 if r["class"] == "malignant" else 0])
    print(f"wrote {len(rows)} rows to {args.out}")


if __name__ == "__main__":
    main()
