"""Packing benchmark: measured rotations, depth and time for RBA vs DA over (b, c).

    python scripts/bench.py --log-n 11 --sizes 4 8 16 32
"""
import argparse
import json

from mheglm.cli.main import cmd_bench


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--log-n", type=int, default=11)
    ap.add_argument("--sizes", type=int, nargs="+", default=[4, 8, 16, 32])
    ap.add_argument("--json", help="also write the raw rows here")
    args = ap.parse_args()

    rows = []
    print(f"{'b':>4} {'c':>4} {'pack':>4} {'rot':>5} {'formula':>7} {'depth':>5} {'ms':>8} {'err':>9}")
    for b in args.sizes:
        for c in args.sizes:
            for approach in ("rba", "da"):
                r = cmd_bench(c, b, approach, log_n=args.log_n, protocols=False)
                rows.append(r)
                print(f"{b:>4} {c:>4} {approach:>4} {r['measured'].get('rotate', 0):>5} "
                      f"{r['formula_rotations']:>7} {r['levels_used']:>5} "
                      f"{1000 * r['seconds']:>8.1f} {r['max_error']:>9.1e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2, default=str)


if __name__ == "__main__":
    main()
