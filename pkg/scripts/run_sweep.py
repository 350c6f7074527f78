"""Template-loss weight ablation over the grid 0.1, 0.2, 0.3, 0.33, 0.4.

    python3 scripts/run_sweep.py --out runs/sweep --count 48 epochs=20

Generates a dataset with a held-out test split, then calls the CLI sweep.
"""

import argparse
from pathlib import Path

from meshletemp import cli
from meshletemp.synth import generate_dataset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--count", type=int, default=48)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("overrides", nargs="*")
    args = ap.parse_args()
    data = Path(args.out) / "data"
    if not (data / "manifest.json").exists():
        generate_dataset(data, args.count, args.seed, test_fraction=0.25)
    raise SystemExit(cli.main(["sweep-alpha-temp", "--data", str(data), "--output-dir", args.out,
                               "--preset", "desk", "dtype=float32", *args.overrides]))


if __name__ == "__main__":
    main()
