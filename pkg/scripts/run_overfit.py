"""Desk overfit experiment: 16 samples, 2000 steps, masking on.

    python3 scripts/run_overfit.py --out runs/overfit

Writes the dataset, checkpoints, train_log.csv, metrics.csv, template snapshots
for the two most pose-distinct samples, and loss_curves.png.
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np
import torch

from meshletemp import cli
from meshletemp.config import apply_overrides, preset
from meshletemp.synth import Dataset, generate_dataset
from meshletemp.trainer import evaluate, metrics_csv, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("overrides", nargs="*", help="key=value overrides on the desk-overfit preset")
    args = ap.parse_args()
    out = Path(args.out)
    cfg = apply_overrides(preset("desk-overfit"), args.overrides)
    torch.set_num_threads(cfg.threads)

    data_dir = out / "data"
    if not (data_dir / "manifest.json").exists():
        generate_dataset(data_dir, cfg.data.count, cfg.data.seed, tiers=cfg.data.tiers)
    ds = Dataset(data_dir)

    start = time.perf_counter()
    ck = train(cfg, ds, out_dir=out / "run", checkpoint_every=100)
    elapsed = time.perf_counter() - start
    row = evaluate(ck, ds, "train")
    (out / "run" / "metrics.csv").write_text(metrics_csv([row]), encoding="utf-8")

    h = ck.history
    summary = {
        "steps": int(len(h)),
        "seconds": round(elapsed, 1),
        "loss_step0": float(h[0, -1]),
        "loss_final_epoch": float(h[-2:, -1].mean()),
        **{k: row[k] for k in ("mpve", "mpjpe", "pa_mpjpe")},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary, indent=2))

    ids = ds.ids("train")
    theta = {i: ds.records[i].gen_theta[:72] for i in ids}
    a, b = max(((x, y) for x in ids for y in ids if x < y), key=lambda p: np.abs(theta[p[0]] - theta[p[1]]).sum())
    cli.main(["snapshot-template", "--checkpoint", str(out / "run"), "--data", str(data_dir),
              "--ids", f"{a},{b}", "--output-dir", str(out / "snapshots")])
    cli.main(["plot", "--log", str(out / "run"), "--output-dir", str(out / "plots")])


if __name__ == "__main__":
    main()
