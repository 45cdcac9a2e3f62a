"""Five-seed two-stage comparison on the synthetic watermark task.

Usage: python3 scripts/desk_scale.py [--config configs/synthetic.toml] [--seeds 0 1 2 3 4] [--out runs/desk]

Each seed reseeds both the dataset and the model. Finished seeds are
reused, so the script can be interrupted and rerun.
"""
import argparse
import csv
import logging
import time
from pathlib import Path

import numpy as np

from impactx.config import load_config
from impactx.experiment import run_phases


def read(path):
    with open(path) as fh:
        fh.readline()
        return list(csv.DictReader(fh))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/synthetic.toml")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    table = []
    for seed in args.seeds:
        cfg = load_config(args.config)
        cfg.seed = cfg.data.seed = seed
        cfg.out = str(Path(args.out) / f"seed{seed}")
        t0 = time.perf_counter()
        run_phases(cfg, "all")
        acc = {r["model"]: float(r["test_acc"]) for r in read(Path(cfg.out) / "accuracy.csv")}
        aopc = {r["source"]: float(r["mean_aopc"]) for r in read(Path(cfg.out) / "aopc_summary.csv")}
        table.append((seed, acc["baseline"], acc["impactx"], aopc))
        print(f"seed {seed}: baseline {acc['baseline']:.4f}  impactx {acc['impactx']:.4f}  "
              + "  ".join(f"aopc[{k}] {v:.4f}" for k, v in aopc.items())
              + f"  ({time.perf_counter() - t0:.0f}s)")

    base = np.array([t[1] for t in table])
    fused = np.array([t[2] for t in table])
    print(f"\nmean baseline {base.mean():.4f}  mean impactx {fused.mean():.4f}  "
          f"impactx >= baseline in {int(np.sum(fused >= base))}/{len(table)} seeds")
    for source in table[0][3]:
        vals = [t[3][source] for t in table]
        print(f"mean AOPC {source:<14} {np.mean(vals):.4f} +/- {np.std(vals, ddof=1) if len(vals) > 1 else 0:.4f}")


if __name__ == "__main__":
    main()
