"""Single-stage training on a small synthetic subset, next to the two-stage result.

Usage: python3 scripts/single_stage_smoke.py [--n-train 64] [--epochs 3]

All four sub-networks train together and the true-class maps are rebuilt
from the current backbone after every epoch, so each epoch pays for a full
attribution pass over the training set.
"""
import argparse
import time

import numpy as np

from impactx.data import SyntheticWatermarkConfig, generate_synthetic
from impactx.explainer import Masker, MaskerConfig
from impactx.models import BackboneSpec, ImpactxModel, ImpactxSpec, predict_impactx
from impactx.trainer import TrainConfig, generate_attribution_cache, single_stage_train, stage1_train, stage2_train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n-train", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--budget", type=int, default=172)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    train, test = generate_synthetic(SyntheticWatermarkConfig(n_train=args.n_train, n_test=128, seed=args.seed))
    spec = ImpactxSpec(BackboneSpec((3, 32, 32), num_classes=2), latent_dim=64)
    masker = Masker.for_dataset(MaskerConfig(grid=(4, 4)), train)
    cfg = TrainConfig(epochs_stage1=args.epochs, epochs_stage2=args.epochs, seed=args.seed, patience=args.epochs)

    t0 = time.perf_counter()
    single = ImpactxModel(spec, seed=args.seed)
    report = single_stage_train(single, train, masker, args.budget, cfg)
    acc_single = np.mean(predict_impactx(single, test.images)[0] == test.labels)
    print(f"single stage: acc {acc_single:.4f}, {report.map_generations} maps, {time.perf_counter() - t0:.1f}s")

    t0 = time.perf_counter()
    two = ImpactxModel(spec, seed=args.seed)
    stage1_train(two, train, cfg)
    cache = generate_attribution_cache(two, train, masker, args.budget)
    two.freeze("m")
    stage2_train(two, train, cache, cfg)
    acc_two = np.mean(predict_impactx(two, test.images)[0] == test.labels)
    print(f"two stage:    acc {acc_two:.4f}, {len(cache)} maps, {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
