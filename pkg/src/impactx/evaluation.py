"""Accuracy, MoRF perturbation curves and AOPC."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import LabeledDataset
from .errors import CompatibilityError, ConfigError, DataError
from .explainer import Masker, partition_shap
from .models import ImpactxModel, predict_impactx
from .numerics import make_rng

SOURCES = ("decoder", "external-shap", "random")


def accuracy(predict_fn: Callable[[np.ndarray], np.ndarray], ds: LabeledDataset) -> float:
    if len(ds) == 0:
        raise DataError("accuracy of an empty dataset is undefined")
    return float(np.mean(np.asarray(predict_fn(ds.images)) == ds.labels))


@dataclass
class MorfCurve:
    fractions: np.ndarray
    scores: np.ndarray
    order: np.ndarray  # region ids in perturbation order
    aopc: float
    sample_id: int = -1
    class_index: int = 0

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fractions.tolist(), self.scores.tolist()))


def region_order(values: np.ndarray, masker: Masker) -> np.ndarray:
    """Regions by descending mean relevance; equal means keep row-major order."""
    flat = np.asarray(values, dtype=np.float64).reshape(masker.regions.shape)
    sums = np.bincount(masker.regions.ravel(), weights=flat.ravel(), minlength=masker.n_regions)
    means = sums / masker.region_sizes
    return np.argsort(-means, kind="stable")


def morf_curve(score_fn, x: np.ndarray, values: np.ndarray | None, k: int, masker: Masker,
               step_regions: int = 1, rng=None, noise_range=(0.0, 1.0),
               order: np.ndarray | None = None, sample_id: int = -1) -> MorfCurve:
    """Class-``k`` score as regions are replaced by uniform noise, most relevant first.

    ``noise_range`` is a (low, high) pair of scalars or per-channel arrays.
    One noise image is drawn per curve and revealed region by region, so a
    relevance-ordered and a random-ordered curve built from the same ``rng``
    state see identical noise. Passing ``order`` overrides the ranking.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape != masker.image_shape:
        raise CompatibilityError(f"image {x.shape} vs masker grid {masker.image_shape}")
    if step_regions < 1:
        raise ConfigError("step_regions must be positive")
    if order is None:
        if values is None:
            raise ConfigError("need a relevance map or an explicit order")
        if np.size(values) != masker.regions.size:
            raise CompatibilityError(f"map of {np.size(values)} pixels vs {masker.regions.shape} image")
        order = region_order(values, masker)
    order = np.asarray(order)
    if sorted(order.tolist()) != list(range(masker.n_regions)):
        raise CompatibilityError("region order must be a permutation of every region")
    rng = rng if rng is not None else make_rng(0)
    c = x.shape[0]
    lo = np.broadcast_to(np.asarray(noise_range[0], dtype=np.float64), (c,))
    hi = np.broadcast_to(np.asarray(noise_range[1], dtype=np.float64), (c,))
    noise = rng.uniform(lo[:, None, None], hi[:, None, None], size=x.shape).astype(np.float32)

    steps = [order[i:i + step_regions] for i in range(0, len(order), step_regions)]
    perturbed = np.zeros(masker.n_regions, dtype=bool)
    images = [x]
    for chunk in steps:
        perturbed[chunk] = True
        images.append(np.where(perturbed[masker.regions][None], noise, x))
    scores = np.asarray(score_fn(np.stack(images)), dtype=np.float64)[:, k]
    counts = np.cumsum([0] + [len(s) for s in steps])
    fractions = counts / masker.n_regions
    curve = MorfCurve(fractions, scores, order, 0.0, sample_id, int(k))
    curve.aopc = aopc(curve)
    return curve


def aopc(curve) -> float:
    """Mean drop from the unperturbed score over all later steps.

    Accepts a MorfCurve or a (fractions, scores) pair. Trailing points that
    repeat the final fraction are ignored.
    """
    if isinstance(curve, MorfCurve):
        fractions, scores = curve.fractions, curve.scores
    else:
        fractions, scores = (np.asarray(a, dtype=np.float64) for a in curve)
    fractions = np.asarray(fractions, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) < 2 or len(fractions) != len(scores):
        raise DataError("an AOPC needs at least two curve points")
    end = len(fractions)
    while end > 2 and fractions[end - 1] == fractions[end - 2]:
        end -= 1
    return float(np.mean(scores[0] - scores[1:end]))


# -- source comparison --------------------------------------------------------


@dataclass
class ComparisonRow:
    source: str
    mean_aopc: float
    std_aopc: float
    n: int
    seed_means: tuple[float, ...] = ()


def compare_maps(model: ImpactxModel, subset: LabeledDataset, masker: Masker,
                 sources: Sequence[str] = SOURCES, budget: int = 2000, noise_seeds: int = 5,
                 step_regions: int = 1, noise_range=(0.0, 1.0), seed: int = 0,
                 maps: dict[str, np.ndarray] | None = None) -> tuple[list[ComparisonRow], list[dict]]:
    """Mean AOPC per map source over ``subset`` for the IMPACTX prediction.

    Each source is scored over ``noise_seeds`` noise draws; ``mean_aopc``
    and ``std_aopc`` are the mean and sample standard deviation of the
    per-seed averages. Returned curve rows are averaged over seeds.
    """
    if len(subset) == 0:
        raise DataError("empty comparison subset")
    for s in sources:
        if s not in SOURCES:
            raise ConfigError(f"unknown map source {s!r}")
    score_fn = model.impactx_proba
    preds, decoder_maps = predict_impactx(model, subset.images)
    maps = dict(maps or {})
    maps.setdefault("decoder", decoder_maps[:, 0])
    if "external-shap" in sources and "external-shap" not in maps:
        maps["external-shap"] = np.stack([
            partition_shap(score_fn, subset.images[i], int(preds[i]), masker, budget)
            .values[0] for i in range(len(subset))
        ])
    rows, curve_rows = [], []
    for source in sources:
        per_seed = np.zeros((noise_seeds, len(subset)))
        score_sum = None
        for s in range(noise_seeds):
            noise_rng = make_rng(seed * 1000 + s)
            order_rng = make_rng(seed * 1000 + s + 500)
            seed_scores = []
            for i in range(len(subset)):
                order = order_rng.permutation(masker.n_regions) if source == "random" else None
                curve = morf_curve(score_fn, subset.images[i], maps.get(source, [None] * len(subset))[i],
                                   int(preds[i]), masker, step_regions, noise_rng, noise_range, order,
                                   int(subset.ids[i]))
                per_seed[s, i] = curve.aopc
                seed_scores.append(curve.scores)
            score_sum = np.array(seed_scores) if score_sum is None else score_sum + seed_scores
        means = per_seed.mean(axis=1)
        std = float(means.std(ddof=1)) if noise_seeds > 1 else 0.0
        rows.append(ComparisonRow(source, float(means.mean()), std, len(subset), tuple(means.tolist())))
        fractions = curve.fractions
        for i in range(len(subset)):
            for step, (frac, score) in enumerate(zip(fractions, score_sum[i] / noise_seeds)):
                curve_rows.append({"source": source, "sample_id": int(subset.ids[i]), "class": int(preds[i]),
                                   "step": step, "fraction": float(frac), "score": float(score)})
    return rows, curve_rows


def write_morf_csv(path, curve_rows: list[dict], header: str | None = None) -> None:
    _write_rows(path, ["source", "sample_id", "class", "step", "fraction", "score"], curve_rows, header)


def write_aopc_summary(path, rows: list[ComparisonRow], header: str | None = None) -> None:
    dicts = [{"source": r.source, "mean_aopc": r.mean_aopc, "std_aopc": r.std_aopc, "n": r.n} for r in rows]
    _write_rows(path, ["source", "mean_aopc", "std_aopc", "n"], dicts, header)


def _write_rows(path, fields, rows, header):
    with open(Path(path), "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
