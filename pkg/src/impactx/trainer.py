"""Training procedures: backbone stage, attribution cache, joint stage, grid search."""
from __future__ import annotations

import csv
import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import AttributionCache, LabeledDataset, cache_write, split_train_val
from .errors import CompatibilityError, ConfigError, DataError, NumericError, StateError
from .explainer import Masker, true_class_attribution
from .models import ImpactxModel

log = logging.getLogger(__name__)

METRICS_FIELDS = ["stage", "epoch", "ce", "mse", "combined", "val_acc", "seconds"]


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    validation_fraction: float = 0.2
    lam: float = 1.0
    epochs_stage1: int = 20
    epochs_stage2: int = 20
    patience: int = 5
    optimizer: str = "adam"
    seed: int = 0
    normalize_targets: bool = True
    grid: dict[str, list] = field(default_factory=dict)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must be in (0, 1)")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        for key, values in self.grid.items():
            if not hasattr(self, key):
                raise ConfigError(f"grid key {key!r} is not a TrainConfig field")
            if not values:
                raise ConfigError(f"grid list for {key!r} is empty")


@dataclass
class StepRecord:
    ce: float
    mse: float
    combined: float
    lam: float


@dataclass
class EpochReport:
    stage: str
    epoch: int
    ce: float
    mse: float
    combined: float
    val_acc: float
    seconds: float
    val_mse: float = float("nan")

    def row(self, record_time: bool = False) -> list[str]:
        seconds = repr(self.seconds) if record_time else ""
        return [self.stage, str(self.epoch), repr(self.ce), repr(self.mse), repr(self.combined),
                repr(self.val_acc), seconds]


@dataclass
class TrainReport:
    epochs: list[EpochReport] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = -1.0
    map_generations: int = 0


# -- losses -------------------------------------------------------------------


def loss_terms(logits, labels, r_hat, r, lam: float) -> tuple[nx.Tensor, nx.Tensor, nx.Tensor]:
    """(CE + lam * MSE, CE, MSE)."""
    ce = nx.cross_entropy(logits, labels)
    err = nx.mse(r_hat, r)
    return nx.add(ce, nx.scale(err, lam)), ce, err


def combined_loss(logits, labels, r_hat, r, lam: float) -> nx.Tensor:
    return loss_terms(logits, labels, r_hat, r, lam)[0]


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max scale one map to [0, 1]; constant maps become all zeros."""
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0:
        return np.zeros_like(values, dtype=np.float32)
    return ((values - lo) / (hi - lo)).astype(np.float32)


def targets_for(cache: AttributionCache, ids, normalize: bool) -> np.ndarray:
    maps = cache.maps_for(ids)
    if normalize:
        maps = np.stack([normalize_map(m) for m in maps])
    return maps[:, None].astype(np.float32)


# -- helpers ------------------------------------------------------------------


def _split(train: LabeledDataset, val: LabeledDataset | None, cfg: TrainConfig):
    if len(train) == 0:
        raise DataError("training set is empty")
    if val is None:
        train, val = split_train_val(train, cfg.validation_fraction, cfg.seed)
    return train, val


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _snapshot(params: Sequence[nx.Parameter]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params: Sequence[nx.Parameter], saved: list[np.ndarray]) -> None:
    for p, s in zip(params, saved):
        p.data[...] = s


def _finite(value: float, where: str) -> float:
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss during {where}")
    return value


def accuracy_of(proba_fn: Callable[[np.ndarray], np.ndarray], ds: LabeledDataset) -> float:
    if len(ds) == 0:
        raise DataError("cannot score an empty dataset")
    return float(np.mean(np.argmax(proba_fn(ds.images), axis=1) == ds.labels))


# -- stage 1 ------------------------------------------------------------------


def stage1_train(model: ImpactxModel, train: LabeledDataset, cfg: TrainConfig,
                 val: LabeledDataset | None = None,
                 on_epoch: Callable[[EpochReport], None] | None = None) -> TrainReport:
    """Fit the backbone M (with its own head) on cross entropy alone."""
    cfg.validate()
    train, val = _split(train, val, cfg)
    params = model.trainable_parameters(("m",))
    opt = nx.make_optimizer(cfg.optimizer, params, cfg.learning_rate)
    rng = nx.make_rng(cfg.seed)
    report = TrainReport()
    best = _snapshot(params)
    stale = 0
    for epoch in range(1, cfg.epochs_stage1 + 1):
        t0 = time.perf_counter()
        ces, sizes = [], []
        for idx in _batches(len(train), cfg.batch_size, rng):
            model.zero_grad()
            with nx.Tape():
                loss = nx.cross_entropy(model.forward_m(train.images[idx]), train.labels[idx])
            nx.backward(loss)
            opt.step()
            ce = _finite(loss.item(), "stage 1")
            report.steps.append(StepRecord(ce, 0.0, ce, 0.0))
            ces.append(ce)
            sizes.append(len(idx))
        ce = float(np.average(ces, weights=sizes))
        acc = accuracy_of(model.baseline_proba, val)
        rep = EpochReport("stage1", epoch, ce, 0.0, ce, acc, time.perf_counter() - t0)
        report.epochs.append(rep)
        log.info("stage1 epoch %d ce=%.4f val_acc=%.4f", epoch, ce, acc)
        if on_epoch:
            on_epoch(rep)
        if acc > report.best_val_acc:
            report.best_val_acc, report.best_epoch = acc, epoch
            best = _snapshot(params)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    _restore(params, best)
    return report


# -- attribution cache --------------------------------------------------------


def generate_attribution_cache(model: ImpactxModel, train: LabeledDataset, masker: Masker, budget: int,
                               cache: AttributionCache | None = None, path=None, workers: int = 1,
                               flush_every: int = 64, score_fn=None) -> AttributionCache:
    """True-class maps for every training sample, skipping ids already cached."""
    _, h, w = train.image_shape
    if cache is None:
        cache = AttributionCache(h, w)
    if (cache.height, cache.width) != (h, w) or masker.image_shape != train.image_shape:
        raise CompatibilityError(
            f"cache {(cache.height, cache.width)} / masker {masker.image_shape} vs data {train.image_shape}"
        )
    score_fn = score_fn or model.baseline_proba
    todo = [i for i, sid in enumerate(train.ids) if int(sid) not in cache]

    def explain(i):
        sid = int(train.ids[i])
        return true_class_attribution(score_fn, train.images[i], int(train.labels[i]), masker, budget, sid)

    chunks = [todo[i:i + flush_every] for i in range(0, len(todo), flush_every)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for chunk in chunks:
            for amap in pool.map(explain, chunk):
                cache.put(amap.sample_id, amap.class_index, amap.values[0])
            if path is not None:
                cache_write(path, cache)
    if path is not None and not chunks:
        cache_write(path, cache)
    return cache


# -- stage 2 / single stage ---------------------------------------------------


def _joint_epochs(model: ImpactxModel, train: LabeledDataset, val: LabeledDataset, cfg: TrainConfig,
                  subnets: Sequence[str], stage: str, epochs: int, get_cache: Callable[[], AttributionCache | None],
                  after_epoch: Callable[[int], None] | None, on_step, on_epoch) -> TrainReport:
    params = model.trainable_parameters(subnets)
    opt = nx.make_optimizer(cfg.optimizer, params, cfg.learning_rate)
    rng = nx.make_rng(cfg.seed + 1)
    report = TrainReport()
    best = _snapshot(params)
    stale = 0
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        cache = get_cache()
        lam = cfg.lam if cache is not None else 0.0
        sums = np.zeros(3)
        for idx in _batches(len(train), cfg.batch_size, rng):
            if cache is not None:
                targets = targets_for(cache, train.ids[idx], cfg.normalize_targets)
            else:
                targets = np.zeros((len(idx), 1) + train.image_shape[1:], dtype=np.float32)
            model.zero_grad()
            with nx.Tape():
                logits, _, r_hat = model.forward(train.images[idx])
                loss, ce, err = loss_terms(logits, train.labels[idx], r_hat, targets, lam)
            nx.backward(loss)
            opt.step()
            rec = StepRecord(ce.item(), err.item(), _finite(loss.item(), stage), lam)
            report.steps.append(rec)
            if on_step:
                on_step(rec, logits.data)
            sums += np.array([rec.ce, rec.mse, rec.combined]) * len(idx)
        ce, err, _ = sums / len(train)
        combined = ce + lam * err
        acc = accuracy_of(model.impactx_proba, val)
        val_mse = float("nan")
        if cache is not None and all(int(s) in cache for s in val.ids):
            _, _, r_val = model.forward(val.images)
            val_mse = float(np.mean((r_val.data - targets_for(cache, val.ids, cfg.normalize_targets)) ** 2))
        rep = EpochReport(stage, epoch, float(ce), float(err), float(combined), acc,
                          time.perf_counter() - t0, val_mse)
        report.epochs.append(rep)
        log.info("%s epoch %d ce=%.4f mse=%.5f val_acc=%.4f", stage, epoch, ce, err, acc)
        if on_epoch:
            on_epoch(rep)
        if after_epoch:
            after_epoch(epoch)
        if acc > report.best_val_acc:
            report.best_val_acc, report.best_epoch = acc, epoch
            best = _snapshot(params)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    _restore(params, best)
    return report


def stage2_train(model: ImpactxModel, train: LabeledDataset, cache: AttributionCache, cfg: TrainConfig,
                 val: LabeledDataset | None = None, on_step=None, on_epoch=None) -> TrainReport:
    """Fit LEP, D and C on CE + lam * MSE with M frozen; targets are the cached maps."""
    cfg.validate()
    if "m" not in model.frozen:
        raise StateError("stage 2 requires the feature extractor M to be frozen")
    missing = [int(s) for s in train.ids if int(s) not in cache]
    if missing:
        raise DataError(f"attribution cache is missing {len(missing)} training samples (first: {missing[0]})")
    if (cache.height, cache.width) != train.image_shape[1:]:
        raise CompatibilityError(f"cache maps {(cache.height, cache.width)} vs images {train.image_shape[1:]}")
    train, val = _split(train, val, cfg)
    report = _joint_epochs(model, train, val, cfg, ("lep", "decoder", "classifier"), "stage2",
                           cfg.epochs_stage2, lambda: cache, None, on_step, on_epoch)
    model.trained = True
    return report


def single_stage_train(model: ImpactxModel, train: LabeledDataset, masker: Masker, budget: int,
                       cfg: TrainConfig, cache: AttributionCache | None = None, regen_epochs: int | None = None,
                       val: LabeledDataset | None = None, workers: int = 1, on_step=None,
                       on_epoch=None) -> TrainReport:
    """All four sub-networks trained together; maps regenerated after each epoch.

    Without an initial cache the first epoch has no reconstruction targets
    and trains on cross entropy only. ``regen_epochs`` limits regeneration
    to the first that many epochs (default: every epoch).
    """
    cfg.validate()
    model.unfreeze("m")
    full = train
    train, val = _split(train, val, cfg)
    regen_epochs = cfg.epochs_stage2 if regen_epochs is None else regen_epochs
    state = {"cache": cache, "generations": 0}

    def regenerate(epoch: int) -> None:
        if epoch > regen_epochs:
            return
        fresh = generate_attribution_cache(model, full, masker, budget, workers=workers)
        state["cache"] = fresh
        state["generations"] += len(fresh)

    report = _joint_epochs(model, train, val, cfg, ("m", "lep", "decoder", "classifier"), "single",
                           cfg.epochs_stage2, lambda: state["cache"], regenerate, on_step, on_epoch)
    report.map_generations = state["generations"]
    model.trained = True
    return report


# -- metrics stream -----------------------------------------------------------


def write_metrics(path, reports: Sequence[EpochReport], header: str | None = None,
                  record_time: bool = False, append: bool = False) -> None:
    path = Path(path)
    fresh = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        if fresh and header:
            fh.write(f"# {header}\n")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(METRICS_FIELDS)
        for rep in reports:
            writer.writerow(rep.row(record_time))


# -- grid search --------------------------------------------------------------


def grid_search(space: dict[str, Sequence], train_fn: Callable[[dict], float], csv_path=None,
                header: str | None = None) -> tuple[dict, list[dict]]:
    """Exhaustive search maximising ``train_fn``; earlier cells win ties."""
    if not space or any(len(v) == 0 for v in space.values()):
        raise ConfigError("grid search needs a non-empty value list for every field")
    keys = list(space)
    table, best = [], None
    for combo in itertools.product(*(space[k] for k in keys)):
        params = dict(zip(keys, combo))
        metric = float(train_fn(dict(params)))
        row = {**params, "val_acc": metric}
        table.append(row)
        if best is None or metric > best["val_acc"]:
            best = row
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            writer = csv.DictWriter(fh, fieldnames=keys + ["val_acc"], lineterminator="\n")
            writer.writeheader()
            writer.writerows(table)
    return {k: best[k] for k in keys}, table
