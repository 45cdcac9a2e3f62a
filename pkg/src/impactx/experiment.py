"""Phase orchestration: stage1 -> cache -> stage2 -> eval, resumable per phase."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import (AttributionCache, LabeledDataset, cache_read, generate_synthetic, load_cifar10_binary)
from .errors import ConfigError, DataError, StateError
from .evaluation import compare_maps, write_aopc_summary, write_morf_csv
from .explainer import Masker, partition_shap
from .models import ImpactxModel, load_checkpoint, predict_baseline, predict_impactx, save_checkpoint
from .trainer import (generate_attribution_cache, grid_search, stage1_train, stage2_train, write_metrics)

log = logging.getLogger(__name__)

PHASES = ("stage1", "cache", "stage2", "eval")
STAGE1_CKPT = "stage1.impx"
IMPACTX_CKPT = "impactx.impx"
CACHE_FILE = "cache.ixac"


class Run:
    """One experiment directory bound to one config hash."""

    def __init__(self, cfg: ExperimentConfig):
        cfg.validate()
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.digest = cfg.digest()
        self.header = f"config_hash={self.digest} seed={cfg.seed}"
        self._data = None

    # -- bookkeeping ----------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"config_hash": self.digest, "seed": self.cfg.seed, "phases": [],
                "config": asdict(self.cfg)}

    def open(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        man = self.manifest()
        if man["config_hash"] != self.digest:
            raise ConfigError(
                f"{self.out} belongs to config {man['config_hash']}, not {self.digest}; use another --out"
            )
        self._save_manifest(man)

    def _save_manifest(self, man: dict) -> None:
        self.manifest_path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")

    def done(self, phase: str) -> bool:
        return phase in self.manifest()["phases"]

    def mark(self, phase: str) -> None:
        man = self.manifest()
        if phase not in man["phases"]:
            man["phases"].append(phase)
        self._save_manifest(man)

    # -- data and model ------------------------------------------------------

    def data(self) -> tuple[LabeledDataset, LabeledDataset]:
        if self._data is None:
            if self.cfg.data.kind == "synthetic":
                self._data = generate_synthetic(self.cfg.synthetic_config())
            else:
                self._data = load_cifar10_binary(self.cfg.data.path)
        return self._data

    def new_model(self) -> ImpactxModel:
        train, _ = self.data()
        return ImpactxModel(self.cfg.model_spec(train.num_classes, train.image_shape), seed=self.cfg.seed)

    def masker(self) -> Masker:
        return Masker.for_dataset(self.cfg.masker_config(), self.data()[0])

    def load_model(self, name: str) -> ImpactxModel:
        path = self.out / name
        if not path.exists():
            raise StateError(f"missing checkpoint {path}")
        model = self.new_model()
        load_checkpoint(path, model)
        return model

    # -- phases ---------------------------------------------------------------

    def stage1(self) -> None:
        if self.done("stage1"):
            log.info("stage1 already complete")
            return
        train, _ = self.data()
        grid = {k: v for k, v in self.cfg.train.grid.items() if k != "lam"}
        space = grid or {"batch_size": [self.cfg.train.batch_size]}
        results = {}

        def fit(params):
            model = self.new_model()
            report = stage1_train(model, train, self.cfg.train_config(**params))
            results[tuple(sorted(params.items()))] = (model, report, params)
            return report.best_val_acc

        best, table = grid_search(space, fit)
        model, report, _ = results[tuple(sorted(best.items()))]
        self._write_grid("stage1", table)
        save_checkpoint(self.out / STAGE1_CKPT, model, ("m",))
        write_metrics(self.out / "metrics.csv", report.epochs, self.header,
                      self.cfg.train.record_wall_time, append=True)
        man = self.manifest()
        man["stage1_best"] = best
        self._save_manifest(man)
        self.mark("stage1")

    def cache(self) -> None:
        if self.done("cache"):
            log.info("cache already complete")
            return
        if not self.done("stage1"):
            raise StateError("cache phase needs a completed stage1")
        train, _ = self.data()
        model = self.load_model(STAGE1_CKPT)
        path = self.out / CACHE_FILE
        cache = cache_read(path) if path.exists() else None
        generate_attribution_cache(model, train, self.masker(), self.cfg.explainer.budget, cache=cache,
                                   path=path, workers=self.cfg.workers)
        self.mark("cache")

    def stage2(self) -> None:
        if self.done("stage2"):
            log.info("stage2 already complete")
            return
        if not self.done("cache"):
            raise StateError("stage2 refuses to start without a complete attribution cache")
        train, _ = self.data()
        cache = cache_read(self.out / CACHE_FILE)
        best1 = self.manifest().get("stage1_best", {})
        lam_grid = self.cfg.train.grid.get("lam", [self.cfg.train.lam])
        results = {}

        def fit(params):
            model = self.load_model(STAGE1_CKPT)
            model.freeze("m")
            report = stage2_train(model, train, cache, self.cfg.train_config(**best1, **params))
            results[params["lam"]] = (model, report)
            return report.best_val_acc

        best, table = grid_search({"lam": lam_grid}, fit)
        model, report = results[best["lam"]]
        self._write_grid("stage2", [{**best1, **row} for row in table])
        save_checkpoint(self.out / IMPACTX_CKPT, model)
        write_metrics(self.out / "metrics.csv", report.epochs, self.header,
                      self.cfg.train.record_wall_time, append=True)
        self.mark("stage2")

    def evaluate(self) -> None:
        if self.done("eval"):
            log.info("eval already complete")
            return
        if not self.done("stage2"):
            raise StateError("eval refuses to start without a stage-2 checkpoint")
        train, test = self.data()
        model = self.load_model(IMPACTX_CKPT)
        base = float(np.mean(predict_baseline(model, test.images) == test.labels))
        fused = float(np.mean(predict_impactx(model, test.images)[0] == test.labels))
        with open(self.out / "accuracy.csv", "w", newline="") as fh:
            fh.write(f"# {self.header}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "test_acc"])
            w.writerow(["baseline", repr(base)])
            w.writerow(["impactx", repr(fused)])
        ev = self.cfg.eval
        subset = test.subset(np.arange(min(ev.n_samples, len(test))))
        lo, hi = train.channel_range()
        rows, curves = compare_maps(model, subset, self.masker(), ev.sources, self.cfg.explainer.budget,
                                    ev.noise_seeds, ev.step_regions, (lo, hi), self.cfg.seed)
        write_morf_csv(self.out / "morf.csv", curves, self.header)
        write_aopc_summary(self.out / "aopc_summary.csv", rows, self.header)
        self.mark("eval")

    def _write_grid(self, stage: str, table: list[dict]) -> None:
        path = self.out / "grid.csv"
        fresh = not path.exists()
        cols = ["stage", "batch_size", "learning_rate", "validation_fraction", "lam", "val_acc"]
        t = self.cfg.train
        defaults = {"batch_size": t.batch_size, "learning_rate": t.learning_rate,
                    "validation_fraction": t.validation_fraction, "lam": t.lam}
        with open(path, "a", newline="") as fh:
            if fresh:
                fh.write(f"# {self.header}\n")
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            if fresh:
                w.writeheader()
            for row in table:
                full = {**defaults, **row, "stage": stage}
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in full.items()})


def run_phases(cfg: ExperimentConfig, phase: str = "all") -> Run:
    if phase != "all" and phase not in PHASES:
        raise ConfigError(f"unknown phase {phase!r}; choose from {PHASES + ('all',)}")
    run = Run(cfg)
    run.open()
    steps = {"stage1": run.stage1, "cache": run.cache, "stage2": run.stage2, "eval": run.evaluate}
    for name in (PHASES if phase == "all" else (phase,)):
        run.current_phase = name
        steps[name]()
    return run


# -- map export ---------------------------------------------------------------


def to_pgm_bytes(values: np.ndarray) -> bytes:
    """8-bit binary PGM, min-max scaled; a constant map is written as all 128."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D map, got {values.shape}")
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        pixels = np.full(values.shape, 128, dtype=np.uint8)
    else:
        pixels = np.round((values - lo) / (hi - lo) * 255).astype(np.uint8)
    h, w = values.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, payload = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise DataError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def export_maps(run: Run, n: int, out_dir=None, external: bool = False) -> list[Path]:
    """Input, decoder map and optionally a partition-SHAP map for ``n`` test samples."""
    model = run.load_model(IMPACTX_CKPT)
    if not model.trained:
        raise StateError("checkpoint does not hold a trained IMPACTX model")
    _, test = run.data()
    out_dir = Path(out_dir or run.out / "maps")
    out_dir.mkdir(parents=True, exist_ok=True)
    subset = test.subset(np.arange(min(n, len(test))))
    preds, maps = predict_impactx(model, subset.images)
    proba = model.impactx_proba(subset.images)
    masker = run.masker() if external else None
    written = []
    with open(out_dir / "legend.csv", "w", newline="") as fh:
        fh.write(f"# {run.header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", "prediction", "score"])
        for i, sid in enumerate(subset.ids):
            files = {"input": subset.images[i].mean(axis=0), "decoder": maps[i, 0]}
            if external:
                files["shap"] = partition_shap(model.impactx_proba, subset.images[i], int(preds[i]),
                                               masker, run.cfg.explainer.budget).values[0]
            for kind, values in files.items():
                path = out_dir / f"sample_{int(sid):05d}_{kind}.pgm"
                path.write_bytes(to_pgm_bytes(values))
                written.append(path)
            w.writerow([int(sid), int(subset.labels[i]), int(preds[i]), repr(float(proba[i, preds[i]]))])
    return written


# -- report -------------------------------------------------------------------


def _read_csv(path: Path) -> tuple[str | None, list[dict]]:
    if not path.exists():
        raise DataError(f"missing artifact {path}")
    with open(path, newline="") as fh:
        first = fh.readline()
        digest = None
        if first.startswith("#"):
            for token in first[1:].split():
                if token.startswith("config_hash="):
                    digest = token.split("=", 1)[1]
        else:
            fh.seek(0)
        return digest, list(csv.DictReader(fh))


def report(out_dir) -> str:
    out = Path(out_dir)
    man_path = out / "manifest.json"
    if not man_path.exists():
        raise DataError(f"{out} has no manifest.json")
    digest = json.loads(man_path.read_text())["config_hash"]
    tables = {}
    for name in ("metrics.csv", "accuracy.csv", "morf.csv", "aopc_summary.csv"):
        found, rows = _read_csv(out / name)
        if found != digest:
            raise DataError(f"{name} was produced by config {found}, manifest says {digest}")
        tables[name] = rows
    acc = {r["model"]: float(r["test_acc"]) for r in tables["accuracy.csv"]}
    lines = [
        f"config {digest}",
        f"baseline accuracy  {acc['baseline']:.4f}",
        f"IMPACTX accuracy   {acc['impactx']:.4f}",
        f"delta              {acc['impactx'] - acc['baseline']:+.4f}",
        "mean AOPC per map source:",
    ]
    for r in tables["aopc_summary.csv"]:
        lines.append(f"  {r['source']:<14} {float(r['mean_aopc']):.4f} +/- {float(r['std_aopc']):.4f} (n={r['n']})")
    return "\n".join(lines)
