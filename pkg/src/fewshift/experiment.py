"""Config-driven experiment runner: model variants x training-data fractions
x learning-rate grid x seeds, with best-LR selection by OOD performance, an
append-only resumable results store, report emission, and the multi-worker
scaling study.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import (
    DatasetConfig,
    SplitBundle,
    caption_matrix,
    generate_dataset,
    samples_to_arrays,
    subsample_fraction,
)
from .dist import TimingRecord, data_parallel_train, scale_efficiency
from .metrics import compute_metrics, random_baseline, zero_shot_predict
from .models import DualEncoder, EncoderSpec, VisionClassifier
from .numerics import NumericsError, ParamVector
from .optim import OptimizerConfig, WarmupScalingPolicy, validate_schedule_windows, warmup_lr
from .train import clip_loss_and_grads, train_model

ALL_VARIANTS = (
    "vision_linear_probe",
    "vision_e2e",
    "clip_linear_probe",
    "clip_e2e",
    "clip_e2e_swa",
)

RESULTS_ENV_VAR = "FEWSHIFT_RESULTS"


@dataclass
class ExperimentConfig:
    variants: list[str] = field(default_factory=lambda: list(ALL_VARIANTS))
    fractions: list[float] = field(
        default_factory=lambda: [0.0, 0.03, 0.05, 0.10, 0.30, 0.50, 0.70, 0.90, 1.0]
    )
    lr_grid: list[float] = field(default_factory=lambda: [1e-2, 1e-3, 1e-4, 1e-5])
    weight_decay_grid: list[float] = field(default_factory=lambda: [1e-4])
    epochs: int = 20
    seeds: int = 3
    batch_size: int = 128
    swa_epochs: int = 10
    metric: str = "top1"  # "top1" | "macro_f1"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    workers: int = 1
    momentum: float = 0.9
    # model shape
    hidden_dims: list[int] = field(default_factory=lambda: [48])
    encoder_dim: int = 32
    embed_dim: int = 24
    activation: str = "tanh"
    temperature: float = 0.07
    trainable_temperature: bool = False
    # contrastive pretext pretraining for the clip_* variants
    pretext_domains: int = 5
    pretext_samples_per_class: int = 8
    pretrain_epochs: int = 5
    pretrain_lr: float = 0.05
    pretrain_batch: int = 256
    zero_shot_init: str = "pretrained"  # "pretrained" | "random"
    # distributed / scaling study
    warmup_epochs: int = 5
    eta_min_ratio: float = 0.1
    scaling_epochs: int = 30
    scaling_base_lr: float = 0.02
    scaling_per_worker_batch: int = 32
    timeout_secs: float = 30.0

    def __post_init__(self):
        unknown = set(self.variants) - set(ALL_VARIANTS)
        if unknown:
            raise NumericsError(f"unknown variants: {sorted(unknown)}")
        if sorted(self.fractions) != list(self.fractions) or any(
            not 0.0 <= f <= 1.0 for f in self.fractions
        ):
            raise NumericsError("fractions must be sorted ascending within [0, 1]")
        if self.seeds < 1:
            raise NumericsError("seeds must be >= 1")
        if self.swa_epochs > self.epochs:
            raise NumericsError("swa_epochs cannot exceed epochs")
        if self.metric not in ("top1", "macro_f1"):
            raise NumericsError(f"unknown metric {self.metric!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        doc = copy.deepcopy(doc)
        if "dataset" in doc and isinstance(doc["dataset"], dict):
            doc["dataset"] = DatasetConfig(**doc["dataset"])
        return ExperimentConfig(**doc)

    @staticmethod
    def from_json(path: str) -> "ExperimentConfig":
        with open(path) as f:
            return ExperimentConfig.from_dict(json.load(f))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _image_spec(config: ExperimentConfig, seed: int) -> EncoderSpec:
    return EncoderSpec(
        config.dataset.input_dim, list(config.hidden_dims), config.encoder_dim,
        config.activation, seed,
    )


def _text_spec(config: ExperimentConfig, seed: int) -> EncoderSpec:
    return EncoderSpec(
        config.dataset.text_dim, list(config.hidden_dims), config.encoder_dim,
        config.activation, seed + 1,
    )


def build_vision_model(config: ExperimentConfig, seed: int) -> VisionClassifier:
    return VisionClassifier(_image_spec(config, seed), config.dataset.num_classes, seed)


def build_dual_encoder(config: ExperimentConfig, seed: int) -> DualEncoder:
    return DualEncoder(
        _image_spec(config, seed),
        _text_spec(config, seed),
        config.embed_dim,
        config.temperature,
        seed,
        config.trainable_temperature,
    )


def pretext_dataset_config(config: ExperimentConfig) -> DatasetConfig:
    """Broad pretraining pool: same class prototypes and captions as the task
    dataset, but a disjoint (and larger) set of domains."""
    ds = copy.deepcopy(config.dataset)
    ds.num_id_domains = config.pretext_domains
    ds.num_ood_domains = 0
    ds.samples_per_class_per_domain = config.pretext_samples_per_class
    ds.id_test_fraction = 0.0
    ds.label_noise = 0.0
    ds.domain_seed = ds.seed + 77777
    return ds


def pretrain_dual_encoder(config: ExperimentConfig, seed: int) -> ParamVector:
    """Contrastively pretrain a dual encoder on the pretext pool; returns the
    pretrained ParamVector. Deterministic in (config, seed)."""
    pool = generate_dataset(pretext_dataset_config(config))
    images, captions, _, _ = samples_to_arrays(pool.train)
    model = build_dual_encoder(config, 90000 + seed)
    opt = OptimizerConfig(
        config.pretrain_lr, config.momentum, 0.0, config.pretrain_batch
    )
    result = train_model(
        model, images, captions, "clip", config.pretrain_epochs, opt,
        config.pretrain_lr, seed=70000 + seed,
    )
    if result.diverged:
        raise NumericsError("contrastive pretraining diverged")
    return model.get_params(encoders_trainable=True)


@dataclass
class RunRecord:
    variant: str
    fraction: float
    lr: float | None
    weight_decay: float | None
    seed: int
    id_metric: float | None
    ood_metric: float | None
    diverged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _evaluate(model, samples, config: ExperimentConfig, is_clip: bool, captions: np.ndarray) -> float:
    images, _, labels, _ = samples_to_arrays(samples)
    if is_clip:
        preds = zero_shot_predict(model, images, captions)
    else:
        preds = np.argmax(np.atleast_2d(model.logits(images)), axis=1)
    report = compute_metrics(preds, labels, config.dataset.num_classes)
    return report.top1 if config.metric == "top1" else report.macro_f1


def run_variant(
    variant: str,
    fraction: float,
    lr: float,
    weight_decay: float,
    seed: int,
    config: ExperimentConfig,
    bundle: SplitBundle,
    pretrained: ParamVector | None = None,
) -> RunRecord:
    """Train one (variant, fraction, lr, wd, seed) cell and evaluate on the
    full ID and OOD test splits."""
    if fraction <= 0.0:
        raise NumericsError("fraction must be > 0 for trained runs; use run_zero_shot")
    subset = subsample_fraction(
        bundle.train, fraction, seed * 100003 + int(round(fraction * 10000))
    )
    if not subset:
        raise NumericsError("empty subsample")
    images, caption_rows, labels, _ = samples_to_arrays(subset)
    captions = caption_matrix(config.dataset)
    is_clip = variant.startswith("clip")

    if is_clip:
        model = build_dual_encoder(config, 90000 + seed)
        if pretrained is None:
            pretrained = pretrain_dual_encoder(config, seed)
        model.set_params(pretrained)
        model.set_linear_probe_mode(variant == "clip_linear_probe")
        targets, mode = caption_rows, "clip"
    else:
        model = build_vision_model(config, 90000 + seed)
        model.set_linear_probe_mode(variant == "vision_linear_probe")
        targets, mode = labels, "vision"

    opt = OptimizerConfig(lr, config.momentum, weight_decay, config.batch_size)
    swa = config.swa_epochs if variant == "clip_e2e_swa" else None
    result = train_model(
        model, images, targets, mode, config.epochs, opt, lr,
        seed=seed, swa_epochs=swa, eta_min_ratio=config.eta_min_ratio,
    )
    if result.diverged:
        return RunRecord(variant, fraction, lr, weight_decay, seed, None, None, diverged=True)
    id_m = _evaluate(model, bundle.id_test, config, is_clip, captions)
    ood_m = _evaluate(model, bundle.ood_test, config, is_clip, captions)
    return RunRecord(variant, fraction, lr, weight_decay, seed, id_m, ood_m)


def run_zero_shot(
    variant: str,
    config: ExperimentConfig,
    bundle: SplitBundle | None = None,
    seed: int = 0,
    pretrained: ParamVector | None = None,
) -> RunRecord:
    """Zero-fraction row: no gradient updates. Vision variants report the
    random-guessing baseline; clip variants classify by caption similarity."""
    if variant.startswith("vision"):
        base = random_baseline(config.dataset.num_classes)
        return RunRecord(variant, 0.0, None, None, seed, base, base)
    if bundle is None:
        bundle = generate_dataset(config.dataset)
    model = build_dual_encoder(config, 90000 + seed)
    if config.zero_shot_init == "pretrained":
        if pretrained is None:
            pretrained = pretrain_dual_encoder(config, seed)
        model.set_params(pretrained)
    captions = caption_matrix(config.dataset)
    id_m = _evaluate(model, bundle.id_test, config, True, captions)
    ood_m = _evaluate(model, bundle.ood_test, config, True, captions)
    return RunRecord(variant, 0.0, None, None, seed, id_m, ood_m)


def select_best_lr(ood_by_lr: dict[float, float]) -> float:
    """Learning rate with the highest mean OOD metric; ties go to the smaller
    learning rate."""
    if not ood_by_lr:
        raise NumericsError("no successful runs to select from")
    return min(ood_by_lr, key=lambda lr: (-ood_by_lr[lr], lr))


class ResultsStore:
    """Append-only JSON-lines ledger of run records keyed by
    (variant, fraction, lr, wd, seed, config-hash)."""

    def __init__(self, path: str):
        self.path = path
        self._records: dict[str, dict] = {}
        if os.path.exists(path):
            with open(path) as f:
                for line in f:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    self._records[rec["key"]] = rec["record"]

    @staticmethod
    def key(variant, fraction, lr, wd, seed, config_hash) -> str:
        return f"{variant}|{fraction!r}|{lr!r}|{wd!r}|{seed}|{config_hash}"

    def get(self, key: str) -> dict | None:
        return self._records.get(key)

    def put(self, key: str, record: dict) -> None:
        if key in self._records:
            return
        self._records[key] = record
        with open(self.path, "a") as f:
            f.write(json.dumps({"key": key, "record": record}, sort_keys=True) + "\n")

    def __len__(self) -> int:
        return len(self._records)


@dataclass
class ReportCell:
    variant: str
    fraction: float
    mean_id: float | None
    std_id: float | None
    mean_ood: float | None
    std_ood: float | None
    selected_lr: float | None
    selected_wd: float | None
    n_runs: int
    missing: bool = False


@dataclass
class ExperimentReport:
    metric: str
    fractions: list[float]
    variants: list[str]
    cells: dict[tuple[str, float], ReportCell]
    config_hash: str

    def cell(self, variant: str, fraction: float) -> ReportCell:
        return self.cells[(variant, fraction)]


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(np.mean(arr)), std


def run_sweep(config: ExperimentConfig, store: ResultsStore | None = None) -> ExperimentReport:
    """The full protocol: every variant x fraction x lr x wd x seed run,
    best-(lr, wd) selection by mean OOD metric, and per-cell seed statistics.
    Previously stored runs are reused, never recomputed."""
    cfg_hash = config.config_hash()
    bundle = generate_dataset(config.dataset)
    needs_pretrain = any(v.startswith("clip") for v in config.variants)
    pretrained: dict[int, ParamVector] = {}
    if needs_pretrain:
        for s in range(config.seeds):
            pretrained[s] = pretrain_dual_encoder(config, s)

    def cached_run(variant, fraction, lr, wd, seed) -> dict:
        key = ResultsStore.key(variant, fraction, lr, wd, seed, cfg_hash)
        if store is not None:
            hit = store.get(key)
            if hit is not None:
                return hit
        if fraction == 0.0:
            rec = run_zero_shot(variant, config, bundle, seed, pretrained.get(seed))
        else:
            rec = run_variant(variant, fraction, lr, wd, seed, config, bundle, pretrained.get(seed))
        doc = rec.to_dict()
        if store is not None:
            store.put(key, doc)
        return doc

    cells: dict[tuple[str, float], ReportCell] = {}
    for variant in config.variants:
        for fraction in config.fractions:
            if fraction == 0.0:
                recs = [cached_run(variant, 0.0, None, None, s) for s in range(config.seeds)]
                ids = [r["id_metric"] for r in recs]
                oods = [r["ood_metric"] for r in recs]
                mi, si = _mean_std(ids)
                mo, so = _mean_std(oods)
                cells[(variant, fraction)] = ReportCell(
                    variant, fraction, mi, si, mo, so, None, None, len(recs)
                )
                continue
            by_setting: dict[tuple[float, float], list[dict]] = {}
            for lr in config.lr_grid:
                for wd in config.weight_decay_grid:
                    runs = [cached_run(variant, fraction, lr, wd, s) for s in range(config.seeds)]
                    ok = [r for r in runs if not r["diverged"]]
                    if len(ok) < len(runs):
                        warnings.warn(
                            f"{variant} f={fraction} lr={lr} wd={wd}: "
                            f"{len(runs) - len(ok)} diverged run(s) excluded"
                        )
                    if ok:
                        by_setting[(lr, wd)] = ok
            if not by_setting:
                cells[(variant, fraction)] = ReportCell(
                    variant, fraction, None, None, None, None, None, None, 0, missing=True
                )
                continue
            # highest mean OOD; ties -> smaller lr, then smaller wd
            best = min(
                by_setting,
                key=lambda k: (-float(np.mean([r["ood_metric"] for r in by_setting[k]])), k[0], k[1]),
            )
            ok = by_setting[best]
            mi, si = _mean_std([r["id_metric"] for r in ok])
            mo, so = _mean_std([r["ood_metric"] for r in ok])
            cells[(variant, fraction)] = ReportCell(
                variant, fraction, mi, si, mo, so, best[0], best[1], len(ok)
            )
    return ExperimentReport(config.metric, list(config.fractions), list(config.variants), cells, cfg_hash)


def _fmt(x: float | None) -> str:
    return "missing" if x is None else f"{x:.10g}"


def emit_report(report: ExperimentReport, outdir: str, formats=("csv", "json", "plotdata")) -> list[str]:
    """Write the sweep report as CSV (table layout, `mean±std` cells), JSON,
    and per-variant plot-data files. Returns the paths written."""
    os.makedirs(outdir, exist_ok=True)
    written = []
    if "json" in formats:
        path = os.path.join(outdir, "report.json")
        doc = {
            "metric": report.metric,
            "config_hash": report.config_hash,
            "fractions": report.fractions,
            "variants": report.variants,
            "cells": [asdict(report.cells[(v, f)]) for v in report.variants for f in report.fractions],
        }
        with open(path, "w") as f:
            json.dump(doc, f, sort_keys=True, indent=1)
        written.append(path)
    if "csv" in formats:
        path = os.path.join(outdir, "report.csv")
        with open(path, "w") as f:
            header = "variant," + ",".join(f"{100 * fr:g}%" for fr in report.fractions)
            for split in ("id", "ood"):
                f.write(f"# {split.upper()} {report.metric}\n")
                f.write(header + "\n")
                for v in report.variants:
                    row = [v]
                    for fr in report.fractions:
                        c = report.cells[(v, fr)]
                        if c.missing:
                            row.append("missing")
                        elif split == "id":
                            row.append(f"{c.mean_id:.1f}±{c.std_id:.1f}")
                        else:
                            row.append(f"{c.mean_ood:.1f}±{c.std_ood:.1f}")
                    f.write(",".join(row) + "\n")
            f.write("# selected learning rates (by OOD)\n")
            f.write(header + "\n")
            for v in report.variants:
                row = [v]
                for fr in report.fractions:
                    c = report.cells[(v, fr)]
                    row.append(_fmt(c.selected_lr))
                f.write(",".join(row) + "\n")
        written.append(path)
    if "plotdata" in formats:
        for v in report.variants:
            path = os.path.join(outdir, f"plot_{v}.csv")
            with open(path, "w") as f:
                f.write("fraction,mean_id,std_id,mean_ood,std_ood\n")
                for fr in report.fractions:
                    c = report.cells[(v, fr)]
                    f.write(
                        ",".join(
                            [_fmt(fr), _fmt(c.mean_id), _fmt(c.std_id), _fmt(c.mean_ood), _fmt(c.std_ood)]
                        )
                        + "\n"
                    )
            written.append(path)
    return written


@dataclass
class ScalingRow:
    num_workers: int
    mean_epoch_seconds: float
    efficiency_percent: float
    final_loss: float
    epoch_losses: list[float]
    id_metric: float
    ood_metric: float


@dataclass
class ScalingStudyResult:
    rows: list[ScalingRow]


def run_scaling_study(
    config: ExperimentConfig,
    worker_counts: list[int],
    transport: str = "in_process",
) -> ScalingStudyResult:
    """Train the dual encoder data-parallel for each worker count with a
    linear warmup and worker-scaled learning rate; record per-epoch loss and
    time, final ID/OOD metrics, and scale efficiency relative to one worker."""
    if not worker_counts or worker_counts[0] != 1 or sorted(worker_counts) != list(worker_counts):
        raise NumericsError("worker_counts must be sorted ascending and start at 1")
    validate_schedule_windows(config.scaling_epochs, config.warmup_epochs, 0, 2)
    bundle = generate_dataset(config.dataset)
    images, caption_rows, _, _ = samples_to_arrays(bundle.train)
    captions = caption_matrix(config.dataset)

    def make_model():
        return build_dual_encoder(config, 91000)

    def dp_loss(model, x, t):
        value, grads = clip_loss_and_grads(model, x, t)
        return value.total, grads

    rows: list[ScalingRow] = []
    t1 = None
    for k in worker_counts:
        policy = WarmupScalingPolicy(config.scaling_base_lr, k, config.warmup_epochs)

        def lr_fn(epoch, step, steps_per_epoch, _policy=policy):
            return warmup_lr(epoch, step, _policy, steps_per_epoch)

        result = data_parallel_train(
            make_model,
            dp_loss,
            images,
            caption_rows,
            num_workers=k,
            epochs=config.scaling_epochs,
            opt_config=OptimizerConfig(
                config.scaling_base_lr, config.momentum, 0.0, config.scaling_per_worker_batch
            ),
            lr_fn=lr_fn,
            per_worker_batch=config.scaling_per_worker_batch,
            seed=config.dataset.seed,
            transport=transport,
            timeout=config.timeout_secs,
            check_synchrony=False,
        )
        mean_t = float(np.mean(result.epoch_seconds))
        if t1 is None:
            t1 = mean_t
        eff = scale_efficiency(TimingRecord(t1, mean_t, k))
        model = make_model()
        model.set_params(result.params)
        id_m = _evaluate(model, bundle.id_test, config, True, captions)
        ood_m = _evaluate(model, bundle.ood_test, config, True, captions)
        rows.append(
            ScalingRow(k, mean_t, eff, result.epoch_losses[-1], result.epoch_losses, id_m, ood_m)
        )
    return ScalingStudyResult(rows)


def emit_scaling_report(result: ScalingStudyResult, outdir: str) -> list[str]:
    os.makedirs(outdir, exist_ok=True)
    written = []
    path = os.path.join(outdir, "scaling.json")
    with open(path, "w") as f:
        json.dump({"rows": [asdict(r) for r in result.rows]}, f, sort_keys=True, indent=1)
    written.append(path)
    path = os.path.join(outdir, "scaling.csv")
    with open(path, "w") as f:
        f.write("workers,mean_epoch_seconds,efficiency_percent,final_loss,id_metric,ood_metric\n")
        for r in result.rows:
            f.write(
                f"{r.num_workers},{_fmt(r.mean_epoch_seconds)},{_fmt(r.efficiency_percent)},"
                f"{_fmt(r.final_loss)},{_fmt(r.id_metric)},{_fmt(r.ood_metric)}\n"
            )
    written.append(path)
    return written
