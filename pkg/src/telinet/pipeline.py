"""Training, evaluation and series-level prediction."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import os
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .dataset import (
    DatasetIndex,
    ImageLoader,
    batches,
    scan_split,
    scan_test_series,
)
from .metrics import (
    ConfusionCounts,
    EvalReport,
    compute_report,
    majority_vote,
    threshold_predictions,
)
from .models import Model, TeliNetConfig, VGG16Config, build_telinet, build_vgg16
from .optim import LrSchedule, RMSprop, bce_loss
from .tensor import NumericalError, strict_deterministic

logger = logging.getLogger(__name__)

MODELS = ("telinet", "vgg16")


@dataclass
class TrainConfig:
    model: str = "telinet"
    data_root: str | os.PathLike = "."
    epochs: int | None = None
    batch_size: int = 32
    initial_lr: float = 1e-3
    lr_decay: float = 0.7
    seed: int = 0
    dropout_rate: float = 0.10
    dropout_after_both_dense: bool = True
    leaky_alpha: float = 0.3
    out_dir: str | os.PathLike | None = None
    threshold: float = 0.5
    channels: int | None = None
    deterministic: bool = False
    workers: int = 0
    prefetch: int = 1
    verbose: bool = False

    def validate(self) -> None:
        problems = []
        if self.model not in MODELS:
            problems.append(f"model must be one of {MODELS}, got {self.model!r}")
        if self.epochs is None or self.epochs < 0:
            problems.append(f"epochs must be given and >= 0, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.initial_lr <= 0:
            problems.append(f"initial learning rate must be positive, got {self.initial_lr}")
        if not 0 < self.lr_decay <= 1:
            problems.append(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if not 0 <= self.dropout_rate < 1:
            problems.append(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.leaky_alpha < 0:
            problems.append(f"leaky_alpha must be >= 0, got {self.leaky_alpha}")
        if not 0 <= self.threshold <= 1:
            problems.append(f"threshold must be in [0, 1], got {self.threshold}")
        if self.channels not in (None, 1, 3):
            problems.append(f"channels must be 1 or 3, got {self.channels}")
        if self.seed < 0:
            problems.append(f"seed must be >= 0, got {self.seed}")
        if self.workers < 0 or self.prefetch < 0:
            problems.append("workers and prefetch must be >= 0")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    learning_rate: float
    wall_time: float
    validation: EvalReport
    validation_series: EvalReport | None = None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "learning_rate": self.learning_rate,
            "wall_time": self.wall_time,
            "validation": self.validation.to_dict(),
            "validation_series": self.validation_series.to_dict() if self.validation_series else None,
        }


@dataclass
class TrainResult:
    model: Model
    logs: list[EpochLog]
    checkpoints: list[Path] = field(default_factory=list)
    best_checkpoint: Path | None = None


@dataclass(frozen=True)
class SlicePrediction:
    path: str
    probability: float
    predicted: int
    true: int


@dataclass
class Evaluation:
    report: EvalReport
    predictions: list[SlicePrediction]
    series_report: EvalReport | None = None


@dataclass(frozen=True)
class SeriesPrediction:
    series_id: str
    covid_vote_count: int
    noncovid_vote_count: int
    series_label: int
    tie_flag: bool


def build_from_config(config: TrainConfig) -> Model:
    if config.model == "telinet":
        return build_telinet(config.seed, TeliNetConfig(
            channels=config.channels or 1,
            leaky_alpha=config.leaky_alpha,
            dropout_rate=config.dropout_rate,
            dropout_after_both_dense=config.dropout_after_both_dense,
        ))
    return build_vgg16(config.seed, VGG16Config(channels=config.channels or 3))


def _loader_for(model: Model, config: TrainConfig) -> ImageLoader:
    channels, size, _ = model.spec.input_shape
    workers = 0 if config.deterministic else config.workers
    return ImageLoader(target_size=size, channels=channels, workers=workers, prefetch=config.prefetch)


def _deterministic_scope(config: TrainConfig):
    return strict_deterministic() if config.deterministic else contextlib.nullcontext()


def predict_probabilities(model: Model, paths: Sequence[Path], config: TrainConfig) -> np.ndarray:
    """Inference-mode sigmoid outputs for ``paths``, in order."""
    loader = _loader_for(model, config)
    groups = [list(paths[i:i + config.batch_size]) for i in range(0, len(paths), config.batch_size)]
    out = [model.forward(images, training=False)[:, 0] for images in loader.iter_batches(groups)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def _series_report(index: DatasetIndex, labels: np.ndarray, threshold: float) -> EvalReport | None:
    if not index.has_series:
        return None
    grouped: dict[tuple[int, str], list[int]] = {}
    for entry, label in zip(index.entries, labels):
        grouped.setdefault((entry.label, entry.series_id), []).append(int(label))
    counts = ConfusionCounts()
    for (true, _), votes in sorted(grouped.items()):
        counts.add(majority_vote(votes).label, true)
    return compute_report(counts, threshold)


def evaluate_index(model: Model, index: DatasetIndex, config: TrainConfig) -> Evaluation:
    probs = predict_probabilities(model, [e.path for e in index.entries], config)
    labels = threshold_predictions(probs, config.threshold)
    counts = ConfusionCounts()
    predictions = []
    for entry, p, label in zip(index.entries, probs, labels):
        counts.add(int(label), entry.label)
        predictions.append(SlicePrediction(str(entry.path), float(p), int(label), entry.label))
    return Evaluation(
        report=compute_report(counts, config.threshold),
        predictions=predictions,
        series_report=_series_report(index, labels, config.threshold),
    )


def evaluate(model: Model, dataset_root: str | os.PathLike, split: str,
             config: TrainConfig | None = None) -> Evaluation:
    """Score every slice of ``split`` in inference mode."""
    config = config or TrainConfig()
    index = scan_split(dataset_root, split)
    with _deterministic_scope(config):
        return evaluate_index(model, index, config)


def predict_series(model: Model, test_root: str | os.PathLike,
                   config: TrainConfig | None = None) -> list[SeriesPrediction]:
    """Majority-vote label for every series folder under ``test_root``."""
    config = config or TrainConfig()
    series = scan_test_series(test_root)
    rows = []
    with _deterministic_scope(config):
        for s in series:
            probs = predict_probabilities(model, s.slice_paths, config)
            vote = majority_vote(threshold_predictions(probs, config.threshold))
            rows.append(SeriesPrediction(s.series_id, vote.covid_votes, vote.noncovid_votes,
                                         vote.label, vote.tie))
    return rows


def train(config: TrainConfig) -> TrainResult:
    """Train with RMSprop + BCE, validating and checkpointing after every epoch.

    Raises:
        DatasetError: before any training if the layout is broken.
        NumericalError: on a non-finite loss, naming the epoch and batch.
    """
    config.validate()
    train_index = scan_split(config.data_root, "train")
    val_index = scan_split(config.data_root, "validation")
    model = build_from_config(config)
    schedule = LrSchedule(config.initial_lr, config.lr_decay)
    optimizer = RMSprop(learning_rate=schedule.lr_at_epoch(0))
    out_dir = Path(config.out_dir) if config.out_dir is not None else None
    result = TrainResult(model=model, logs=[])
    best_f1 = -1.0
    loader = _loader_for(model, config)
    logger.info("train: %s, validation: %s", train_index.class_counts, val_index.class_counts)

    with _deterministic_scope(config):
        for epoch in range(config.epochs):
            started = time.perf_counter()
            lr = schedule.lr_at_epoch(epoch)
            optimizer.learning_rate = lr
            model.reseed_dropout(epoch)
            losses = []
            for i, batch in enumerate(batches(train_index, config.batch_size, config.seed, epoch, loader)):
                try:
                    probs = model.forward(batch.images, training=True)
                    loss, grad = bce_loss(probs, batch.labels)
                    if not np.isfinite(loss):
                        raise NumericalError("loss is not finite")
                    model.backward(grad)
                except NumericalError as exc:
                    model.clear_caches()
                    raise NumericalError(f"epoch {epoch} batch {i}: {exc}") from None
                optimizer.step(model.parameters(), model.gradients())
                losses.append(loss)
                if config.verbose:
                    logger.info("epoch %d batch %d loss %.6f", epoch, i, loss)
            evaluation = evaluate_index(model, val_index, config)
            log = EpochLog(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                learning_rate=lr,
                wall_time=time.perf_counter() - started,
                validation=evaluation.report,
                validation_series=evaluation.series_report,
            )
            result.logs.append(log)
            logger.info("epoch %d lr %.3g loss %.5f val macro-F1 %.4f (%.1fs)", epoch, lr,
                        log.train_loss, log.validation.macro_f1, log.wall_time)
            if out_dir is not None:
                path = save_checkpoint(model, out_dir / f"epoch_{epoch + 1:03d}.ckpt", optimizer, epoch + 1)
                result.checkpoints.append(path)
                if log.validation.macro_f1 > best_f1:
                    best_f1 = log.validation.macro_f1
                    result.best_checkpoint = out_dir / "best.ckpt"
                    shutil.copyfile(path, result.best_checkpoint)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_data = {"config": _jsonable(config), "epochs": [log.to_dict() for log in result.logs]}
        (out_dir / "train_log.json").write_text(json.dumps(log_data, indent=2))
    return result


def _jsonable(config: TrainConfig) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in asdict(config).items()}


# ---------------------------------------------------------------------------
# File outputs
# ---------------------------------------------------------------------------

PREDICTION_FIELDS = ("path", "probability", "predicted", "true")
SERIES_FIELDS = ("series_id", "covid_vote_count", "noncovid_vote_count", "series_label", "tie_flag")


def write_predictions_csv(predictions: Sequence[SlicePrediction], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_FIELDS)
        for p in predictions:
            # repr() round-trips the float exactly.
            writer.writerow([p.path, repr(p.probability), p.predicted, p.true])


def read_predictions_csv(path: str | os.PathLike) -> list[SlicePrediction]:
    with open(path, newline="") as fh:
        return [SlicePrediction(row["path"], float(row["probability"]), int(row["predicted"]), int(row["true"]))
                for row in csv.DictReader(fh)]


def write_series_csv(rows: Sequence[SeriesPrediction], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SERIES_FIELDS)
        for r in rows:
            writer.writerow([r.series_id, r.covid_vote_count, r.noncovid_vote_count,
                             r.series_label, int(r.tie_flag)])


def write_report(report: EvalReport, stem: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``<stem>.txt`` (key=value) and ``<stem>.json``."""
    stem = Path(stem)
    txt, js = stem.with_suffix(".txt"), stem.with_suffix(".json")
    txt.write_text(report.to_text())
    js.write_text(report.to_json())
    return txt, js
