"""
Training loop: seeded shuffles, optional adaptive augmentation, EMA state
updates and plain SGD with global-norm gradient clipping on the combined
objective. A non-finite loss or parameter stops training with TrainingError.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from backend.data.augmentation import AugGains, NoiseSeed, augment_batch
from backend.data.loader import ManifestLoader
from backend.errors import ArgumentError, DatasetIOError, TrainingError
from detector.contracts import ImageRecord, LossBreakdown
from detector.evaluator import evaluate_model
from detector.models import EvalConfig, ModelParams, TrainConfig, clip_by_global_norm
from detector.objective import DetectorStates, advance_states, prepare_batch, total_loss
from detector.snapshot import Snapshot

logger = logging.getLogger(__name__)

# Spawn keys of the independent random streams
INIT_STREAM, SHUFFLE_STREAM, NOISE_STREAM = 0, 1, 2


@dataclass
class EpochRecord:
    epoch: int
    losses: Dict[str, float]
    validation: Optional[Dict[str, float]] = None
    wall_time_s: float = 0.0


@dataclass
class TrainingLog:
    epochs: List[EpochRecord] = field(default_factory=list)
    iterations: List[Dict[str, float]] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(record), sort_keys=True) + "\n" for record in self.epochs)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_jsonl(), encoding="utf-8")
        except OSError as e:
            raise DatasetIOError(f"Failed to write training log {path}: {e}", str(path)) from e
        return path


@dataclass
class TrainResult:
    params: ModelParams
    states: DetectorStates
    log: TrainingLog
    epochs_completed: int

    def snapshot(self, config: TrainConfig) -> Snapshot:
        return Snapshot(self.params, self.states, config, self.epochs_completed)


def stream_seed(seed: int, stream: int, *extra: int) -> np.random.SeedSequence:
    """Independent SeedSequence per purpose so toggles never shift another stream"""
    return np.random.SeedSequence(seed, spawn_key=(stream, *extra))


def initial_params(config: TrainConfig) -> ModelParams:
    return ModelParams.initialize(config, np.random.default_rng(stream_seed(config.seed, INIT_STREAM)))


def epoch_order(n: int, config: TrainConfig, epoch: int) -> np.ndarray:
    return np.random.default_rng(stream_seed(config.seed, SHUFFLE_STREAM, epoch)).permutation(n)


def check_finite(breakdown: LossBreakdown, params: ModelParams, step: int) -> None:
    """Raise TrainingError when the loss or any parameter block stopped being finite"""
    if not np.isfinite(breakdown.total):
        terms = " ".join(f"{k}={v}" for k, v in breakdown.as_dict().items())
        raise TrainingError(f"Non-finite loss at step {step}: {terms}")
    bad = params.non_finite_blocks()
    if bad:
        raise TrainingError(f"Non-finite parameters after step {step}: {', '.join(bad)}")


def train_step(
    images, annotations, params: ModelParams, states: DetectorStates, config: TrainConfig, step: int
):
    """
    One iteration: AA, features, ES updates and losses, CR update and loss,
    gradient clipping and SGD.

    Returns:
        Tuple[ModelParams, DetectorStates, LossBreakdown]
    """
    if config.use_aa:
        noise = NoiseSeed(int(stream_seed(config.seed, NOISE_STREAM).generate_state(1)[0]))
        gains = AugGains(k1=config.k1, k2=config.k2, k3=config.k3)
        images, aug_state = augment_batch(images, states.aug, gains, noise.spawn(step))
        states = DetectorStates(aug=aug_state, stabilizer=states.stabilizer, context=states.context)

    batch = prepare_batch(images, annotations, params, states, config)
    states = advance_states(batch, params, states, config)
    breakdown, grads = total_loss(batch, params, states, config)
    check_finite(breakdown, params, step)
    grads, norm = clip_by_global_norm(grads, config.max_grad_norm)
    if config.max_grad_norm is not None and norm > config.max_grad_norm:
        logger.debug(f"step {step}: gradient norm {norm:.4f} clipped to {config.max_grad_norm}")
    updated = params.sgd_step(grads, config.learning_rate)
    check_finite(breakdown, updated, step)
    return updated, states, breakdown


def _mean_breakdown(breakdowns: Sequence[LossBreakdown]) -> Dict[str, float]:
    keys = breakdowns[0].as_dict().keys()
    return {key: float(np.mean([b.as_dict()[key] for b in breakdowns])) for key in keys}


def train(
    records: Sequence[ImageRecord],
    config: TrainConfig,
    loader: ManifestLoader,
    val_records: Optional[Sequence[ImageRecord]] = None,
    eval_config: Optional[EvalConfig] = None,
    resume: Optional[Snapshot] = None,
) -> TrainResult:
    """
    Train the detector on the given records.

    Args:
        records (Sequence[ImageRecord]): Training images
        config (TrainConfig): Hyperparameters and component toggles
        loader (ManifestLoader): Image source
        val_records (Optional[Sequence[ImageRecord]]): Scored after every epoch when given
        eval_config (Optional[EvalConfig]): Validation settings
        resume (Optional[Snapshot]): Continue from these params and states

    Returns:
        TrainResult: final params, states and the training log
    """
    if len(records) == 0:
        raise ArgumentError("train needs at least one record")
    # Decode everything up front so I/O errors surface before the first step
    images = [loader.load_image(record) for record in records]
    if val_records:
        for record in val_records:
            loader.load_image(record)

    if resume is not None:
        params, states, start_epoch = resume.params.copy(), resume.states, resume.epochs_completed
        logger.info(f"Resuming after {start_epoch} epochs")
    else:
        params, states, start_epoch = initial_params(config), DetectorStates.fresh(config), 0

    log = TrainingLog()
    n_batches = int(np.ceil(len(records) / config.batch_size))
    for epoch in range(start_epoch, start_epoch + config.epochs):
        started = time.perf_counter()
        order = epoch_order(len(records), config, epoch)
        breakdowns = []
        for b in range(n_batches):
            chosen = order[b * config.batch_size : (b + 1) * config.batch_size]
            step = epoch * n_batches + b
            params, states, breakdown = train_step(
                [images[i] for i in chosen],
                [records[i].annotations for i in chosen],
                params,
                states,
                config,
                step,
            )
            breakdowns.append(breakdown)
            log.iterations.append({"step": step, **breakdown.as_dict()})
            logger.debug(f"step {step}: " + " ".join(f"{k}={v:.6f}" for k, v in breakdown.as_dict().items()))

        validation = None
        if val_records:
            metrics = evaluate_model(params, states, val_records, loader, config, eval_config or EvalConfig())
            validation = {"map": metrics.map, "precision": metrics.precision, "recall": metrics.recall, "f1": metrics.f1}

        losses = _mean_breakdown(breakdowns)
        log.epochs.append(
            EpochRecord(epoch=epoch, losses=losses, validation=validation, wall_time_s=time.perf_counter() - started)
        )
        logger.info(f"epoch {epoch} [{config.components}]: total={losses['total']:.6f}")

    return TrainResult(params=params, states=states, log=log, epochs_completed=start_epoch + config.epochs)
