"""
Optimization: cosine-annealed SGD, teacher training with attention
calibration, and student distillation against a frozen teacher.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .attention import CbamParams, cbam_refine
from .checkpoint import (
    Checkpoint,
    cbam_blocks,
    network_blocks,
    restore_network,
    tap_blocks,
)
from .dataset import AugmentPolicy, DataSplits, Sample
from .distillation import TAP_NAMES, DistillConfig, TapSet, distillation_term, total_loss
from .errors import CheckpointError, ConfigurationError, ContractError, NonFiniteError, TapMismatchError
from .metrics import ConfusionMatrix, MetricsReport
from .prefetch import Prefetcher
from .segnet import Network, SegNetConfig, build, forward_with_taps, freeze, predict, measure_tap_shapes
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "ce", "attn_loss", "total", "val_miou", "val_acc")


@dataclass
class TrainConfig:
    lr0: float = 0.05
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 30
    calibration_epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 1
    prefetch_workers: int = 0
    augment: Optional[AugmentPolicy] = field(default_factory=AugmentPolicy)
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self) -> None:
        if not self.lr0 > self.lr_min >= 0:
            raise ConfigurationError(f"Need lr0 > lr_min >= 0, got lr0={self.lr0}, lr_min={self.lr_min}")
        if self.epochs < 0 or self.calibration_epochs < 0:
            raise ConfigurationError("Epoch counts must be >= 0")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigurationError("batch_size and eval_every must be >= 1")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("momentum and weight_decay must be >= 0")

    @property
    def alpha(self) -> float:
        return self.distill.alpha

    @property
    def method(self) -> str:
        return self.distill.method

    @property
    def taps(self) -> Tuple[str, ...]:
        return self.distill.taps


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ContractError(f"cosine_lr needs 0 <= step <= total_steps >= 1, got {step}/{total_steps}")
    if step == 0:
        return lr0
    if step == total_steps:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    velocity: Optional[Dict[str, np.ndarray]] = None,
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """v <- momentum * v + grad + weight_decay * param; param <- param - lr * v."""
    velocity = {} if velocity is None else velocity
    updated, state = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ContractError(f"Gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = velocity.get(name)
        if v is not None and v.shape != p.shape:
            raise ContractError(f"Velocity for {name} has shape {v.shape}, parameter {p.shape}")
        v = g + weight_decay * p if v is None else momentum * v + g + weight_decay * p
        state[name] = v
        updated[name] = p - lr * v
    return updated, state


class SGD:
    """Momentum SGD over named trainable tensors."""

    def __init__(self, params: Mapping[str, Tensor], momentum: float, weight_decay: float) -> None:
        frozen = [name for name, p in params.items() if not p.requires_grad]
        if frozen:
            raise ContractError(f"Frozen parameters passed to the optimizer: {frozen}")
        self.params = dict(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        updated, self.velocity = sgd_step(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items() if p.grad is not None},
            lr,
            self.momentum,
            self.weight_decay,
            self.velocity,
        )
        for name, value in updated.items():
            self.params[name].data = value


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    ce: float
    attn_loss: float
    total: float
    val_miou: float = float("nan")
    val_acc: float = float("nan")

    def row(self) -> str:
        values = [str(self.epoch)] + [repr(float(getattr(self, c))) for c in LOG_COLUMNS[1:]]
        return "\t".join(values)


def write_metric_log(path: Union[str, Path], records: Sequence[EpochRecord]) -> None:
    lines = ["#" + "\t".join(LOG_COLUMNS)] + [r.row() for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class TrainingRun:
    checkpoint: Checkpoint
    records: List[EpochRecord]
    network: Network
    taps: Optional[TapSet] = None
    report: Optional[MetricsReport] = None


def batch_tensor(images: np.ndarray) -> Tensor:
    return Tensor(images)


def evaluate(
    net: Network,
    samples: Sequence[Sample],
    batch_size: int = 16,
    hooks=None,
) -> ConfusionMatrix:
    """Confusion matrix of un-augmented full-canvas predictions."""
    cm = ConfusionMatrix(net.cfg.num_classes)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        x = batch_tensor(np.stack([s.image for s in chunk]))
        if hooks:
            with T.no_grad():
                pred = forward_with_taps(net, x, hooks).logits.data.argmax(axis=1)
        else:
            pred = predict(net, x)
        cm.accumulate(pred, np.stack([s.label for s in chunk]))
    return cm


def _validation(net: Network, samples: Sequence[Sample], batch_size: int) -> Optional[MetricsReport]:
    if not samples:
        return None
    return MetricsReport.from_confusion(evaluate(net, samples, batch_size))


def _check_loss(loss: Tensor, step: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        logger.warning(f"Training diverged at step {step}")
        raise NonFiniteError("Training loss is not finite", step=step)
    return value


def _check_geometry(data: DataSplits, cfg: TrainConfig, *nets: SegNetConfig) -> None:
    multiple = max(2**n.depth for n in nets)
    sizes = {s.label.shape for s in data.train} | {s.label.shape for s in data.val}
    if cfg.augment is not None:
        sizes.add(tuple(cfg.augment.crop))
    for h, w in sizes:
        if h % multiple or w % multiple:
            raise ConfigurationError(f"Input size {h}x{w} is not divisible by {multiple}")


def _train_size(data: DataSplits, cfg: TrainConfig) -> Tuple[int, int]:
    """(h, w) of every training batch."""
    if cfg.augment is not None:
        return tuple(cfg.augment.crop)
    return tuple(data.train[0].label.shape)


def _run_epochs(
    params: Mapping[str, Tensor],
    cfg: TrainConfig,
    data: DataSplits,
    epochs: int,
    epoch_offset: int,
    step_loss,
    evaluate_fn,
    records: List[EpochRecord],
) -> None:
    """Shared SGD loop; ``step_loss`` maps a batch to (total, ce, attn) tensors."""
    if not epochs:
        return
    optimizer = SGD(params, cfg.momentum, cfg.weight_decay)
    steps_per_epoch = math.ceil(len(data.train) / cfg.batch_size)
    total_steps = epochs * steps_per_epoch
    step = 0
    with Prefetcher(data.train, cfg.augment, cfg.prefetch_workers) as prefetcher:
        for e in range(epochs):
            epoch = epoch_offset + e
            lr_first = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min)
            sums = np.zeros(3)
            batches = 0
            for batch in prefetcher.batches(cfg.seed, epoch, cfg.batch_size):
                lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min)
                total, ce, attn = step_loss(batch)
                value = _check_loss(total, step)
                optimizer.zero_grad()
                T.backward(total)
                optimizer.step(lr)
                sums += (ce.item(), attn.item() if attn is not None else 0.0, value)
                batches += 1
                step += 1
            ce_mean, attn_mean, total_mean = sums / max(batches, 1)
            record = EpochRecord(epoch + 1, lr_first, ce_mean, attn_mean, total_mean)
            if (e + 1) % cfg.eval_every == 0 or e + 1 == epochs:
                report = evaluate_fn()
                if report is not None:
                    record.val_miou, record.val_acc = report.miou, report.accuracy
            records.append(record)
            logger.info(
                f"epoch {record.epoch}: lr={record.lr:.5f} ce={record.ce:.4f} "
                f"attn={record.attn_loss:.4f} total={record.total:.4f} val_miou={record.val_miou:.4f}"
            )


def _metrics_dict(report: Optional[MetricsReport]) -> Dict[str, float]:
    if report is None:
        return {}
    metrics = {"val_miou": report.miou, "val_acc": report.accuracy}
    for k, v in enumerate(report.per_class):
        metrics[f"val_iou.{k}"] = float("nan") if v is None else v
    return metrics


def train_teacher(
    cfg: TrainConfig,
    net_cfg: SegNetConfig,
    data: DataSplits,
    digest: str,
    log_path: Optional[Union[str, Path]] = None,
) -> TrainingRun:
    """CE training, then in-path calibration of one attention block per tap
    with the network weights frozen."""
    _check_geometry(data, cfg, net_cfg)
    net = build(net_cfg, cfg.seed)
    records: List[EpochRecord] = []
    val = lambda: _validation(net, data.val, cfg.batch_size)  # noqa: E731

    def ce_step(batch):
        bundle = forward_with_taps(net, batch_tensor(batch.images))
        ce = T.softmax_cross_entropy(bundle.logits, batch.labels)
        return ce, ce, None

    logger.info(f"Training teacher widths={net_cfg.widths} for {cfg.epochs} epochs")
    _run_epochs(net.parameters(), cfg, data, cfg.epochs, 0, ce_step, val, records)

    freeze(net)
    shapes = measure_tap_shapes(net, _train_size(data, cfg))
    rng = np.random.default_rng([cfg.seed, 1])
    cbams = {name: CbamParams.initialize(shapes[name][0], net_cfg.reduction, rng) for name in TAP_NAMES}
    hooks = {name: (lambda f, c=cbam: cbam_refine(f, c)[0]) for name, cbam in cbams.items()}

    def calibration_step(batch):
        bundle = forward_with_taps(net, batch_tensor(batch.images), hooks)
        ce = T.softmax_cross_entropy(bundle.logits, batch.labels)
        return ce, ce, None

    calib_params = {f"{tap}.{k}": v for tap, c in cbams.items() for k, v in c.parameters().items()}
    calib_val = lambda: (  # noqa: E731
        MetricsReport.from_confusion(evaluate(net, data.val, cfg.batch_size, hooks)) if data.val else None
    )
    logger.info(f"Calibrating teacher attention for {cfg.calibration_epochs} epochs")
    _run_epochs(
        calib_params, cfg, data, cfg.calibration_epochs, cfg.epochs, calibration_step, calib_val, records
    )
    for cbam in cbams.values():
        cbam.freeze()

    report = _validation(net, data.val, cfg.batch_size)
    blocks = network_blocks(net)
    blocks.update(cbam_blocks(cbams))
    ckpt = Checkpoint(
        kind="teacher",
        net=net_cfg,
        digest=digest,
        blocks=blocks,
        taps=TAP_NAMES,
        metrics=_metrics_dict(report),
    )
    if log_path is not None:
        write_metric_log(log_path, records)
    return TrainingRun(checkpoint=ckpt, records=records, network=net, report=report)


def load_teacher(teacher_ckpt: Checkpoint) -> Network:
    if teacher_ckpt.kind != "teacher":
        raise CheckpointError(f"Expected a teacher checkpoint, got kind {teacher_ckpt.kind!r}")
    return freeze(restore_network(teacher_ckpt))


def build_taps(
    cfg: TrainConfig,
    teacher: Network,
    student: Network,
    teacher_ckpt: Checkpoint,
    size: Tuple[int, int],
) -> Optional[TapSet]:
    """Register every distillation tap; all shape problems surface here."""
    if cfg.method in ("none", "kd"):
        return None
    t_shapes = measure_tap_shapes(teacher, size)
    s_shapes = measure_tap_shapes(student, size)
    teacher_cbam = teacher_ckpt.teacher_cbam()
    if cfg.method == "attnfd":
        missing = [t for t in cfg.taps if t not in teacher_cbam]
        if missing:
            raise TapMismatchError(f"Teacher checkpoint has no calibrated attention for taps {missing}")
    rng = np.random.default_rng([cfg.seed, 2])
    return TapSet.build(
        cfg.taps,
        t_shapes,
        s_shapes,
        teacher.cfg.reduction,
        rng,
        teacher_cbam,
        student_attention=cfg.method == "attnfd",
    )


def distill_student(
    cfg: TrainConfig,
    teacher_ckpt: Checkpoint,
    student_cfg: SegNetConfig,
    data: DataSplits,
    digest: str,
    log_path: Optional[Union[str, Path]] = None,
) -> TrainingRun:
    teacher = load_teacher(teacher_ckpt)
    if teacher.cfg.num_classes != student_cfg.num_classes:
        raise ConfigurationError(
            f"Teacher predicts {teacher.cfg.num_classes} classes, student {student_cfg.num_classes}"
        )
    _check_geometry(data, cfg, teacher.cfg, student_cfg)
    student = build(student_cfg, cfg.seed)
    taps = build_taps(cfg, teacher, student, teacher_ckpt, _train_size(data, cfg))
    needs_teacher = cfg.method != "none" and cfg.alpha != 0
    names = taps.names if taps is not None else ()

    def distill_step(batch):
        x = batch_tensor(batch.images)
        s_bundle = forward_with_taps(student, x)
        ce = T.softmax_cross_entropy(s_bundle.logits, batch.labels)
        if not needs_teacher:
            return ce, ce, None
        with T.no_grad():
            t_bundle = forward_with_taps(teacher, x)
        attn = distillation_term(
            cfg.distill,
            taps,
            s_bundle.features(names),
            t_bundle.features(names),
            s_bundle.logits,
            t_bundle.logits,
        )
        return total_loss(ce, attn, cfg.distill), ce, attn

    params = student.parameters()
    if taps is not None:
        params.update({f"taps.{k}": v for k, v in taps.parameters().items()})
    records: List[EpochRecord] = []
    logger.info(
        f"Distilling student widths={student_cfg.widths} method={cfg.method} "
        f"alpha={cfg.alpha} taps={','.join(cfg.taps)} for {cfg.epochs} epochs"
    )
    _run_epochs(
        params,
        cfg,
        data,
        cfg.epochs,
        0,
        distill_step,
        lambda: _validation(student, data.val, cfg.batch_size),
        records,
    )

    report = _validation(student, data.val, cfg.batch_size)
    blocks = network_blocks(student)
    if taps is not None:
        blocks.update(tap_blocks(taps))
    ckpt = Checkpoint(
        kind="student",
        net=student_cfg,
        digest=digest,
        blocks=blocks,
        taps=names,
        method=cfg.method,
        metrics=_metrics_dict(report),
    )
    if log_path is not None:
        write_metric_log(log_path, records)
    return TrainingRun(checkpoint=ckpt, records=records, network=student, taps=taps, report=report)
