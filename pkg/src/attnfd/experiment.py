"""
Run directories and the multi-seed comparison driver.

Each run directory holds the effective ``config.txt``, a checkpoint, the
per-epoch metric log, ``metrics.txt`` (key=value) and ``report.txt``.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .checkpoint import config_digest, load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import DataSplits, load_split, synthetic_splits
from .distillation import METHODS, TAP_NAMES, parse_taps
from .errors import ConfigurationError
from .metrics import MetricsReport, aggregate_runs, format_report, read_metrics_file, write_metrics_file
from .training import TrainingRun, distill_student, train_teacher

logger = logging.getLogger(__name__)

TEACHER_CKPT = "teacher.afd"
STUDENT_CKPT = "student.afd"
METRIC_LOG = "epochs.tsv"
METRICS_FILE = "metrics.txt"
REPORT_FILE = "report.txt"
SUMMARY_FILE = "summary.txt"
DEFAULT_VARIANTS = ("none", "attnfd:B,E,D")


def load_data(cfg: RunConfig) -> DataSplits:
    """Manifest-backed splits when configured, otherwise synthetic shapes."""
    train_manifest = cfg.get_str("data.train_manifest")
    val_manifest = cfg.get_str("data.val_manifest")
    k = cfg.get_int("data.classes")
    if train_manifest:
        val = load_split(val_manifest, k) if val_manifest else []
        return DataSplits(train=load_split(train_manifest, k), val=val)
    return synthetic_splits(
        cfg.shapes_spec(), cfg.get_int("data.train_count"), cfg.get_int("data.val_count")
    )


def prepare_run_dir(cfg: RunConfig, run_dir: Union[str, Path]) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.echo(run_dir)
    return run_dir


def _finish(run: TrainingRun, run_dir: Path, ckpt_name: str) -> TrainingRun:
    save_checkpoint(run.checkpoint, run_dir / ckpt_name)
    if run.report is not None:
        write_metrics_file(run_dir / METRICS_FILE, run.report)
        (run_dir / REPORT_FILE).write_text(format_report(run.report))
    return run


def run_teacher(cfg: RunConfig, run_dir: Union[str, Path], data: Optional[DataSplits] = None) -> TrainingRun:
    run_dir = prepare_run_dir(cfg, run_dir)
    data = data if data is not None else load_data(cfg)
    run = train_teacher(
        cfg.train_config("teacher"),
        cfg.teacher_net(),
        data,
        config_digest(cfg.text()),
        log_path=run_dir / METRIC_LOG,
    )
    return _finish(run, run_dir, TEACHER_CKPT)


def run_student(
    cfg: RunConfig,
    teacher_path: Union[str, Path],
    run_dir: Union[str, Path],
    data: Optional[DataSplits] = None,
) -> TrainingRun:
    run_dir = prepare_run_dir(cfg, run_dir)
    teacher = load_checkpoint(teacher_path)
    data = data if data is not None else load_data(cfg)
    run = distill_student(
        cfg.train_config("student"),
        teacher,
        cfg.student_net(),
        data,
        config_digest(cfg.text()),
        log_path=run_dir / METRIC_LOG,
    )
    return _finish(run, run_dir, STUDENT_CKPT)


@dataclass(frozen=True)
class Variant:
    method: str
    taps: Tuple[str, ...] = TAP_NAMES

    @property
    def name(self) -> str:
        if self.method in ("none", "kd"):
            return self.method
        return f"{self.method}-{''.join(self.taps)}"


def parse_variant(text: str) -> Variant:
    """``method`` or ``method:TAPS`` such as ``attnfd:B,E,D``."""
    method, _, taps = text.partition(":")
    method = method.strip()
    if method not in METHODS:
        raise ConfigurationError(f"Unknown method {method!r} in variant {text!r}")
    return Variant(method, parse_taps(taps) if taps else TAP_NAMES)


def collect_reports(run_dirs: Sequence[Union[str, Path]]) -> List[MetricsReport]:
    return [read_metrics_file(Path(d) / METRICS_FILE) for d in run_dirs]


def format_summary(results: Dict[str, MetricsReport]) -> str:
    """One row per variant: mean +- std mIoU and mean per-class IoU."""
    k = max((len(r.per_class) for r in results.values()), default=0)
    header = f"{'variant':<16} {'mIoU(%)':>16} {'acc(%)':>8}" + "".join(f" {'c' + str(c):>7}" for c in range(k))
    lines = [header]
    for name, r in results.items():
        cells = "".join(" " + (f"{100 * v:7.2f}" if v is not None else f"{'-':>7}") for v in r.per_class)
        miou_cell = f"{100 * r.miou:.2f} +- {100 * r.std:.2f}"
        lines.append(f"{name:<16} {miou_cell:>16} {100 * r.accuracy:8.2f}{cells}")
    return "\n".join(lines) + "\n"


def run_experiment(
    cfg: RunConfig,
    out_dir: Union[str, Path],
    seeds: Sequence[int] = (0, 1, 2),
    variants: Sequence[Variant] = tuple(parse_variant(v) for v in DEFAULT_VARIANTS),
) -> Dict[str, MetricsReport]:
    """Train one teacher, then every student variant once per seed."""
    if not seeds:
        raise ConfigurationError("At least one seed is required")
    out_dir = Path(out_dir)
    data = load_data(cfg)
    teacher_dir = out_dir / "teacher"
    run_teacher(cfg, teacher_dir, data)

    results: Dict[str, MetricsReport] = {}
    for variant in variants:
        run_dirs = []
        for seed in seeds:
            run_cfg = cfg.with_overrides(
                {"seed": str(seed), "method": variant.method, "taps": ",".join(variant.taps)}
            )
            run_dir = out_dir / variant.name / f"seed{seed}"
            logger.info(f"Running {variant.name} with seed {seed}")
            run_student(run_cfg, teacher_dir / TEACHER_CKPT, run_dir, data)
            run_dirs.append(run_dir)
        aggregate = aggregate_runs(collect_reports(run_dirs))
        write_metrics_file(out_dir / variant.name / METRICS_FILE, aggregate)
        results[variant.name] = aggregate

    (out_dir / SUMMARY_FILE).write_text(format_summary(results))
    return results
