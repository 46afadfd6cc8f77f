import os

# Thread caps must be in the environment before numpy loads its BLAS.
_threads = os.environ.get("AFD_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import logging  # noqa: E402
import subprocess  # noqa: E402
import sys  # noqa: E402
from dataclasses import dataclass  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import List, Optional  # noqa: E402

from .version import __version__  # noqa: E402


@dataclass
class GitInfo:
    commit_hash: str
    is_dirty: bool


def get_git_info() -> Optional[GitInfo]:
    try:
        commit_hash = (
            subprocess.check_output(["git", "rev-parse", "--short", "HEAD"], stderr=subprocess.DEVNULL)
            .strip()
            .decode("utf-8")
        )
        status = (
            subprocess.check_output(["git", "status", "--porcelain"], stderr=subprocess.DEVNULL)
            .strip()
            .decode("utf-8")
        )
        return GitInfo(commit_hash, bool(status))
    except (subprocess.CalledProcessError, FileNotFoundError):
        return None


def setup_logging(verbosity: int) -> int:
    """Configure logging."""
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    else:
        level = logging.WARNING

    logging.basicConfig(
        level=level, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )
    return level


def report_error(category: str, code: int, message: str) -> None:
    text = " ".join(str(message).split())
    print(f"error category={category} code={code} message={text}", file=sys.stderr)


def _run_config(args: argparse.Namespace):
    from .config import RunConfig

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_overrides({"seed": None if args.seed is None else str(args.seed)})


def cmd_gen_data(args: argparse.Namespace) -> int:
    from .dataset import generate, save_sample, write_manifest
    from .experiment import prepare_run_dir

    cfg = _run_config(args)
    if args.seed is not None:
        cfg = cfg.with_overrides({"data.seed": str(args.seed)})
    out = prepare_run_dir(cfg, args.out)
    spec = cfg.shapes_spec()
    counts = {
        "train": cfg.get_int("data.train_count") if args.train_count is None else args.train_count,
        "val": cfg.get_int("data.val_count") if args.val_count is None else args.val_count,
    }
    start = 0
    for split, count in counts.items():
        (out / split).mkdir(exist_ok=True)
        pairs = []
        for index in range(start, start + count):
            image, label = f"{split}/{index:05d}.ppm", f"{split}/{index:05d}.pgm"
            save_sample(generate(spec, index), out / image, out / label)
            pairs.append((image, label))
        write_manifest(out / f"{split}.txt", pairs)
        start += count
        logging.getLogger("attnfd").info(f"Wrote {count} {split} samples to {out / split}")
    return 0


def cmd_train_teacher(args: argparse.Namespace) -> int:
    from .experiment import run_teacher
    from .metrics import format_report

    run = run_teacher(_run_config(args), args.out)
    if run.report is not None:
        print(format_report(run.report), end="")
    return 0


def cmd_distill(args: argparse.Namespace) -> int:
    from .experiment import run_student
    from .metrics import format_report

    run = run_student(_run_config(args), args.teacher, args.out)
    if run.report is not None:
        print(format_report(run.report), end="")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .checkpoint import config_digest, load_checkpoint, restore_network
    from .config import RunConfig
    from .dataset import load_split
    from .experiment import METRICS_FILE, REPORT_FILE, load_data
    from .metrics import MetricsReport, format_report, write_metrics_file
    from .training import evaluate

    cfg = RunConfig.load(args.config) if args.config else None
    digest = config_digest(cfg.text()) if cfg is not None else None
    ckpt = load_checkpoint(args.checkpoint, expected_digest=digest, force=args.force)
    net = restore_network(ckpt)
    if args.manifest:
        samples = load_split(args.manifest, net.cfg.num_classes)
    else:
        samples = load_data(cfg or RunConfig()).val
    report = MetricsReport.from_confusion(evaluate(net, samples, args.batch_size))
    text = format_report(report)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_file(out / METRICS_FILE, report)
        (out / REPORT_FILE).write_text(text)
    return 0


def cmd_viz_attn(args: argparse.Namespace) -> int:
    from .checkpoint import load_checkpoint
    from .viz import export_heatmaps

    export_heatmaps(load_checkpoint(args.checkpoint), args.image, args.out)
    return 0


def cmd_aggregate(args: argparse.Namespace) -> int:
    from .experiment import collect_reports
    from .metrics import aggregate_runs, format_report, write_metrics_file

    report = aggregate_runs(collect_reports(args.runs))
    print(format_report(report), end="")
    if args.out:
        write_metrics_file(args.out, report)
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    from .experiment import DEFAULT_VARIANTS, format_summary, parse_variant, run_experiment

    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    variants = [parse_variant(v) for v in (args.variants or DEFAULT_VARIANTS)]
    results = run_experiment(_run_config(args), args.out, seeds, variants)
    print(format_summary(results), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Attention-guided feature distillation for semantic segmentation"
    )
    parser.add_argument("--version", action="store_true", help="Show version and exit")
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="Increase verbosity (-v INFO, -vv DEBUG)"
    )
    sub = parser.add_subparsers(dest="command")

    run_opts = argparse.ArgumentParser(add_help=False)
    run_opts.add_argument("--config", help="Run config file (key=value)")
    run_opts.add_argument("--seed", type=int, help="Override the config seed")
    run_opts.add_argument("--out", required=True, help="Run directory")

    p = sub.add_parser("gen-data", parents=[run_opts], help="Write a synthetic shapes dataset")
    p.add_argument("--train-count", type=int, help="Override data.train_count")
    p.add_argument("--val-count", type=int, help="Override data.val_count")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", parents=[run_opts], help="Train and calibrate a teacher")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", parents=[run_opts], help="Train a student against a teacher")
    p.add_argument("--teacher", required=True, help="Teacher checkpoint")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="Evaluate a checkpoint")
    p.add_argument("checkpoint", help="Checkpoint file")
    p.add_argument("--manifest", help="Image/label manifest (default: the config's validation split)")
    p.add_argument("--config", help="Config the checkpoint was trained with (digest is checked)")
    p.add_argument("--force", action="store_true", help="Load despite a config digest mismatch")
    p.add_argument("--batch-size", type=int, default=16, help="Evaluation batch size (default: 16)")
    p.add_argument("--out", help="Directory for metrics.txt and report.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz-attn", help="Write attention heatmaps for one image")
    p.add_argument("checkpoint", help="Checkpoint file")
    p.add_argument("image", help="PPM image")
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(func=cmd_viz_attn)

    p = sub.add_parser("aggregate", help="Mean and std over run directories")
    p.add_argument("runs", nargs="+", help="Run directories holding metrics.txt")
    p.add_argument("--out", help="Write the aggregate as a metrics file")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("experiment", parents=[run_opts], help="Teacher plus multi-seed student variants")
    p.add_argument("--seeds", default="0,1,2", help="Comma-separated student seeds (default: 0,1,2)")
    p.add_argument(
        "--variant",
        dest="variants",
        action="append",
        help="method or method:TAPS, repeatable (default: none and attnfd:B,E,D)",
    )
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    logger = logging.getLogger("attnfd")

    if args.version:
        git_info = get_git_info()
        version_str = f"attnfd {__version__}"
        if git_info:
            version_str += f" (git: {git_info.commit_hash}{' dirty' if git_info.is_dirty else ''})"
        print(version_str)
        return 0

    if not getattr(args, "func", None):
        parser.print_help()
        return 0

    from .errors import AttnFDError

    try:
        return args.func(args)
    except AttnFDError as e:
        report_error(e.category, e.exit_code, str(e))
        return e.exit_code
    except FileNotFoundError as e:
        report_error("missing-file", 4, str(e))
        return 4
    except KeyboardInterrupt:
        return 0
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        report_error("internal", 1, f"{type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
