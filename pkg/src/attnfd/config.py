"""
Flat key=value run configuration.

Every key has a default below; unknown keys are rejected so a typo never
silently falls back to a default.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

from .dataset import AugmentPolicy, ShapesSpec
from .distillation import DistillConfig, parse_taps
from .errors import ConfigurationError, MissingFileError
from .segnet import SegNetConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)

DEFAULTS: Dict[str, str] = {
    "seed": "0",
    "method": "attnfd",
    "taps": "B,E,D",
    "data.seed": "0",
    "data.canvas": "64",
    "data.classes": "4",
    "data.train_count": "512",
    "data.val_count": "128",
    "data.min_shapes": "1",
    "data.max_shapes": "3",
    "data.noise": "0.05",
    "data.color_jitter": "0.25",
    "data.train_manifest": "",
    "data.val_manifest": "",
    "augment.scale_min": "0.5",
    "augment.scale_max": "2.0",
    "augment.flip_prob": "0.5",
    "augment.crop": "64",
    "net.teacher_widths": "32,64,128",
    "net.student_widths": "8,16,32",
    "net.reduction": "8",
    "train.lr0": "0.05",
    "train.lr_min": "0.0",
    "train.momentum": "0.9",
    "train.weight_decay": "0.0",
    "train.epochs": "30",
    "train.calibration_epochs": "5",
    "train.batch_size": "16",
    "train.eval_every": "1",
    "train.prefetch_workers": "0",
    "distill.epochs": "30",
    "distill.alpha": "2.0",
    "distill.kd_temperature": "4.0",
    "distill.at_power": "2",
    "distill.normalize": "channel",
}


@dataclass
class RunConfig:
    values: Dict[str, str] = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = dict(DEFAULTS)
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
            values[key] = value
        return cls(values)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise MissingFileError(f"No such config file: {path}")
        return cls.parse(path.read_text(), str(path))

    def with_overrides(self, overrides: Mapping[str, Optional[str]]) -> "RunConfig":
        values = dict(self.values)
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in DEFAULTS:
                raise ConfigurationError(f"Unknown override key {key!r}")
            values[key] = str(value)
        return RunConfig(values)

    def text(self) -> str:
        """The effective configuration, one pair per line in a fixed order."""
        return "".join(f"{key}={self.values[key]}\n" for key in DEFAULTS)

    def echo(self, run_dir: Union[str, Path]) -> Path:
        path = Path(run_dir) / "config.txt"
        path.write_text(self.text())
        logger.debug(f"Effective config written to {path}")
        return path

    def _convert(self, key: str, kind):
        value = self.values[key]
        try:
            return kind(value)
        except ValueError as e:
            raise ConfigurationError(f"{key}={value!r} is not a valid {kind.__name__}") from e

    def get_str(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        return self._convert(key, int)

    def get_float(self, key: str) -> float:
        return self._convert(key, float)

    def get_ints(self, key: str) -> Tuple[int, ...]:
        value = self.values[key]
        try:
            return tuple(int(v) for v in value.split(",") if v.strip())
        except ValueError as e:
            raise ConfigurationError(f"{key}={value!r} is not a comma-separated integer list") from e

    @property
    def seed(self) -> int:
        return self.get_int("seed")

    def shapes_spec(self) -> ShapesSpec:
        return ShapesSpec(
            canvas=self.get_int("data.canvas"),
            num_classes=self.get_int("data.classes"),
            min_shapes=self.get_int("data.min_shapes"),
            max_shapes=self.get_int("data.max_shapes"),
            noise=self.get_float("data.noise"),
            color_jitter=self.get_float("data.color_jitter"),
            seed=self.get_int("data.seed"),
        )

    def _net(self, key: str) -> SegNetConfig:
        widths = self.get_ints(key)
        return SegNetConfig(
            num_classes=self.get_int("data.classes"),
            widths=widths,
            depth=len(widths),
            reduction=self.get_int("net.reduction"),
        )

    def teacher_net(self) -> SegNetConfig:
        return self._net("net.teacher_widths")

    def student_net(self) -> SegNetConfig:
        return self._net("net.student_widths")

    def augment_policy(self) -> AugmentPolicy:
        crop = self.get_int("augment.crop")
        return AugmentPolicy(
            crop=(crop, crop),
            scale_range=(self.get_float("augment.scale_min"), self.get_float("augment.scale_max")),
            flip_prob=self.get_float("augment.flip_prob"),
        )

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            alpha=self.get_float("distill.alpha"),
            taps=parse_taps(self.get_str("taps")),
            method=self.get_str("method"),
            kd_temperature=self.get_float("distill.kd_temperature"),
            at_power=self.get_int("distill.at_power"),
            normalize=self.get_str("distill.normalize"),
        )

    def train_config(self, phase: str = "teacher") -> TrainConfig:
        """Optimizer settings for the teacher or the student phase."""
        if phase not in ("teacher", "student"):
            raise ValueError(f"Unknown training phase {phase!r}")
        epochs_key = "train.epochs" if phase == "teacher" else "distill.epochs"
        return TrainConfig(
            lr0=self.get_float("train.lr0"),
            lr_min=self.get_float("train.lr_min"),
            momentum=self.get_float("train.momentum"),
            weight_decay=self.get_float("train.weight_decay"),
            epochs=self.get_int(epochs_key),
            calibration_epochs=self.get_int("train.calibration_epochs"),
            batch_size=self.get_int("train.batch_size"),
            seed=self.seed,
            eval_every=self.get_int("train.eval_every"),
            prefetch_workers=self.get_int("train.prefetch_workers"),
            augment=self.augment_policy(),
            distill=self.distill_config(),
        )
