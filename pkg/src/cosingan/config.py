"""Serializable run configuration shared by the CLI and the experiment driver."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentPolicy
from .core import ConfigError, build_scale_schedule
from .data import PhantomSpec
from .evaluation import ProbeTrainConfig
from .losses import CategoryWeightMap, FeatureLossConfig, LossWeights
from .nets import ADD, CONCAT
from .synth import PAPER_DELTAS, check_deltas
from .trainer import StageTrainConfig, TrainerConfig


def _tuplify(v):
    if isinstance(v, (list, tuple)):
        return tuple(_tuplify(x) for x in v)
    return v


def _build(cls, d):
    """Instantiate a flat dataclass from a (possibly partial) dict; lists become tuples."""
    if d is None:
        return cls()
    if isinstance(d, cls):
        return d
    if not isinstance(d, dict):
        raise ConfigError(f"{cls.__name__}: expected an object, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    try:
        return cls(**{k: _tuplify(v) for k, v in d.items()})
    except TypeError as e:
        raise ConfigError(f"{cls.__name__}: {e}") from e


@dataclass(frozen=True)
class ScheduleParams:
    max_size: int = 32
    n_scales: int = 3
    profile: str = "desk"

    def build(self):
        return build_scale_schedule(self.max_size, self.n_scales, self.profile)


@dataclass(frozen=True)
class ExperimentParams:
    n_train: int = 36
    n_test: int = 24
    segmenter_arch: str = "light"
    classifier_arch: str = "light"
    probes: tuple = ("segmenter", "classifier")
    deltas: tuple = PAPER_DELTAS
    dropout_at_inference: bool = False

    def __post_init__(self):
        if self.n_train < 2 or self.n_test < 1:
            raise ConfigError("n_train must be >= 2 and n_test >= 1")
        bad = set(self.probes) - {"segmenter", "classifier"}
        if bad:
            raise ConfigError(f"unknown probes {sorted(bad)}")
        check_deltas(self.deltas)


@dataclass(frozen=True)
class PathsConfig:
    out_dir: str = "runs/default"
    vgg_cache: str | None = None  # shape-pretrained backbone weights; trained and cached when missing


def _desk_probe():
    return ProbeTrainConfig(epochs=20, batch_size=8, lr_init=1e-3, lr_decay_start_epoch=10,
                            lr_decay_per_epoch_frac=0.09)


def _desk_oracle():
    return ProbeTrainConfig(epochs=15, batch_size=8, lr_init=1e-3, lr_decay_start_epoch=8,
                            lr_decay_per_epoch_frac=1 / 8)


def _desk_classifier():
    return ProbeTrainConfig(epochs=30, batch_size=8, lr_init=1e-3, lr_decay_start_epoch=15,
                            lr_decay_per_epoch_frac=0.06)


@dataclass(frozen=True)
class RunConfig:
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    super_cfg: StageTrainConfig = field(default_factory=StageTrainConfig.desk)
    restore_cfg: StageTrainConfig = field(default_factory=lambda: StageTrainConfig.desk(lr_init=1e-3))
    final_batch_size: int | None = None
    gen_base_width: int = 32
    disc_base_width: int = 32
    dropout_rate: float = 0.5
    combine: str = CONCAT
    sa_policy: AugmentPolicy = field(default_factory=AugmentPolicy.strong)
    wa_policy: AugmentPolicy = field(default_factory=AugmentPolicy.weak)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    category_weights: CategoryWeightMap = field(default_factory=CategoryWeightMap)
    vgg_features: FeatureLossConfig = field(default_factory=FeatureLossConfig)
    unet_features: FeatureLossConfig = field(
        default_factory=lambda: FeatureLossConfig(backbone_kind="segmenter_features"))
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    oracle: ProbeTrainConfig = field(default_factory=_desk_oracle)
    segmenter: ProbeTrainConfig = field(default_factory=_desk_probe)
    classifier: ProbeTrainConfig = field(default_factory=_desk_classifier)
    experiment: ExperimentParams = field(default_factory=ExperimentParams)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    preview_every: int = 0

    def __post_init__(self):
        if self.combine not in (CONCAT, ADD):
            raise ConfigError(f"unknown combine mode {self.combine!r}")
        if self.phantom.size != self.schedule.max_size:
            raise ConfigError(f"phantom size {self.phantom.size} must equal the final scale {self.schedule.max_size}")
        self.schedule.build()

    _NESTED = {
        "schedule": ScheduleParams, "super_cfg": StageTrainConfig, "restore_cfg": StageTrainConfig,
        "sa_policy": AugmentPolicy, "wa_policy": AugmentPolicy, "loss_weights": LossWeights,
        "category_weights": CategoryWeightMap, "vgg_features": FeatureLossConfig,
        "unet_features": FeatureLossConfig, "phantom": PhantomSpec, "oracle": ProbeTrainConfig,
        "segmenter": ProbeTrainConfig, "classifier": ProbeTrainConfig, "experiment": ExperimentParams,
        "paths": PathsConfig,
    }

    @classmethod
    def paper(cls, **kw):
        """Full-resolution settings; probes follow the published baselines."""
        kw.setdefault("schedule", ScheduleParams(512, 9, "paper"))
        kw.setdefault("phantom", PhantomSpec(size=512))
        return cls(super_cfg=StageTrainConfig.paper_super(), restore_cfg=StageTrainConfig.paper_restore(),
                   final_batch_size=2, gen_base_width=64, disc_base_width=64,
                   oracle=ProbeTrainConfig.paper_segmenter("heavy"),
                   segmenter=ProbeTrainConfig.paper_segmenter("light"),
                   classifier=ProbeTrainConfig.paper_classifier(), **kw)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            kw[k] = _build(cls._NESTED[k], v) if k in cls._NESTED else v
        try:
            return cls(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        return cls.from_json(path.read_text())

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def trainer_config(self, seed=None) -> TrainerConfig:
        return TrainerConfig(schedule=self.schedule.build(), super_cfg=self.super_cfg,
                             restore_cfg=self.restore_cfg, final_batch_size=self.final_batch_size,
                             gen_base_width=self.gen_base_width, disc_base_width=self.disc_base_width,
                             dropout_rate=self.dropout_rate, combine=self.combine, sa_policy=self.sa_policy,
                             wa_policy=self.wa_policy, seed=self.seed if seed is None else seed,
                             preview_every=self.preview_every)
