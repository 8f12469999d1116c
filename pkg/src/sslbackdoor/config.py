"""Experiment configuration: YAML schema, validation, and digests.

Configs are strict: unknown keys are rejected by name, required keys are
reported when missing, and every other field falls back to a documented
default. The config digest covers every field that influences results
(output_dir and experiment_id are labels and are excluded), so two configs
share a digest exactly when they describe the same computation.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import yaml

from .data import CORNERS


class ConfigError(ValueError):
    """Raised for schema violations; the message names the offending key."""


_REQUIRED = object()


class _Section:
    """Helper that pops typed keys from a mapping and rejects leftovers."""

    def __init__(self, mapping, path: str):
        if mapping is None:
            mapping = {}
        if not isinstance(mapping, dict):
            raise ConfigError(f"{path or 'config'} must be a mapping")
        self.mapping = dict(mapping)
        self.path = path

    def _name(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def take(self, key: str, kind, default=_REQUIRED):
        if key not in self.mapping:
            if default is _REQUIRED:
                raise ConfigError(f"missing required key: {self._name(key)}")
            return default
        value = self.mapping.pop(key)
        return _coerce(value, kind, self._name(key))

    def sub(self, key: str) -> "_Section":
        return _Section(self.mapping.pop(key, {}), self._name(key))

    def done(self) -> None:
        if self.mapping:
            name = self._name(sorted(self.mapping)[0])
            raise ConfigError(f"unknown key: {name}")


def _coerce(value, kind, name: str):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
        return value
    if isinstance(kind, tuple) and kind[0] is list:
        _, item_kind, length = kind
        if not isinstance(value, (list, tuple)) or (length and len(value) != length):
            raise ConfigError(f"{name} must be a list of {length} items")
        return [_coerce(v, item_kind, f"{name}[{i}]") for i, v in enumerate(value)]
    raise AssertionError(f"unhandled kind {kind}")


@dataclass
class TriggerSpec:
    corner: str = "bottom-right"
    size: int = 10
    color: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    target_class: int = 0
    reference_count: int = 1
    file: str | None = None  # explicit mask+pattern .npz; overrides corner/size/color


@dataclass
class DatasetSection:
    kind: str = "synthetic"
    num_classes: int = 4
    per_class: int = 800
    image_size: int = 32
    path: str | None = None
    test_path: str | None = None
    pretrain_size: int = 2000
    downstream_train_size: int = 800
    downstream_test_size: int = 400
    shadow_size: int = 1000


@dataclass
class PretrainSection:
    architecture: str = "conv3"
    feature_dim: int = 128
    latent_dim: int = 64
    temperature: float = 0.5
    batch_size: int = 64
    epochs: int = 100
    learning_rate: float = 1e-3


@dataclass
class AugmentSection:
    crop_scale_range: list[float] = field(default_factory=lambda: [0.6, 1.0])
    flip_probability: float = 0.5
    color_jitter_strength: float = 0.2
    blur_probability: float = 0.0


@dataclass
class AttackSection:
    lambda1: float = 1.0
    lambda2: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epoch: int = 50
    optimizer: str = "adam"
    freeze_batchnorm: bool = True
    augment_references: bool = True
    include_trigger_term: bool = True
    triggers: list[TriggerSpec] = field(default_factory=lambda: [TriggerSpec()])


@dataclass
class DownstreamSection:
    epochs: int = 150
    learning_rate: float = 1e-3
    batch_size: int = 64
    hidden_sizes: list[int] = field(default_factory=lambda: [512, 256])


@dataclass
class NeuralCleanseSection:
    steps: int = 400
    sparsity_weight: float = 0.01
    learning_rate: float = 0.1
    batch_size: int = 32


@dataclass
class MNTDSection:
    shadow_per_class: int = 8
    query_count: int = 8
    epochs: int = 150
    shadow_epochs: int = 30


@dataclass
class DefenseSection:
    neural_cleanse: NeuralCleanseSection = field(default_factory=NeuralCleanseSection)
    mntd: MNTDSection = field(default_factory=MNTDSection)


@dataclass
class ExperimentConfig:
    experiment_id: str
    seed: int
    output_dir: str | None = None
    dataset: DatasetSection = field(default_factory=DatasetSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    attack: AttackSection = field(default_factory=AttackSection)
    downstream: DownstreamSection = field(default_factory=DownstreamSection)
    defense: DefenseSection = field(default_factory=DefenseSection)

    def to_dict(self) -> dict:
        return asdict(self)


def _parse_trigger(sec: _Section) -> TriggerSpec:
    spec = TriggerSpec(
        corner=sec.take("corner", str, "bottom-right"),
        size=sec.take("size", int, 10),
        color=sec.take("color", (list, float, 3), [1.0, 1.0, 1.0]),
        target_class=sec.take("target_class", int, 0),
        reference_count=sec.take("reference_count", int, 1),
        file=sec.take("file", str, None),
    )
    sec.done()
    if spec.file is not None:
        if not os.path.exists(spec.file):
            raise ConfigError(f"{sec.path}.file: no such file: {spec.file}")
    else:
        if spec.corner not in CORNERS:
            raise ConfigError(f"{sec.path}.corner must be one of {CORNERS}")
        if spec.size < 1:
            raise ConfigError(f"{sec.path}.size must be positive")
    if spec.reference_count < 1:
        raise ConfigError(f"{sec.path}.reference_count must be positive")
    return spec


def parse_config(raw: dict | None, source: str = "config") -> ExperimentConfig:
    """Validate a raw mapping into a fully defaulted ExperimentConfig."""
    top = _Section(raw, "")
    missing = [k for k in ("experiment_id", "seed") if k not in top.mapping]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")

    experiment_id = top.take("experiment_id", str)
    seed = top.take("seed", int)
    output_dir = top.take("output_dir", str, None)

    d = top.sub("dataset")
    dataset = DatasetSection(
        kind=d.take("kind", str, "synthetic"),
        num_classes=d.take("num_classes", int, 4),
        per_class=d.take("per_class", int, 800),
        image_size=d.take("image_size", int, 32),
        path=d.take("path", str, None),
        test_path=d.take("test_path", str, None),
        pretrain_size=d.take("pretrain_size", int, 2000),
        downstream_train_size=d.take("downstream_train_size", int, 800),
        downstream_test_size=d.take("downstream_test_size", int, 400),
        shadow_size=d.take("shadow_size", int, 1000),
    )
    d.done()
    if dataset.kind not in ("synthetic", "cifar10-binary"):
        raise ConfigError("dataset.kind must be 'synthetic' or 'cifar10-binary'")
    if dataset.kind == "cifar10-binary":
        for key, value in (("path", dataset.path), ("test_path", dataset.test_path)):
            if value is None:
                raise ConfigError(f"dataset.{key} is required for cifar10-binary")
            if not os.path.exists(value):
                raise ConfigError(f"dataset.{key}: no such file or directory: {value}")

    p = top.sub("pretrain")
    pretrain = PretrainSection(
        architecture=p.take("architecture", str, "conv3"),
        feature_dim=p.take("feature_dim", int, 128),
        latent_dim=p.take("latent_dim", int, 64),
        temperature=p.take("temperature", float, 0.5),
        batch_size=p.take("batch_size", int, 64),
        epochs=p.take("epochs", int, 100),
        learning_rate=p.take("learning_rate", float, 1e-3),
    )
    p.done()

    a = top.sub("augment")
    augment = AugmentSection(
        crop_scale_range=a.take("crop_scale_range", (list, float, 2), [0.6, 1.0]),
        flip_probability=a.take("flip_probability", float, 0.5),
        color_jitter_strength=a.take("color_jitter_strength", float, 0.2),
        blur_probability=a.take("blur_probability", float, 0.0),
    )
    a.done()

    at = top.sub("attack")
    trigger_specs = at.mapping.pop("triggers", None)
    attack = AttackSection(
        lambda1=at.take("lambda1", float, 1.0),
        lambda2=at.take("lambda2", float, 1.0),
        learning_rate=at.take("learning_rate", float, 1e-3),
        batch_size=at.take("batch_size", int, 64),
        max_epoch=at.take("max_epoch", int, 50),
        optimizer=at.take("optimizer", str, "adam"),
        freeze_batchnorm=at.take("freeze_batchnorm", bool, True),
        augment_references=at.take("augment_references", bool, True),
        include_trigger_term=at.take("include_trigger_term", bool, True),
    )
    at.done()
    if trigger_specs is not None:
        if not isinstance(trigger_specs, list) or not trigger_specs:
            raise ConfigError("attack.triggers must be a non-empty list")
        attack.triggers = [
            _parse_trigger(_Section(t, f"attack.triggers[{i}]")) for i, t in enumerate(trigger_specs)
        ]
    if attack.optimizer not in ("sgd", "adam"):
        raise ConfigError("attack.optimizer must be 'sgd' or 'adam'")

    ds = top.sub("downstream")
    downstream = DownstreamSection(
        epochs=ds.take("epochs", int, 150),
        learning_rate=ds.take("learning_rate", float, 1e-3),
        batch_size=ds.take("batch_size", int, 64),
        hidden_sizes=ds.take("hidden_sizes", (list, int, 2), [512, 256]),
    )
    ds.done()

    df = top.sub("defense")
    nc = df.sub("neural_cleanse")
    neural_cleanse = NeuralCleanseSection(
        steps=nc.take("steps", int, 400),
        sparsity_weight=nc.take("sparsity_weight", float, 0.01),
        learning_rate=nc.take("learning_rate", float, 0.1),
        batch_size=nc.take("batch_size", int, 32),
    )
    nc.done()
    mn = df.sub("mntd")
    mntd = MNTDSection(
        shadow_per_class=mn.take("shadow_per_class", int, 8),
        query_count=mn.take("query_count", int, 8),
        epochs=mn.take("epochs", int, 150),
        shadow_epochs=mn.take("shadow_epochs", int, 30),
    )
    mn.done()
    df.done()
    top.done()

    for trig in attack.triggers:
        if trig.file is None and trig.size > dataset.image_size:
            raise ConfigError("trigger size exceeds dataset.image_size")
        if trig.target_class >= dataset.num_classes:
            raise ConfigError("trigger target_class exceeds dataset.num_classes")

    return ExperimentConfig(
        experiment_id=experiment_id,
        seed=seed,
        output_dir=output_dir,
        dataset=dataset,
        pretrain=pretrain,
        augment=augment,
        attack=attack,
        downstream=downstream,
        defense=DefenseSection(neural_cleanse=neural_cleanse, mntd=mntd),
    )


def validate_config(path: str | os.PathLike) -> ExperimentConfig:
    """Load and validate a YAML config file."""
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return parse_config(raw, source=os.fspath(path))


def _digest_payload(cfg: ExperimentConfig) -> dict:
    payload = cfg.to_dict()
    payload.pop("output_dir")
    payload.pop("experiment_id")
    return payload


def config_digest(cfg: ExperimentConfig) -> str:
    """Hex digest over every result-affecting config field."""
    blob = json.dumps(_digest_payload(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def stage_digest(cfg: ExperimentConfig, stage: str, upstream: list[str]) -> str:
    """Digest of one stage's config slice chained with its upstream digests."""
    payload = _digest_payload(cfg)
    slices = {
        "pretrain": ("seed", "dataset", "augment", "pretrain"),
        "attack": ("seed", "attack", "augment"),
        "downstream": ("seed", "downstream"),
        "evaluate": ("seed",),
        "defend": ("seed", "defense"),
    }
    part = {k: payload[k] for k in slices[stage] if k in payload}
    blob = json.dumps({"stage": stage, "config": part, "upstream": upstream}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
