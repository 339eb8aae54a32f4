"""Flat key-value experiment configuration.

The config file format is one ``section.key = value`` per line, ``#`` starts
a comment, values are scalars or comma-separated lists. The same format is
echoed into every run manifest, so a manifest can be fed back to ``conal run``
to reproduce a run (``meta.*`` keys are informational and ignored on load).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .data import SHIFT_KINDS, DatasetSpec
from .errors import ConfigError
from .loop import LoopConfig
from .model import ModelConfig
from .strategies import get_strategy

_KNOWN_KEYS = {
    "data.source", "data.k", "data.d", "data.n_per_class", "data.imbalance_ratio",
    "data.class_separation", "data.noise_sigma", "data.seed",
    "data.test_n_per_class", "data.ood_n",
    "data.train_path", "data.test_path", "data.ood_path", "data.format",
    "model.d_hidden", "model.d_feat", "model.d_proj", "model.temperature",
    "model.lr", "model.momentum", "model.weight_decay", "model.epochs",
    "model.batch_size", "model.aug_sigma", "model.dropout_rate",
    "model.lr_decay_epoch", "model.classifier_steps", "model.classifier_lr",
    "loop.budget", "loop.acquisition_size", "loop.subset_size", "loop.tau",
    "loop.accumulate_features", "loop.force_per_class", "loop.loss_override",
    "loop.symmetric_featuresim", "loop.pca_variance_fraction", "loop.pca_components",
    "loop.shift_seed",
    "shift.kinds", "shift.intensities",
    "run.strategies", "run.seeds", "run.out",
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key.startswith("meta."):
            continue
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))


def _get(values, key, cast, default):
    if key not in values:
        return default
    raw = values[key]
    try:
        if cast is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {cast.__name__}") from None


def _get_list(values, key, cast, default):
    if key not in values:
        return list(default)
    raw = values[key]
    try:
        return [cast(part.strip()) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {cast.__name__} list") from None


@dataclass
class ExperimentConfig:
    """Fully resolved experiment: data + model + loop + sweep settings."""

    source: str
    dataset: DatasetSpec | None
    test_n_per_class: int
    ood_n: int
    train_path: str | None
    test_path: str | None
    ood_path: str | None
    file_format: str
    model: ModelConfig
    loop: LoopConfig
    shift_kinds: list[str]
    shift_intensities: list[int]
    strategies: list[str] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    out: str = "runs"

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seed list must be nonempty")
        if not self.strategies:
            raise ConfigError("strategy list must be nonempty")
        for name in self.strategies:
            get_strategy(name)
        for kind in self.shift_kinds:
            if kind not in SHIFT_KINDS:
                raise ConfigError(
                    f"unknown shift kind {kind!r}; valid kinds: {', '.join(SHIFT_KINDS)}"
                )
        for level in self.shift_intensities:
            if not 1 <= level <= 5:
                raise ConfigError(f"shift intensity {level} outside 1..5")
        if self.source == "files":
            for label, p in (("train", self.train_path), ("test", self.test_path)):
                if p is None:
                    raise ConfigError(f"data.source=files requires data.{label}_path")
                if not Path(p).exists():
                    raise ConfigError(f"data.{label}_path does not exist: {p}")
            if self.ood_path is not None and not Path(self.ood_path).exists():
                raise ConfigError(f"data.ood_path does not exist: {self.ood_path}")
        elif self.source != "synthetic":
            raise ConfigError("data.source must be 'synthetic' or 'files'")


def build_experiment(values: dict[str, str]) -> ExperimentConfig:
    source = _get(values, "data.source", str, "synthetic")
    dataset = None
    if source == "synthetic":
        dataset = DatasetSpec(
            k=_get(values, "data.k", int, 10),
            d=_get(values, "data.d", int, 32),
            n_per_class=_get(values, "data.n_per_class", int, 5000),
            imbalance_ratio=_get(values, "data.imbalance_ratio", float, 50.0),
            class_separation=_get(values, "data.class_separation", float, 4.5),
            noise_sigma=_get(values, "data.noise_sigma", float, 1.0),
            seed=_get(values, "data.seed", int, 0),
        )
        n_classes = dataset.k
        d_in = dataset.d
    else:
        n_classes = _get(values, "data.k", int, 10)
        d_in = _get(values, "data.d", int, 32)

    # model defaults here are the desk-scale preset (the ModelConfig class
    # carries the method's reference defaults instead)
    model = ModelConfig(
        d_in=d_in,
        n_classes=n_classes,
        d_hidden=_get(values, "model.d_hidden", int, 64),
        d_feat=_get(values, "model.d_feat", int, 32),
        d_proj=_get(values, "model.d_proj", int, 16),
        temperature=_get(values, "model.temperature", float, 0.2),
        lr=_get(values, "model.lr", float, 0.1),
        momentum=_get(values, "model.momentum", float, 0.9),
        weight_decay=_get(values, "model.weight_decay", float, 0.01),
        epochs=_get(values, "model.epochs", int, 60),
        batch_size=_get(values, "model.batch_size", int, 64),
        aug_sigma=_get(values, "model.aug_sigma", float, 0.2),
        dropout_rate=_get(values, "model.dropout_rate", float, 0.3),
        lr_decay_epoch=_get(values, "model.lr_decay_epoch", int, None),
        classifier_steps=_get(values, "model.classifier_steps", int, 200),
        classifier_lr=_get(values, "model.classifier_lr", float, 1.0),
    )

    loop = LoopConfig(
        budget=_get(values, "loop.budget", int, 1000),
        acquisition_size=_get(values, "loop.acquisition_size", int, 100),
        subset_size=_get(values, "loop.subset_size", int, 2000),
        strategy="random",  # replaced per sweep cell
        tau=_get(values, "loop.tau", int, 50),
        accumulate_features=_get(values, "loop.accumulate_features", bool, False),
        force_per_class=_get(values, "loop.force_per_class", bool, False),
        loss_override=_get(values, "loop.loss_override", str, None),
        symmetric_featuresim=_get(values, "loop.symmetric_featuresim", bool, False),
        pca_variance_fraction=_get(values, "loop.pca_variance_fraction", float, None),
        pca_components=_get(values, "loop.pca_components", int, None),
        shift_seed=_get(values, "loop.shift_seed", int, 20259),
    )

    config = ExperimentConfig(
        source=source,
        dataset=dataset,
        test_n_per_class=_get(values, "data.test_n_per_class", int, 200),
        ood_n=_get(values, "data.ood_n", int, 1000),
        train_path=_get(values, "data.train_path", str, None),
        test_path=_get(values, "data.test_path", str, None),
        ood_path=_get(values, "data.ood_path", str, None),
        file_format=_get(values, "data.format", str, "binary"),
        model=model,
        loop=loop,
        shift_kinds=_get_list(values, "shift.kinds", str, SHIFT_KINDS),
        shift_intensities=_get_list(values, "shift.intensities", int, (1, 2, 3, 4, 5)),
        strategies=_get_list(values, "run.strategies", str, ("featuresim", "random")),
        seeds=_get_list(values, "run.seeds", int, (0, 1, 2, 3, 4)),
        out=_get(values, "run.out", str, "runs"),
    )
    config.validate()
    return config


def echo_config(config: ExperimentConfig, extra_meta: dict | None = None) -> str:
    """Render a config back into the flat file format (a reusable manifest)."""
    lines = []
    if extra_meta:
        for key, value in sorted(extra_meta.items()):
            lines.append(f"meta.{key} = {value}")
    lines.append(f"data.source = {config.source}")
    if config.dataset is not None:
        ds = config.dataset
        lines += [
            f"data.k = {ds.k}",
            f"data.d = {ds.d}",
            f"data.n_per_class = {ds.n_per_class}",
            f"data.imbalance_ratio = {ds.imbalance_ratio}",
            f"data.class_separation = {ds.class_separation}",
            f"data.noise_sigma = {ds.noise_sigma}",
            f"data.seed = {ds.seed}",
        ]
    else:
        lines += [
            f"data.k = {config.model.n_classes}",
            f"data.d = {config.model.d_in}",
        ]
        for key, value in (("train_path", config.train_path),
                           ("test_path", config.test_path),
                           ("ood_path", config.ood_path)):
            if value is not None:
                lines.append(f"data.{key} = {value}")
        lines.append(f"data.format = {config.file_format}")
    lines += [
        f"data.test_n_per_class = {config.test_n_per_class}",
        f"data.ood_n = {config.ood_n}",
        f"model.d_hidden = {config.model.d_hidden}",
        f"model.d_feat = {config.model.d_feat}",
        f"model.d_proj = {config.model.d_proj}",
        f"model.temperature = {config.model.temperature}",
        f"model.lr = {config.model.lr}",
        f"model.momentum = {config.model.momentum}",
        f"model.weight_decay = {config.model.weight_decay}",
        f"model.epochs = {config.model.epochs}",
        f"model.batch_size = {config.model.batch_size}",
        f"model.aug_sigma = {config.model.aug_sigma}",
        f"model.dropout_rate = {config.model.dropout_rate}",
        f"model.classifier_steps = {config.model.classifier_steps}",
        f"model.classifier_lr = {config.model.classifier_lr}",
        f"loop.budget = {config.loop.budget}",
        f"loop.acquisition_size = {config.loop.acquisition_size}",
        f"loop.subset_size = {config.loop.subset_size}",
        f"loop.tau = {config.loop.tau}",
        f"loop.accumulate_features = {config.loop.accumulate_features}",
        f"loop.force_per_class = {config.loop.force_per_class}",
        f"loop.symmetric_featuresim = {config.loop.symmetric_featuresim}",
        f"loop.shift_seed = {config.loop.shift_seed}",
        f"shift.kinds = {','.join(config.shift_kinds)}",
        f"shift.intensities = {','.join(str(i) for i in config.shift_intensities)}",
        f"run.strategies = {','.join(config.strategies)}",
        f"run.seeds = {','.join(str(s) for s in config.seeds)}",
        f"run.out = {config.out}",
    ]
    if config.model.lr_decay_epoch is not None:
        lines.append(f"model.lr_decay_epoch = {config.model.lr_decay_epoch}")
    if config.loop.loss_override is not None:
        lines.append(f"loop.loss_override = {config.loop.loss_override}")
    if config.loop.pca_variance_fraction is not None:
        lines.append(f"loop.pca_variance_fraction = {config.loop.pca_variance_fraction}")
    if config.loop.pca_components is not None:
        lines.append(f"loop.pca_components = {config.loop.pca_components}")
    return "\n".join(lines) + "\n"
