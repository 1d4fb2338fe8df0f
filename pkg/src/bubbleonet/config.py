"""Run configuration: one JSON document drives every command.

Precedence: CLI flag > config file > built-in default.  ``parse(serialize(c))``
round-trips exactly.  All user-facing quantities are SI; non-dimensional
scaling happens inside the pipelines.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .datagen import DoeSpec
from .errors import ConfigError
from .network import NetworkArch
from .physics import FluidParams
from .training import LossWeights, TrainConfig

CONFIG_FORMAT_VERSION = 1


@dataclass
class Paths:
    dataset_dir: str = "runs/dataset"
    model_dir: str = "runs/model"
    report_dir: str = "runs/report"
    study_dir: str = "runs/study_dataset"


@dataclass
class RunConfig:
    fluid: FluidParams
    doe: DoeSpec
    network: NetworkArch
    train: TrainConfig
    study: DoeSpec | None = None
    paths: Paths = field(default_factory=Paths)
    seed: int = 0
    split_ratio: float = 0.8
    format_version: int = CONFIG_FORMAT_VERSION

    def __post_init__(self):
        if self.network.branch_widths[0] != self.doe.n_points:
            raise ConfigError(
                f"branch input width {self.network.branch_widths[0]} must equal "
                f"doe.n_points {self.doe.n_points}"
            )
        want = 2 if len(self.doe.r0_values) > 1 else 1
        if self.network.trunk_widths[0] != want:
            raise ConfigError(
                f"trunk input dim {self.network.trunk_widths[0]} does not match "
                f"{'multi' if want == 2 else 'single'}-radius data (need {want})"
            )


def _doe_dict(spec: DoeSpec | None):
    if spec is None:
        return None
    d = asdict(spec)
    d["r0_values"] = list(spec.r0_values)
    d["amp_range"] = list(spec.amp_range)
    d["freq_range"] = list(spec.freq_range)
    return d


def serialize(config: RunConfig) -> str:
    doc = {
        "format_version": config.format_version,
        "seed": config.seed,
        "split_ratio": config.split_ratio,
        "fluid": asdict(config.fluid),
        "doe": _doe_dict(config.doe),
        "study": _doe_dict(config.study),
        "network": asdict(config.network),
        "train": {**asdict(config.train), "weights": asdict(config.train.weights)},
        "paths": asdict(config.paths),
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def _doe_from(d: dict | None) -> DoeSpec | None:
    if d is None:
        return None
    return DoeSpec(
        r0_values=tuple(d["r0_values"]),
        amp_range=tuple(d["amp_range"]),
        amp_count=int(d["amp_count"]),
        freq_range=tuple(d["freq_range"]),
        freq_count=int(d["freq_count"]),
        t_max=float(d["t_max"]),
        n_points=int(d["n_points"]),
        model=d["model"],
    )


def parse(text: str) -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if doc.get("format_version") != CONFIG_FORMAT_VERSION:
        raise ConfigError(
            f"config format_version {doc.get('format_version')!r} not supported"
        )
    try:
        train_doc = dict(doc["train"])
        weights = LossWeights(**train_doc.pop("weights"))
        return RunConfig(
            fluid=FluidParams(**doc["fluid"]),
            doe=_doe_from(doc["doe"]),
            study=_doe_from(doc.get("study")),
            network=NetworkArch(**doc["network"]),
            train=TrainConfig(weights=weights, **train_doc),
            paths=Paths(**doc.get("paths", {})),
            seed=int(doc.get("seed", 0)),
            split_ratio=float(doc.get("split_ratio", 0.8)),
            format_version=doc["format_version"],
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"config field error: {exc}") from None


def load(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse(fh.read())


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(serialize(config).encode()).hexdigest()[:16]


def apply_override(doc: dict, dotted: str, value: str):
    """Apply one --set a.b.c=value override onto the raw JSON document."""
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"override path {dotted!r}: no such table {k!r}")
        node = node[k]
    leaf = keys[-1]
    if leaf not in node:
        raise ConfigError(f"override path {dotted!r}: no such field {leaf!r}")
    try:
        node[leaf] = json.loads(value)
    except json.JSONDecodeError:
        node[leaf] = value  # bare string
