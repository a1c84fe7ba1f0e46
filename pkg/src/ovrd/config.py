"""Run configuration: a registry of dotted keys, YAML loading, CLI overrides.

Every tunable lives in DEFAULTS. Unknown keys are rejected, and the help text
for the CLI is generated from the registry so it can never drift.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional

import yaml


class ConfigError(ValueError):
    """Bad configuration: unknown key, wrong type, or invalid value."""


@dataclass(frozen=True)
class ConfigKey:
    default: Any
    kind: type
    help: str
    choices: Optional[tuple] = None


def _k(default, kind, help, choices=None):
    return ConfigKey(default=default, kind=kind, help=help, choices=choices)


DEFAULTS: Dict[str, ConfigKey] = {
    "seed": _k(0, int, "global RNG seed for training and generation"),
    # frozen encoder
    "encoder.kind": _k("mock", str, "encoder backbone", choices=("mock", "clip")),
    "encoder.dim": _k(32, int, "feature dim D of the mock encoder"),
    "encoder.resolution": _k(96, int, "mock encoder input resolution (pixels)"),
    "encoder.patch_grid": _k(6, int, "mock patch grid side (grid is side x side)"),
    "encoder.token_dim": _k(16, int, "mock text-token embedding width"),
    "encoder.context_length": _k(24, int, "max prompt length in tokens"),
    # query decoder
    "detector.n_queries": _k(300, int, "number of learnable object queries"),
    "detector.n_layers": _k(6, int, "decoder layers"),
    "detector.width": _k(256, int, "decoder width D_q"),
    "detector.heads": _k(8, int, "decoder attention heads"),
    "detector.ffn_dim": _k(1024, int, "decoder feed-forward width"),
    "detector.epsilon": _k(0.35, float, "score threshold for retaining boxes"),
    "detector.tau": _k(0.01, float, "softmax temperature over cosine scores"),
    "detector.use_relation_query": _k(True, bool, "include the frame-relation query slot"),
    # learned prompts
    "prompt.n_continuous": _k(8, int, "learned context tokens per prompt"),
    "prompt.n_conditional": _k(8, int, "vision-conditioned tokens per prompt"),
    "prompt.rel_class_pos": _k(0.75, float, "fractional class-token position in relation prompts"),
    # score ensembling
    "ensemble.alpha": _k(0.3, float, "prompt-classifier weight on base categories"),
    "ensemble.beta": _k(0.6, float, "prompt-classifier weight on novel categories"),
    # trajectory association
    "assoc.w_feature": _k(0.7, float, "weight of the feature-similarity cost"),
    "assoc.w_spatial": _k(0.3, float, "weight of the box-overlap cost"),
    "assoc.gate": _k(0.7, float, "max admissible match cost"),
    "assoc.max_age": _k(3, int, "frames a track may stay unmatched before closing"),
    "assoc.min_len": _k(2, int, "minimum detected frames per kept trajectory"),
    "assoc.min_overlap": _k(2, int, "minimum shared frames for a trajectory pair"),
    # relation classifier
    "rel.width": _k(16, int, "internal width of the relation blocks"),
    "rel.heads": _k(4, int, "attention heads in the relation blocks"),
    "rel.ffn_dim": _k(16, int, "feed-forward width in the relation blocks"),
    "rel.n_spatial_blocks": _k(1, int, "per-frame cross-role attention blocks"),
    "rel.n_temporal_blocks": _k(1, int, "cross-frame attention blocks"),
    "rel.pool": _k("mean", str, "span pooling before relation scoring", choices=("mean", "max", "last")),
    "rel.max_span": _k(64, int, "max span length; longer pairs are subsampled"),
    "rel.top_k": _k(10, int, "relation candidates emitted per pair"),
    # losses
    "loss.lambda_focal": _k(3.0, float, "weight of the classification focal loss"),
    "loss.lambda_l1": _k(5.0, float, "weight of the box L1 loss"),
    "loss.lambda_giou": _k(5.0, float, "weight of the box GIoU loss"),
    "loss.lambda_distill": _k(2.0, float, "weight of the crop-feature distillation loss"),
    "loss.lambda_aux_relation": _k(2.0, float, "weight of the frame-relation loss"),
    "loss.lambda_static": _k(2.0, float, "static-subset emphasis inside the frame-relation loss"),
    "loss.focal_alpha": _k(0.25, float, "focal loss alpha"),
    "loss.focal_gamma": _k(2.0, float, "focal loss gamma"),
    "loss.gamma_object": _k(0.2, float, "weight of the pair object-consistency loss"),
    "loss.delta_interaction": _k(0.1, float, "weight of the per-frame interaction loss"),
    # training schedule
    "train.weight_decay": _k(1e-4, float, "AdamW weight decay"),
    "train.init_checkpoint": _k("", str, "optional checkpoint to initialize step 1"),
    "train.step1.lr": _k(1e-5, float, "step-1 learning rate"),
    "train.step1.epochs": _k(10, int, "step-1 epochs"),
    "train.step1.batch": _k(16, int, "step-1 batch size (frames)"),
    "train.step2.lr": _k(1e-3, float, "step-2 learning rate"),
    "train.step2.epochs": _k(5, int, "step-2 epochs"),
    "train.step2.batch": _k(12, int, "step-2 batch size (boxes)"),
    "train.step3.lr": _k(1e-4, float, "step-3 learning rate"),
    "train.step3.epochs": _k(30, int, "step-3 epochs"),
    "train.step3.batch": _k(32, int, "step-3 batch size (pairs)"),
    "train.step3.milestones": _k([15, 20, 25], list, "step-3 epochs at which lr decays"),
    "train.step3.lr_decay": _k(0.1, float, "step-3 lr decay factor at each milestone"),
    "train.step4.lr": _k(1e-5, float, "step-4 learning rate"),
    "train.step4.epochs": _k(5, int, "step-4 epochs"),
    "train.step4.batch": _k(1, int, "step-4 batch size (videos)"),
    # data
    "data.sample_stride": _k(30, int, "keep every n-th raw frame when loading annotations"),
    "eval.viou_threshold": _k(0.5, float, "trajectory overlap threshold for a hit"),
    # synthetic generator
    "synth.width": _k(96, int, "synthetic frame width"),
    "synth.height": _k(96, int, "synthetic frame height"),
    "synth.min_objects": _k(2, int, "min objects per synthetic video"),
    "synth.max_objects": _k(4, int, "max objects per synthetic video"),
    "synth.n_base_objects": _k(4, int, "base object categories in the synthetic vocabulary"),
    "synth.n_novel_objects": _k(2, int, "novel object categories"),
    "synth.n_base_relations": _k(5, int, "base relation categories"),
    "synth.n_novel_relations": _k(2, int, "novel relation categories"),
    "synth.n_frames": _k(16, int, "frames per synthetic video"),
    "synth.min_size": _k(0.16, float, "smallest object extent, fraction of frame"),
    "synth.max_size": _k(0.3, float, "largest object extent, fraction of frame"),
    "synth.min_separation": _k(0.08, float, "least allowed gap between object centers"),
}


class RunConfig:
    """Validated flat view of the configuration tree."""

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self._values: Dict[str, Any] = {k: copy.deepcopy(v.default) for k, v in DEFAULTS.items()}
        if values:
            for key, val in values.items():
                self.set(key, val)

    def set(self, key: str, value: Any) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key!r}")
        spec = DEFAULTS[key]
        value = _coerce(key, value, spec)
        if spec.choices is not None and value not in spec.choices:
            raise ConfigError(f"{key}: {value!r} not in {spec.choices}")
        self._values[key] = value

    def __getitem__(self, key: str) -> Any:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key!r}")
        return self._values[key]

    def keys(self) -> Iterable[str]:
        return self._values.keys()

    def to_dict(self) -> Dict[str, Any]:
        return dict(self._values)

    def copy(self) -> "RunConfig":
        return RunConfig(self.to_dict())


def _coerce(key: str, value: Any, spec: ConfigKey) -> Any:
    kind = spec.kind
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{key}: expected bool, got {value!r}")
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected int, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key}: expected int, got {value!r}")
        return int(value)
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected float, got {value!r}")
        return float(value)
    if kind is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected list, got {value!r}")
        return [int(v) for v in value]
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected str, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported kind {kind}")


def _flatten(tree: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, val in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(val, dict):
            flat.update(_flatten(val, prefix=f"{dotted}."))
        else:
            flat[dotted] = val
    return flat


def parse_override(text: str) -> tuple:
    """Parse one ``key=value`` override; the value uses YAML scalar syntax."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
    return key.strip(), value


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                tree = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        for key, val in _flatten(tree).items():
            cfg.set(key, val)
    for item in overrides:
        key, val = parse_override(item)
        cfg.set(key, val)
    return cfg


def reference_text() -> str:
    """One line per config key, generated from the registry."""
    lines: List[str] = ["configuration keys (override with --set key=value):"]
    for key in sorted(DEFAULTS):
        spec = DEFAULTS[key]
        extra = f" one of {list(spec.choices)}" if spec.choices else ""
        lines.append(f"  {key} = {spec.default!r}  {spec.help}{extra}")
    return "\n".join(lines)
