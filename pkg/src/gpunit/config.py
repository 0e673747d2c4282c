"""Configuration objects and the flat key-value config file format.

Config files are plain text, one ``section.key = value`` per line, values
parsed as JSON fragments (ints, floats, bools, strings, lists).  Example::

    seed = 7
    data = out/dataset
    model.image_size = 64
    model.n_domains = 6
    stage2.lambda_cc_per_layer = [1, 1, 0, 0]

Every CLI run writes its fully resolved config back in this format next to
its outputs so a run can be reproduced from the snapshot alone.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, asdict
from typing import Any


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class ModelConfig:
    """Shared architecture hyperparameters for every network."""

    image_size: int = 64
    content_channels: int = 1
    style_dim: int = 64
    base_width: int = 32
    n_domains: int = 6
    noise_std: float = 1.0
    dsc_layers: list[int] = field(default_factory=lambda: [1, 2])

    def __post_init__(self):
        if not (_is_power_of_two(self.image_size) and self.image_size >= 32):
            raise ValueError(f"image_size must be a power of 2 >= 32, got {self.image_size}")
        if self.content_channels != 1:
            raise ValueError("content_channels must be 1: the single-channel bottleneck is "
                             "what strips domain information from the content code")
        if self.n_domains < 2:
            raise ValueError("need at least 2 domains")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        bad = [l for l in self.dsc_layers if l not in self.valid_generator_layers()]
        if bad:
            raise ValueError(f"dsc_layers {bad} outside valid generator layers "
                             f"{self.valid_generator_layers()}")
        if len(set(self.dsc_layers)) != len(self.dsc_layers):
            raise ValueError("dsc_layers must be unique")
        self.dsc_layers = sorted(self.dsc_layers)

    @property
    def content_resolution(self) -> int:
        # two stride-2 encoder blocks
        return self.image_size // 4

    def valid_generator_layers(self) -> list[int]:
        # layer 0 at content resolution, then one layer per 2x upsample
        return [0, 1, 2]

    @property
    def encoder_stage_count(self) -> int:
        """Number of encoder feature stages (stem, two downsamples, content head)."""
        return 4


@dataclass
class Stage1Config:
    """Prior-distillation training settings."""

    lambda_s: float = 5.0
    lambda_r: float = 0.001
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 8
    iterations: int = 2000
    unary_real_fraction: float = 0.5
    log_every: int = 25

    def __post_init__(self):
        if self.lambda_s < 0 or self.lambda_r < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0.0 <= self.unary_real_fraction <= 1.0:
            raise ValueError("unary_real_fraction must lie in [0, 1]")


_LAMBDA1_DEFAULT = 1.0
_LAMBDA1_SEMI = 0.1


@dataclass
class Stage2Config:
    """Translation training settings.

    ``lambda_1`` defaults to 1 and is lowered to 0.1 automatically when
    ``semi_supervised`` is on; pass an explicit value to override either.
    """

    lambda_1: float | None = None
    lambda_2: float = 50.0
    lambda_3: float = 1.0
    lambda_4: float = 1.0
    lambda_cc_per_layer: list[float] = field(default_factory=lambda: [1.0, 1.0, 0.0, 0.0])
    lambda_cc_id: float = 0.0
    use_dsc_for_rec: bool = False
    controllable: bool = False
    identity_weight: float = 0.0
    semi_supervised: bool = False
    lr: float = 1e-4
    d_lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 8
    iterations: int = 1500
    log_every: int = 25
    mapping_iterations: int = 400
    mapping_samples: int = 16

    def __post_init__(self):
        if self.lambda_1 is None:
            self.lambda_1 = _LAMBDA1_SEMI if self.semi_supervised else _LAMBDA1_DEFAULT
        for name in ("lambda_1", "lambda_2", "lambda_3", "lambda_4",
                     "lambda_cc_id", "identity_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if any(w < 0 for w in self.lambda_cc_per_layer):
            raise ValueError("lambda_cc_per_layer entries must be >= 0")

    def validate_against(self, model: ModelConfig):
        if len(self.lambda_cc_per_layer) != model.encoder_stage_count:
            raise ValueError(
                f"lambda_cc_per_layer has {len(self.lambda_cc_per_layer)} entries, "
                f"expected one per encoder stage ({model.encoder_stage_count})")


@dataclass
class SemiConfig:
    """Position-supervision settings for distant-domain translation."""

    lambda_P: float = 250.0
    lambda_p_i: float = 1.0   # horizontal (column) weight
    lambda_p_j: float = 0.1   # vertical (row) weight
    tau: float = 16.0         # squared-pixel clamp at label-map resolution
    prior_inject_layer: str = "p2"
    predictor_iterations: int = 400
    predictor_lr: float = 5e-3
    position_mode: str = "centroid"  # "maps_l2" = ablation: direct L2 on label maps

    def __post_init__(self):
        for name in ("lambda_P", "lambda_p_i", "lambda_p_j", "tau"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.position_mode not in ("centroid", "maps_l2"):
            raise ValueError("position_mode must be 'centroid' or 'maps_l2'")


@dataclass
class RunConfig:
    """Top-level run description: sub-configs plus data / seed / device."""

    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    semi: SemiConfig = field(default_factory=SemiConfig)
    data: str = ""
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        self.stage2.validate_against(self.model)

    def resolved_data_root(self) -> str:
        """Dataset root, with the GPUNIT_DATA env var taking precedence."""
        return os.environ.get("GPUNIT_DATA", self.data)


_SECTIONS = {"model": ModelConfig, "stage1": Stage1Config, "stage2": Stage2Config,
             "semi": SemiConfig}


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip("\"'")


def parse_kv_text(text: str) -> dict[str, Any]:
    """Parse the flat dotted key-value format into a nested dict."""
    tree: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        parts = key.strip().split(".")
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"line {lineno}: {key.strip()} conflicts with a scalar key")
        node[parts[-1]] = _parse_value(raw)
    return tree


def run_config_from_mapping(tree: dict[str, Any]) -> RunConfig:
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        section = dict(tree.get(name, {}))
        known = {f.name for f in fields(cls)}
        unknown = set(section) - known
        if unknown:
            raise ValueError(f"unknown {name} config keys: {sorted(unknown)}")
        kwargs[name] = cls(**section)
    for name in ("data", "seed", "device"):
        if name in tree:
            kwargs[name] = tree[name]
    return RunConfig(**kwargs)


def load_run_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return run_config_from_mapping(parse_kv_text(fh.read()))


def _format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return json.dumps(list(value))
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    return repr(value)


def dump_kv_text(cfg: RunConfig) -> str:
    """Serialize a RunConfig back to the flat key-value format."""
    lines = [f"data = {_format_value(cfg.data)}",
             f"seed = {_format_value(cfg.seed)}",
             f"device = {_format_value(cfg.device)}"]
    for name in _SECTIONS:
        sub = asdict(getattr(cfg, name))
        for key, value in sub.items():
            lines.append(f"{name}.{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def write_config_snapshot(cfg: RunConfig, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_kv_text(cfg))
