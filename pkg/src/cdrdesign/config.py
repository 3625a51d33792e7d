"""Configuration dataclasses and the key-value config file.

The config file is INI-style, one section per dataclass::

    [train]
    lr = 6.31e-4
    max_epochs = 50

    [loss]
    lambda_contact = 1.763

    [decoder]
    contact_hidden = 128, 128

Sections: ``train``, ``loss``, ``graph``, ``encoder``, ``attention``,
``decoder``, ``model``. Unknown sections or keys raise :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError
from .geometry import RbfSpec
from .graph import GraphConfig


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim_in: int = 32
    hidden_dim: int = 256
    n_layers: int = 4
    n_virtual: int = 3
    message_dim: int = 256
    geom_hidden: int = 64
    chem_hidden: int = 32
    fuse_hidden: int = 64
    coord_hidden: int = 64
    # Displacements enter the outer-product term in units of this many Å.
    geometry_scale: float = 10.0
    # Uniform-init bound multiplier for the last layer of each coordinate MLP.
    coord_init_scale: float = 1e-3

    def __post_init__(self):
        for f in ("embed_dim_in", "hidden_dim", "message_dim", "n_virtual"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 2
    head_dim: int = 128
    sigma: float = 4.0

    def check(self, hidden_dim: int) -> None:
        if self.heads * self.head_dim != hidden_dim:
            raise ValueError(f"heads*head_dim = {self.heads * self.head_dim} must equal hidden_dim {hidden_dim}")


@dataclass(frozen=True)
class DecoderConfig:
    fingerprint_dim: int = 32
    fingerprint_hidden: int = 128
    knn_k: int = 8
    contact_hidden: tuple[int, ...] = (128, 128)
    proj_hidden: int = 256
    seq_hidden: int = 256
    rbf_min: float = 0.0
    rbf_max: float = 20.0
    rbf_count: int = 17

    def __post_init__(self):
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")

    @property
    def rbf(self) -> RbfSpec:
        return RbfSpec.uniform(self.rbf_min, self.rbf_max, self.rbf_count)


@dataclass(frozen=True)
class LossWeights:
    lambda_coord: float = 0.598
    lambda_contact: float = 1.763
    lambda_fp: float = 0.020
    lambda_pair: float = 0.103
    lambda_dock: float = 0.233
    lambda_aux: float = 0.200
    focal_gamma: float = 2.0
    contact_alpha: float = 4.47
    tau_fp: float = 0.1
    tau_pair: float = 0.1
    dock_cutoff: float = 8.0
    fp_threshold: float = 0.9
    huber_delta: float = 1.0
    detach_contact_weight: bool = True

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("lambda_") and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")
        if self.tau_fp <= 0 or self.tau_pair <= 0:
            raise ValueError("temperatures must be positive")
        if self.contact_alpha < 0:
            raise ValueError("contact_alpha must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 6.31e-4
    lr_decay: float = 0.944
    clip: float = 0.5
    batch_size: int = 8
    dropout: float = 0.1
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    precision: str = "float64"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 0-based ``epoch``."""
        return self.lr * self.lr_decay**epoch


@dataclass(frozen=True)
class ModelConfig:
    graph: GraphConfig = field(default_factory=GraphConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    # "given": CDR backbone from the input complex; "interpolate": straight line between anchors.
    cdr_init: str = "given"

    def __post_init__(self):
        if self.cdr_init not in ("given", "interpolate"):
            raise ValueError("cdr_init must be 'given' or 'interpolate'")
        if self.graph.n_virtual != self.encoder.n_virtual:
            raise ValueError("graph.n_virtual and encoder.n_virtual differ")
        self.attention.check(self.encoder.hidden_dim)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)


_SECTION_PATHS = {
    "train": ("train",),
    "loss": ("loss",),
    "model": ("model",),
    "graph": ("model", "graph"),
    "encoder": ("model", "encoder"),
    "attention": ("model", "attention"),
    "decoder": ("model", "decoder"),
}


def _scalar_fields(obj) -> dict[str, dataclasses.Field]:
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value) or isinstance(value, RbfSpec):
            continue
        out[f.name] = f
    return out


def _coerce(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            lowered = raw.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key}", key=key) from None


def _get_path(cfg, path):
    for p in path:
        cfg = getattr(cfg, p)
    return cfg


def _set_path(cfg, path, new):
    if not path:
        return new
    head, rest = path[0], path[1:]
    return replace(cfg, **{head: _set_path(getattr(cfg, head), rest, new)})


def apply_overrides(cfg: RunConfig, values: dict[str, dict[str, str]]) -> RunConfig:
    """Apply ``{section: {key: raw_string}}`` on top of ``cfg``.

    ``n_virtual`` lives in both [graph] and [encoder]; setting it in either
    section sets both. Cross-section constraints are checked once, after
    every section has been applied.
    """
    leaves = {s: _get_path(cfg, p) for s, p in _SECTION_PATHS.items()}
    for section, items in values.items():
        if section not in _SECTION_PATHS:
            raise ConfigError(f"unknown config section [{section}]", key=section)
        allowed = _scalar_fields(leaves[section])
        updates = {}
        for key, raw in items.items():
            if key not in allowed:
                raise ConfigError(f"unknown config key {section}.{key}", key=f"{section}.{key}")
            updates[key] = _coerce(raw, getattr(leaves[section], key), f"{section}.{key}")
        targets = [section]
        if "n_virtual" in updates and section in ("graph", "encoder"):
            targets = ["graph", "encoder"]
        for t in targets:
            mine = updates if t == section else {"n_virtual": updates["n_virtual"]}
            try:
                leaves[t] = replace(leaves[t], **mine)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {exc}", key=section) from None
    try:
        model = replace(
            leaves["model"],
            graph=leaves["graph"],
            encoder=leaves["encoder"],
            attention=leaves["attention"],
            decoder=leaves["decoder"],
        )
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}", key="model") from None
    return replace(cfg, model=model, loss=leaves["loss"], train=leaves["train"])


def loads_config(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}", key="") from None
    values = {s: dict(parser.items(s)) for s in parser.sections()}
    return apply_overrides(base or RunConfig(), values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads_config(fh.read(), base)


def dump_config(cfg: RunConfig) -> str:
    """Render every scalar setting in the config-file format."""
    lines = []
    for section, path in _SECTION_PATHS.items():
        target = _get_path(cfg, path)
        lines.append(f"[{section}]")
        for key in _scalar_fields(target):
            value = getattr(target, key)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
