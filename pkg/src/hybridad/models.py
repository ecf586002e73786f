"""Declarative model families: CustomCNN, residual CNN, patch transformers, MLP-Mixer."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import format_kv, from_kv, parse_kv, to_kv
from .errors import ConfigError, DimensionError, ParameterError
from .layers import (
    ConvBlock,
    Dense,
    Dropout,
    MaxPool,
    MixerBlock,
    Module,
    PatchEmbed,
    ResidualBlock,
    Sequential,
    TransformerBlock,
    flatten,
)

FAMILIES = ("custom_cnn", "patch_transformer", "conv_transformer", "simple_transformer",
            "mlp_mixer", "residual_cnn")
TRANSFORMER_FAMILIES = ("patch_transformer", "conv_transformer", "simple_transformer")
_DEFAULT_WIDTHS = {"custom_cnn": (16, 32, 64, 128), "residual_cnn": (16, 32, 64)}


@dataclass
class ModelConfig:
    """Architecture description; ``input_size`` is (height, width, channels)."""

    family: str = "custom_cnn"
    input_size: tuple[int, ...] = (32, 32, 3)
    num_classes: int = 4
    widths: tuple[int, ...] = ()
    dense_units: tuple[int, ...] = (64,)
    patch_size: int = 8
    embed_dim: int = 32
    heads: int = 2
    depth: int = 2
    mlp_dim: int = 64
    token_mlp_dim: int = 16
    stem_channels: int = 8
    dropout: float = 0.3
    projection_shortcut: bool = True
    head_init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.widths = tuple(int(v) for v in self.widths) or _DEFAULT_WIDTHS.get(self.family, ())
        self.dense_units = tuple(int(v) for v in self.dense_units)

    @property
    def height(self) -> int:
        return self.input_size[0]

    @property
    def width(self) -> int:
        return self.input_size[1]

    @property
    def channels(self) -> int:
        return self.input_size[2]

    def validate(self) -> "ModelConfig":
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            raise ConfigError(f"input_size must be three positive extents, got {self.input_size}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(w < 1 for w in self.widths) or any(u < 1 for u in self.dense_units):
            raise ConfigError("channel widths and dense units must be strictly positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.family == "custom_cnn":
            if len(self.widths) != 4:
                raise ConfigError(f"custom_cnn has exactly four blocks, got widths {self.widths}")
            if min(self.height, self.width) < 16:
                raise ConfigError(
                    f"custom_cnn input {self.height}x{self.width} cannot survive four 2x poolings")
        if self.family == "residual_cnn" and not self.widths:
            raise ConfigError("residual_cnn needs at least one block width")
        if self.family in TRANSFORMER_FAMILIES or self.family == "mlp_mixer":
            p = self.patch_size
            if p < 1 or self.height % p or self.width % p:
                raise ConfigError(
                    f"input {self.height}x{self.width} is not divisible by patch size {p}")
            if self.depth < 0:
                raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.family in TRANSFORMER_FAMILIES and (self.heads < 1 or self.embed_dim % self.heads):
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads")
        if self.family == "simple_transformer" and self.depth > 2:
            raise ConfigError(f"simple_transformer uses depth 0-2, got {self.depth}")
        return self

    def to_text(self) -> str:
        return format_kv(to_kv(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return from_kv(cls, parse_kv(text))

    def with_updates(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


class Classifier(Module):
    def __init__(self, features: Module, head: Module):
        super().__init__()
        self.features = features
        self.head = head

    def forward(self, x, training, rng):
        return ad.softmax(self.head(self.features(x, training, rng), training, rng))


class _TokenMean(Module):
    def forward(self, x, training, rng):
        return ad.tmean(x, axis=1)


class _SpatialMean(Module):
    def forward(self, x, training, rng):
        return ad.tmean(x, axis=(2, 3))


class _Flatten(Module):
    def forward(self, x, training, rng):
        return flatten(x)


class _ReLU(Module):
    def forward(self, x, training, rng):
        return ad.relu(x)


class Model:
    """A configured network plus the mode-aware forward pass.

    ``forward`` maps an N,C,H,W batch to N,K class probabilities.  Train mode
    uses batch statistics (and updates the running ones) and samples dropout
    masks from ``rng``.
    """

    def __init__(self, config: ModelConfig, network: Module):
        self.config = config
        self.network = network

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.network.named_parameters())

    def buffers(self) -> dict[str, np.ndarray]:
        return dict(self.network.named_buffers())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def forward(self, batch: Tensor | np.ndarray, mode: str = "infer",
                rng: np.random.Generator | None = None) -> Tensor:
        if mode not in ("train", "infer"):
            raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
        if not isinstance(batch, Tensor):
            batch = Tensor(batch)
        cfg = self.config
        expected = (cfg.channels, cfg.height, cfg.width)
        if batch.ndim != 4 or batch.shape[1:] != expected:
            raise DimensionError(f"batch shape {batch.shape} does not match N,{expected}")
        training = mode == "train"
        if training and rng is None:
            rng = np.random.default_rng(cfg.seed)
        return self.network(batch, training, rng)

    __call__ = forward

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters().values():
            p.requires_grad = False

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.parameters().items()}
        state.update({f"buffer:{name}": b.copy() for name, b in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params, buffers = self.parameters(), self.buffers()
        expected = set(params) | {f"buffer:{b}" for b in buffers}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise DimensionError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise DimensionError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]
        for name, b in buffers.items():
            b[...] = state[f"buffer:{name}"]


def _head(d_in: int, cfg: ModelConfig, rng: np.random.Generator, hidden=()) -> Sequential:
    layers: list[Module] = []
    for units in hidden:
        layers += [Dense(d_in, units, rng, init="he"), _ReLU(), Dropout(cfg.dropout)]
        d_in = units
    layers.append(Dense(d_in, cfg.num_classes, rng, init="xavier", scale=cfg.head_init_scale))
    return Sequential(*layers)


def build_custom_cnn(config: ModelConfig) -> Model:
    """Four [conv3x3 -> BN -> ReLU -> maxpool 2x2] blocks, flatten, dense+dropout, softmax."""
    cfg = config.validate()
    if cfg.family != "custom_cnn":
        raise ConfigError(f"build_custom_cnn got family {cfg.family!r}")
    rng = np.random.default_rng(cfg.seed)
    blocks, c_in = [], cfg.channels
    for width in cfg.widths:
        blocks.append(ConvBlock(c_in, width, rng))
        c_in = width
    h, w = cfg.height // 16, cfg.width // 16
    features = Sequential(*blocks, _Flatten())
    return Model(cfg, Classifier(features, _head(c_in * h * w, cfg, rng, cfg.dense_units)))


def build_residual_cnn(config: ModelConfig) -> Model:
    """Conv stem, residual blocks (2x2 pooling between them), global average pool, softmax."""
    cfg = config.validate()
    if cfg.family != "residual_cnn":
        raise ConfigError(f"build_residual_cnn got family {cfg.family!r}")
    rng = np.random.default_rng(cfg.seed)
    stem_width = cfg.widths[0]
    layers: list[Module] = [ConvBlock(cfg.channels, stem_width, rng, pool=False)]
    c_in = stem_width
    spatial = min(cfg.height, cfg.width)
    for i, width in enumerate(cfg.widths):
        layers.append(ResidualBlock(c_in, width, rng, projection=cfg.projection_shortcut))
        c_in = width
        if i < len(cfg.widths) - 1 and spatial >= 4:
            layers.append(MaxPool(2))
            spatial //= 2
    layers.append(_SpatialMean())
    return Model(cfg, Classifier(Sequential(*layers), _head(c_in, cfg, rng)))


def build_transformer(config: ModelConfig) -> Model:
    """Patch embedding, ``depth`` pre-norm attention blocks, token mean-pool, softmax.

    ``conv_transformer`` prepends a conv-BN-ReLU stem; ``simple_transformer``
    drops the positional embedding and caps depth at two.
    """
    cfg = config.validate()
    if cfg.family not in TRANSFORMER_FAMILIES:
        raise ConfigError(f"build_transformer got family {cfg.family!r}")
    rng = np.random.default_rng(cfg.seed)
    layers: list[Module] = []
    c_in = cfg.channels
    if cfg.family == "conv_transformer":
        layers.append(ConvBlock(c_in, cfg.stem_channels, rng, pool=False))
        c_in = cfg.stem_channels
    layers.append(PatchEmbed(c_in, cfg.height, cfg.width, cfg.patch_size, cfg.embed_dim, rng,
                             positional=cfg.family != "simple_transformer"))
    layers += [TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_dim, rng)
               for _ in range(cfg.depth)]
    layers.append(_TokenMean())
    return Model(cfg, Classifier(Sequential(*layers), _head(cfg.embed_dim, cfg, rng)))


def build_mlp_mixer(config: ModelConfig) -> Model:
    cfg = config.validate()
    if cfg.family != "mlp_mixer":
        raise ConfigError(f"build_mlp_mixer got family {cfg.family!r}")
    rng = np.random.default_rng(cfg.seed)
    embed = PatchEmbed(cfg.channels, cfg.height, cfg.width, cfg.patch_size, cfg.embed_dim, rng,
                       positional=False)
    layers: list[Module] = [embed]
    layers += [MixerBlock(embed.num_patches, cfg.embed_dim, cfg.token_mlp_dim, cfg.mlp_dim, rng)
               for _ in range(cfg.depth)]
    layers.append(_TokenMean())
    return Model(cfg, Classifier(Sequential(*layers), _head(cfg.embed_dim, cfg, rng)))


_BUILDERS: dict[str, Callable[[ModelConfig], Model]] = {
    "custom_cnn": build_custom_cnn,
    "residual_cnn": build_residual_cnn,
    "patch_transformer": build_transformer,
    "conv_transformer": build_transformer,
    "simple_transformer": build_transformer,
    "mlp_mixer": build_mlp_mixer,
}


def build_model(config: ModelConfig) -> Model:
    config.validate()
    return _BUILDERS[config.family](config)


def forward(model: Model, batch, mode: str = "infer", rng=None) -> Tensor:
    return model.forward(batch, mode, rng)


def _desk(family: str, **kw) -> ModelConfig:
    return ModelConfig(family=family, **kw)


# Desk-scale stand-ins for the eleven standalone models; names are the ensemble member ids.
DESK_ZOO: dict[str, ModelConfig] = {
    "efficientnetb0": _desk("residual_cnn", widths=(8, 16, 32)),
    "resnet50": _desk("residual_cnn", widths=(16, 32, 64)),
    "densenet201": _desk("residual_cnn", widths=(12, 24, 48)),
    "mobilenetv3": _desk("custom_cnn", widths=(4, 8, 16, 32), dense_units=(32,)),
    "vgg16": _desk("custom_cnn", widths=(16, 32, 64, 128), dense_units=(128,)),
    "customcnn": _desk("custom_cnn", widths=(8, 16, 32, 64), dense_units=(64,)),
    "vit": _desk("patch_transformer", patch_size=8, embed_dim=32, heads=4, depth=2),
    "convtransformer": _desk("conv_transformer", patch_size=8, embed_dim=32, heads=2, depth=2),
    "patchtransformer": _desk("patch_transformer", patch_size=4, embed_dim=16, heads=2, depth=1),
    "mlpmixer": _desk("mlp_mixer", patch_size=8, embed_dim=32, depth=2),
    "simpletransformer": _desk("simple_transformer", patch_size=8, embed_dim=16, heads=2, depth=1),
}


def desk_config(name: str, **overrides) -> ModelConfig:
    try:
        base = DESK_ZOO[name]
    except KeyError:
        raise ConfigError(f"unknown desk model {name!r}; known: {sorted(DESK_ZOO)}") from None
    return replace(base, **overrides)
