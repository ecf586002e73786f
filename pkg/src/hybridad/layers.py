"""Parameterised building blocks on top of :mod:`hybridad.autodiff`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                   fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Registers Tensor parameters, buffers and sub-modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        return self.forward(x, training, rng)

    def forward(self, x: Tensor, training: bool, rng) -> Tensor:  # pragma: no cover
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
        self.layers = list(layers)

    def forward(self, x, training, rng):
        for layer in self.layers:
            x = layer(x, training, rng)
        return x


class Dense(Module):
    """Affine map over the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, init: str = "he",
                 scale: float = 1.0):
        super().__init__()
        if init == "he":
            w = he_uniform(rng, (d_in, d_out), d_in)
        else:
            w = xavier_uniform(rng, (d_in, d_out), d_in, d_out)
        self.weight = Tensor(w * scale, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def forward(self, x, training, rng):
        return ad.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = False):
        super().__init__()
        fan_in = c_in * kernel * kernel
        self.weight = Tensor(he_uniform(rng, (c_out, c_in, kernel, kernel), fan_in),
                             requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.has_bias = bias
        self.stride = stride
        self.padding = padding

    def forward(self, x, training, rng):
        bias = self.bias if self.has_bias else None
        return ad.conv2d(x, self.weight, bias, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, training, rng):
        return ad.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def forward(self, x, training, rng):
        return ad.layernorm(x, self.gamma, self.beta, self.eps)


class MaxPool(Module):
    def __init__(self, window: int = 2, stride: int | None = None):
        super().__init__()
        self.window = window
        self.stride = stride or window

    def forward(self, x, training, rng):
        return ad.maxpool2d(x, self.window, self.stride)


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate

    def forward(self, x, training, rng):
        return ad.dropout(x, self.rate, training, rng)


def flatten(x: Tensor) -> Tensor:
    return ad.reshape(x, (x.shape[0], -1))


class ConvBlock(Module):
    """conv -> batchnorm -> relu, optionally followed by 2x2 max-pooling."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, pool: bool = True):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.bn = BatchNorm(c_out)
        self.pool = pool

    def forward(self, x, training, rng):
        x = ad.relu(self.bn(self.conv(x, training, rng), training, rng))
        return ad.maxpool2d(x, 2, 2) if self.pool else x


class ResidualBlock(Module):
    """relu(bn(conv(relu(bn(conv(x))))) + shortcut(x)) with 3x3 convolutions."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, projection: bool = True):
        super().__init__()
        if c_in != c_out and not projection:
            raise ConfigError(
                f"residual skip joins {c_in} and {c_out} channels; enable the 1x1 projection")
        self.conv1 = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.bn1 = BatchNorm(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, padding=1)
        self.bn2 = BatchNorm(c_out)
        if c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, rng)
            self.proj_bn = BatchNorm(c_out)
        self.projects = c_in != c_out

    def forward(self, x, training, rng):
        h = ad.relu(self.bn1(self.conv1(x, training, rng), training, rng))
        h = self.bn2(self.conv2(h, training, rng), training, rng)
        skip = self.proj_bn(self.proj(x, training, rng), training, rng) if self.projects else x
        return ad.relu(h + skip)


class PatchEmbed(Module):
    """Split N,C,H,W images into non-overlapping p x p patches and project them."""

    def __init__(self, channels: int, height: int, width: int, patch: int, dim: int,
                 rng: np.random.Generator, positional: bool = True):
        super().__init__()
        if patch < 1 or height % patch or width % patch:
            raise ConfigError(f"image {height}x{width} is not divisible by patch size {patch}")
        n_patches = (height // patch) * (width // patch)
        self.proj = Dense(channels * patch * patch, dim, rng, init="xavier")
        if positional:
            self.pos = Tensor(rng.normal(0.0, 0.02, size=(1, n_patches, dim)), requires_grad=True)
        self.patch = patch
        self.positional = positional
        self.num_patches = n_patches

    def patches(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        p = self.patch
        if h % p or w % p:
            raise DimensionError(f"image {h}x{w} is not divisible by patch size {p}")
        x = ad.reshape(x, (n, c, h // p, p, w // p, p))
        x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
        return ad.reshape(x, (n, (h // p) * (w // p), c * p * p))

    def forward(self, x, training, rng):
        tokens = self.proj(self.patches(x), training, rng)
        return tokens + self.pos if self.positional else tokens


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention with ``heads`` heads over N,S,D tokens."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ConfigError(f"embedding dim {dim} is not divisible by {heads} heads")
        self.query = Dense(dim, dim, rng, init="xavier")
        self.key = Dense(dim, dim, rng, init="xavier")
        self.value = Dense(dim, dim, rng, init="xavier")
        self.out = Dense(dim, dim, rng, init="xavier")
        self.heads = heads

    def _split(self, t: Tensor) -> Tensor:
        n, s, d = t.shape
        return ad.transpose(ad.reshape(t, (n, s, self.heads, d // self.heads)), (0, 2, 1, 3))

    def attention(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (attention weights N,h,S,S, merged per-head context N,S,D)."""
        n, s, d = x.shape
        q = self._split(self.query(x))
        k = self._split(self.key(x))
        v = self._split(self.value(x))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d // self.heads))
        weights = ad.softmax(scores)
        ctx = ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3))
        return weights, ad.reshape(ctx, (n, s, d))

    def forward(self, x, training, rng):
        if x.ndim != 3:
            raise DimensionError(f"attention expects N,S,D tokens, got {x.shape}")
        return self.out(self.attention(x)[1])


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, d_out: int | None = None):
        super().__init__()
        self.fc1 = Dense(dim, hidden, rng, init="xavier")
        self.fc2 = Dense(hidden, d_out or dim, rng, init="xavier")

    def forward(self, x, training, rng):
        return self.fc2(ad.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_dim: int, rng: np.random.Generator):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim, rng)

    def forward(self, x, training, rng):
        x = x + self.attn(self.ln1(x), training, rng)
        return x + self.mlp(self.ln2(x), training, rng)


class MixerBlock(Module):
    """Token-mixing MLP across the sequence axis, then channel-mixing MLP."""

    def __init__(self, tokens: int, dim: int, token_hidden: int, channel_hidden: int,
                 rng: np.random.Generator):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.token_mlp = MLP(tokens, token_hidden, rng)
        self.ln2 = LayerNorm(dim)
        self.channel_mlp = MLP(dim, channel_hidden, rng)

    def forward(self, x, training, rng):
        y = ad.transpose(self.ln1(x), (0, 2, 1))
        x = x + ad.transpose(self.token_mlp(y, training, rng), (0, 2, 1))
        return x + self.channel_mlp(self.ln2(x), training, rng)
