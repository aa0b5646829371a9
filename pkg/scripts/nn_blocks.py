#!/usr/bin/env python3
"""
Neural Building Blocks

Linear and 5×5 convolution layers, spatial resizing, single-head attention and
the toy backbones that stand in for large pretrained feature extractors.
All parameters are float64 Tensors initialised uniformly in ±1/sqrt(fan_in)
from a seeded numpy Generator.
"""

import numpy as np

import tensor as T
from errors import ConfigurationError, DimensionError, ParameterError


def make_rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class: parameter discovery, freezing and state dicts"""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, T.Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
            elif isinstance(value, dict):
                for key in sorted(value):
                    if isinstance(value[key], Module):
                        yield from value[key].named_parameters(f"{path}.{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def modules(self):
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            children = []
            if isinstance(value, Module):
                children = [value]
            elif isinstance(value, (list, tuple)):
                children = [v for v in value if isinstance(v, Module)]
            elif isinstance(value, dict):
                children = [value[k] for k in sorted(value) if isinstance(value[k], Module)]
            for child in children:
                yield from child.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True
        return self

    @property
    def frozen(self):
        params = self.parameters()
        return bool(params) and not any(p.requires_grad for p in params)

    def parameter_count(self):
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigurationError(f"state dict mismatch; missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} vs parameter {p.shape}")
            p.data = arr.copy()

    def flat_parameters(self):
        params = self.parameters()
        return np.concatenate([p.data.reshape(-1) for p in params]) if params else np.zeros(0)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class LinearLayer(Module):
    """y = x·Wᵀ + b with W of shape out×in"""

    def __init__(self, in_features, out_features, seed=0, bias=True, frozen=False):
        if in_features < 1 or out_features < 1:
            raise ParameterError(f"layer widths must be positive, got {in_features}→{out_features}")
        rng = make_rng(seed)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = T.Tensor(uniform_init(rng, (out_features, in_features), in_features), requires_grad=True)
        self.bias = (
            T.Tensor(uniform_init(rng, (out_features,), in_features), requires_grad=True) if bias else None
        )
        # batch inputs of the latest forward pass, read by the OWM projector bookkeeping
        self._last_input = None
        if frozen:
            self.freeze()

    def forward(self, x):
        return linear_forward(self, x)


def linear_forward(layer, x):
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise DimensionError(
            f"linear layer expects batch×{layer.in_features}, got {x.shape} (weight {layer.weight.shape})"
        )
    layer._last_input = x.data
    out = T.matmul(x, T.transpose(layer.weight))
    if layer.bias is not None:
        out = T.add_broadcast(out, layer.bias)
    return out


class Conv2dLayer(Module):
    """5×5 convolution, stride 1, padding 2; spatial size is preserved"""

    kernel_size = 5
    stride = 1
    padding = 2

    def __init__(self, in_channels, out_channels, seed=0, frozen=False):
        rng = make_rng(seed)
        fan_in = in_channels * self.kernel_size * self.kernel_size
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = T.Tensor(
            uniform_init(rng, (out_channels, in_channels, self.kernel_size, self.kernel_size), fan_in),
            requires_grad=True,
        )
        self.bias = T.Tensor(uniform_init(rng, (out_channels,), fan_in), requires_grad=True)
        if frozen:
            self.freeze()

    def forward(self, x):
        return conv5x5_forward(self, x)


def conv5x5_forward(layer, x):
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise DimensionError(
            f"conv expects batch×{layer.in_channels}×H×W, got {x.shape} (kernel {layer.kernel.shape})"
        )
    return T.conv2d(x, layer.kernel, layer.bias, stride=layer.stride, padding=layer.padding)


# ---------------------------------------------------------------------------
# resizing

def interpolation_matrix(in_size, out_size, mode="bilinear"):
    """Rows map output positions to weights over input positions (each row sums to 1)"""
    if in_size < 1 or out_size < 1:
        raise ParameterError(f"sizes must be positive, got {in_size}→{out_size}")
    m = np.zeros((out_size, in_size))
    ratio = in_size / out_size
    if mode == "nearest":
        src = np.minimum(np.floor(np.arange(out_size) * ratio).astype(int), in_size - 1)
        m[np.arange(out_size), src] = 1.0
        return m
    if mode != "bilinear":
        raise ParameterError(f"unknown resize mode '{mode}'. Available: ['bilinear', 'nearest']")
    # half-pixel centres (align_corners=False)
    src = np.clip((np.arange(out_size) + 0.5) * ratio - 0.5, 0.0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_to(x, target_h, target_w, mode="bilinear"):
    if target_h < 1 or target_w < 1:
        raise ParameterError(f"target size must be positive, got {target_h}×{target_w}")
    if x.ndim != 4:
        raise DimensionError(f"resize_to expects batch×C×H×W, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    rows = interpolation_matrix(h, target_h, mode)
    cols = interpolation_matrix(w, target_w, mode)
    return T.separable_map(x, rows, cols)


# ---------------------------------------------------------------------------
# attention

class AttentionBlock(Module):
    """Single-head scaled dot-product self-attention over batch×T×d tokens"""

    def __init__(self, dim, seed=0, tokens=None, frozen=False):
        rng = make_rng(seed)
        self.dim = dim
        self.query = LinearLayer(dim, dim, seed=rng, bias=False)
        self.key = LinearLayer(dim, dim, seed=rng, bias=False)
        self.value = LinearLayer(dim, dim, seed=rng, bias=False)
        # learned per-token bias, the only positional signal
        self.token_bias = (
            T.Tensor(np.zeros((tokens, dim)), requires_grad=True) if tokens is not None else None
        )
        if frozen:
            self.freeze()

    def forward(self, x, return_weights=False):
        return attention_forward(self, x, return_weights=return_weights)


def _tokenwise(layer, x):
    b, t, d = x.shape
    flat = T.reshape(x, (b * t, d))
    return T.reshape(layer(flat), (b, t, layer.out_features))


def attention_forward(block, x, return_weights=False):
    if x.ndim != 3 or x.shape[2] != block.dim:
        raise DimensionError(f"attention expects batch×T×{block.dim}, got {x.shape}")
    if block.token_bias is not None:
        if block.token_bias.shape[0] != x.shape[1]:
            raise DimensionError(
                f"token bias covers {block.token_bias.shape[0]} tokens, input has {x.shape[1]}"
            )
        x = T.add_broadcast(x, block.token_bias)
    q = _tokenwise(block.query, x)
    k = _tokenwise(block.key, x)
    v = _tokenwise(block.value, x)
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / np.sqrt(block.dim))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# backbones

class ToyBackbone(Module):
    """
    Stand-in feature extractor.

    Image mode runs three 5×5 conv stages (the second and third preceded by
    2×2 average pooling) and returns the per-stage maps at sizes S, S/2, S/4
    plus an embedding: global average of the last stage through a linear
    projection. Feature mode is a linear stem over precomputed embeddings and
    emits no maps.
    """

    def __init__(self, kind, stem=None, stages=None, projection=None, input_sizes=(), in_dim=None):
        self.kind = kind
        self.stem = stem
        self.stages = stages or []
        self.projection = projection
        self.input_sizes = tuple(input_sizes)
        self.in_dim = in_dim

    @classmethod
    def for_features(cls, in_dim, out_dim=None, seed=0, frozen=True):
        stem = LinearLayer(in_dim, out_dim or in_dim, seed=seed)
        backbone = cls("features", stem=stem, in_dim=in_dim)
        if frozen:
            backbone.freeze()
        return backbone

    @classmethod
    def for_images(cls, input_sizes, channels=4, in_channels=1, embedding_dim=16, seed=0, frozen=True):
        sizes = tuple(int(s) for s in input_sizes)
        bad = [s for s in sizes if s < 4 or s % 4]
        if not sizes or bad:
            raise ConfigurationError(f"image sizes must be positive multiples of 4, got {list(sizes)}")
        rng = make_rng(seed)
        stages = [
            Conv2dLayer(in_channels, channels, seed=rng),
            Conv2dLayer(channels, channels, seed=rng),
            Conv2dLayer(channels, channels, seed=rng),
        ]
        projection = LinearLayer(channels, embedding_dim, seed=rng)
        backbone = cls("images", stages=stages, projection=projection, input_sizes=sizes)
        backbone.channels = channels
        backbone.in_channels = in_channels
        if frozen:
            backbone.freeze()
        return backbone

    @property
    def embedding_dim(self):
        if self.kind == "features":
            return self.stem.out_features
        return self.projection.out_features

    def level_sizes(self, size):
        return [size, size // 2, size // 4]

    def forward(self, x):
        return backbone_forward(self, x)


def backbone_forward(backbone, x):
    """Returns (embedding, levels); levels is empty in feature mode"""
    if backbone.kind == "features":
        return backbone.stem(x), []
    if x.ndim != 4 or x.shape[2] != x.shape[3] or x.shape[2] not in backbone.input_sizes:
        raise ConfigurationError(
            f"unsupported input {x.shape}; configured sizes are {list(backbone.input_sizes)}"
        )
    levels = []
    h = x
    for i, stage in enumerate(backbone.stages):
        if i > 0:
            h = T.avg_pool2d(h, 2)
        h = T.relu(stage(h))
        levels.append(h)
    pooled = T.reduce_mean(T.reduce_mean(h, axis=3), axis=2)
    return backbone.projection(pooled), levels
