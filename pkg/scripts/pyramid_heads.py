#!/usr/bin/env python3
"""
Feature Pyramid Fusion and Regression Heads

- FeaturePyramid: per-level 5×5 conv, resize to a common grid (14×14 by
  default), elementwise sum
- MLPHead / AttentionHead: regressors over backbone embeddings, emitting one
  value or B bit logits
- ensemble_train_predict: K independently seeded members trained in a
  thread pool and averaged in member-index order
"""

import concurrent.futures

import numpy as np
from tqdm import tqdm

import tensor as T
from errors import ConfigurationError, DimensionError, ParameterError
from nn_blocks import AttentionBlock, Conv2dLayer, LinearLayer, Module, make_rng, resize_to


class PyramidConfig:
    def __init__(self, resolutions=(320, 160, 80), target_size=14, channels=4, in_channels=None, mode="bilinear"):
        resolutions = [int(r) for r in resolutions]
        if not resolutions or any(r < 1 for r in resolutions):
            raise ConfigurationError(f"pyramid resolutions must be positive, got {resolutions}")
        if len(set(resolutions)) != len(resolutions):
            raise ConfigurationError(f"pyramid resolutions must be distinct, got {resolutions}")
        if target_size < 1 or channels < 1:
            raise ParameterError(f"target size and channels must be positive, got {target_size}, {channels}")
        self.resolutions = resolutions
        self.target_size = int(target_size)
        self.channels = int(channels)
        self.in_channels = int(in_channels or channels)
        self.mode = mode

    def __repr__(self):
        return (f"PyramidConfig(resolutions={self.resolutions}, target_size={self.target_size}, "
                f"channels={self.channels})")


class FeaturePyramid(Module):
    """One 5×5 conv per input resolution, keyed by that resolution"""

    def __init__(self, cfg, seed=0):
        rng = make_rng(seed)
        self.cfg = cfg
        self.convs = {str(r): Conv2dLayer(cfg.in_channels, cfg.channels, seed=rng) for r in cfg.resolutions}

    def forward(self, levels):
        return fpn_fuse(levels, self.cfg, self)

    @property
    def output_dim(self):
        return self.cfg.channels * self.cfg.target_size ** 2


def fpn_fuse(levels, cfg, pyramid=None):
    """
    Sum of resize(conv5x5(level)) over levels.

    Levels are matched to convolutions by spatial size and accumulated from
    largest to smallest, so the result does not depend on list order.
    """
    pyramid = pyramid or FeaturePyramid(cfg)
    if len(levels) != len(cfg.resolutions):
        raise ConfigurationError(f"expected {len(cfg.resolutions)} pyramid levels, got {len(levels)}")
    by_size = {}
    for level in levels:
        if level.ndim != 4 or level.shape[2] != level.shape[3]:
            raise ConfigurationError(f"pyramid levels must be square batch×C×H×W maps, got {level.shape}")
        size = level.shape[2]
        if size not in cfg.resolutions or size in by_size:
            raise ConfigurationError(
                f"level of size {size} does not match configured resolutions {cfg.resolutions}"
            )
        by_size[size] = level
    fused = None
    for size in sorted(by_size, reverse=True):
        level = by_size[size]
        mapped = pyramid.convs[str(size)](level)
        mapped = resize_to(mapped, cfg.target_size, cfg.target_size, cfg.mode)
        fused = mapped if fused is None else T.add(fused, mapped)
    return fused


def flatten_maps(x):
    return T.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


# ---------------------------------------------------------------------------
# heads

class MLPHead(Module):
    """Two relu hidden layers and a linear output (1 value or B logits)"""

    def __init__(self, in_dim, out_dim=1, hidden=(256, 64), seed=0):
        rng = make_rng(seed)
        widths = [in_dim] + list(hidden)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = [LinearLayer(a, b, seed=rng) for a, b in zip(widths, widths[1:])]
        self.output = LinearLayer(widths[-1], out_dim, seed=rng)

    @property
    def linear_layers(self):
        return self.hidden + [self.output]

    def forward(self, x):
        return mlp_head_forward(self, x)


def mlp_head_forward(head, embedding):
    if embedding.ndim != 2 or embedding.shape[1] != head.in_dim:
        raise DimensionError(f"head expects batch×{head.in_dim} embeddings, got {embedding.shape}")
    h = embedding
    for layer in head.hidden:
        h = T.relu(layer(h))
    return head.output(h)


def tokenize(embedding, tokens):
    """Split batch×D embeddings into batch×tokens×(D/tokens)"""
    d = embedding.shape[1]
    if tokens < 1 or d % tokens:
        raise DimensionError(f"embedding width {d} cannot be split into {tokens} tokens")
    return T.reshape(embedding, (embedding.shape[0], tokens, d // tokens))


class AttentionHead(Module):
    """Self-attention over tokens, mean-pool, linear output"""

    def __init__(self, token_dim, tokens, out_dim=1, seed=0):
        rng = make_rng(seed)
        self.token_dim = token_dim
        self.tokens = tokens
        self.out_dim = out_dim
        self.attention = AttentionBlock(token_dim, seed=rng, tokens=tokens)
        self.output = LinearLayer(token_dim, out_dim, seed=rng)

    @property
    def in_dim(self):
        return self.token_dim * self.tokens

    @property
    def linear_layers(self):
        return [self.attention.query, self.attention.key, self.attention.value, self.output]

    def forward(self, x):
        if x.ndim == 2:
            x = tokenize(x, self.tokens)
        return attention_head_forward(self, x)


def attention_head_forward(head, tokens):
    if tokens.ndim != 3 or tokens.shape[1] < 1:
        raise DimensionError(f"attention head expects batch×T×d tokens, got {tokens.shape}")
    attended = head.attention(tokens)
    pooled = T.reduce_mean(attended, axis=1)
    return head.output(pooled)


def build_head(kind, in_dim, out_dim=1, hidden=(256, 64), tokens=4, seed=0):
    if kind in ("mlp", "deep_ensemble"):
        return MLPHead(in_dim, out_dim, hidden=hidden, seed=seed)
    if kind == "attention":
        if in_dim % tokens:
            raise ConfigurationError(f"attention head needs embedding width divisible by {tokens}, got {in_dim}")
        return AttentionHead(in_dim // tokens, tokens, out_dim, seed=seed)
    raise ConfigurationError(f"unknown head '{kind}'. Available: ['attention', 'deep_ensemble', 'mlp']")


# ---------------------------------------------------------------------------
# deep ensemble

class EnsembleConfig:
    def __init__(self, k=5, seeds=None, base_seed=0):
        if int(k) != k or k < 2:
            raise ConfigurationError(f"ensemble needs at least 2 members, got k={k}")
        seeds = list(seeds) if seeds is not None else [base_seed + 1000 * i for i in range(int(k))]
        if len(seeds) != k:
            raise ConfigurationError(f"ensemble of {k} members got {len(seeds)} seeds")
        if len(set(seeds)) != len(seeds):
            raise ConfigurationError(f"ensemble member seeds must be distinct, got {seeds}")
        self.k = int(k)
        self.seeds = seeds
        self.aggregation = "mean"

    def __repr__(self):
        return f"EnsembleConfig(k={self.k}, seeds={self.seeds})"


def ensemble_train_predict(cfg, train_member, eval_inputs, max_workers=None, verbose=True):
    """
    ``train_member(seed)`` trains one member and returns a predict function.

    Returns (mean prediction, per-member predictions K×n, population variance);
    aggregation runs in member-index order whatever the completion order.
    """
    predictions = [None] * cfg.k
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers or cfg.k) as executor:
        future_to_member = {
            executor.submit(_train_and_predict, train_member, seed, eval_inputs): idx
            for idx, seed in enumerate(cfg.seeds)
        }
        completed = concurrent.futures.as_completed(future_to_member)
        if verbose:
            completed = tqdm(completed, total=cfg.k, desc="Ensemble members")
        for future in completed:
            predictions[future_to_member[future]] = future.result()
    members = np.stack(predictions)
    return members.mean(axis=0), members, members.var(axis=0)


def _train_and_predict(train_member, seed, eval_inputs):
    predict = train_member(seed)
    return np.asarray(predict(eval_inputs), dtype=np.float64).reshape(-1)


def jensen_gap(mean_prediction, members, target):
    """mean member MSE minus MSE of the mean; never negative"""
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    member_mse = np.mean((members - target[None, :]) ** 2, axis=1)
    ensemble_mse = float(np.mean((mean_prediction - target) ** 2))
    return {
        "ensemble_mse": ensemble_mse,
        "member_mse": member_mse.tolist(),
        "mean_member_mse": float(member_mse.mean()),
        "best_member_mse": float(member_mse.min()),
        "gap": float(member_mse.mean() - ensemble_mse),
    }
