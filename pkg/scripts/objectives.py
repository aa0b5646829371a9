#!/usr/bin/env python3
"""
Loss Functions

Regression losses (MSE, MAE, focal-modulated MSE), per-bit classification
losses (BCE, focal BCE) and the soft orthogonality penalty. Every loss takes
Tensors of equal shape and returns a scalar Tensor unless ``reduction='none'``.
"""

import numpy as np

import tensor as T
from errors import ConfigurationError, DimensionError, DomainError, ParameterError

BCE_EPS = 1e-7
REDUCTIONS = ("mean", "sum", "none")
REGRESSION_LOSSES = ("mse", "mae", "focal")
BIT_LOSSES = ("bce", "focal")


class FocalConfig:
    """Focusing parameter gamma >= 0 and class weight alpha in (0, 1]"""

    def __init__(self, gamma=0.0, alpha=1.0):
        if not gamma >= 0:
            raise ParameterError(f"focal gamma must be >= 0, got {gamma}")
        if not 0 < alpha <= 1:
            raise ParameterError(f"focal alpha must lie in (0, 1], got {alpha}")
        self.gamma = float(gamma)
        self.alpha = float(alpha)

    def __repr__(self):
        return f"FocalConfig(gamma={self.gamma}, alpha={self.alpha})"


def _pair(pred, target):
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} does not match target {target.shape}")
    return pred, target


def _reduce(per_element, reduction):
    if reduction == "mean":
        return T.reduce_mean(per_element)
    if reduction == "sum":
        return T.reduce_sum(per_element)
    if reduction == "none":
        return per_element
    raise ParameterError(f"unknown reduction '{reduction}'. Available: {list(REDUCTIONS)}")


def _check_labels(y):
    if not np.all((y.data == 0.0) | (y.data == 1.0)):
        raise DomainError("binary labels must be 0 or 1")


def mse_loss(pred, target, reduction="mean"):
    pred, target = _pair(pred, target)
    return _reduce(T.square(T.sub(pred, target)), reduction)


def mae_loss(pred, target, reduction="mean"):
    """Mean absolute error; the subgradient at an exact tie is 0"""
    pred, target = _pair(pred, target)
    return _reduce(T.absolute(T.sub(pred, target)), reduction)


def _clamped(p):
    return T.clip(p, BCE_EPS, 1.0 - BCE_EPS)


def _one_minus(t):
    return T.add_scalar(T.neg(t), 1.0)


def bce_loss(p, y, reduction="mean"):
    p, y = _pair(p, y)
    _check_labels(y)
    pc = _clamped(p)
    log_lik = T.add(T.mul(y, T.log(pc)), T.mul(_one_minus(y), T.log(_one_minus(pc))))
    return _reduce(T.neg(log_lik), reduction)


def focal_bce(p, y, cfg=None, reduction="mean"):
    """-alpha (1 - p_t)^gamma log(p_t), p_t = p where y = 1 else 1 - p"""
    cfg = cfg or FocalConfig()
    p, y = _pair(p, y)
    _check_labels(y)
    pc = _clamped(p)
    p_t = T.add(T.mul(y, pc), T.mul(_one_minus(y), _one_minus(pc)))
    modulation = T.power(_one_minus(p_t), cfg.gamma)
    per_element = T.scale(T.mul(modulation, T.log(p_t)), -cfg.alpha)
    return _reduce(per_element, reduction)


def focal_mse(pred, target, cfg=None, reduction="mean"):
    """w·e² with w = (1 - exp(-e²))^gamma; gamma = 0 is plain MSE"""
    cfg = cfg or FocalConfig()
    pred, target = _pair(pred, target)
    sq = T.square(T.sub(pred, target))
    modulation = T.power(_one_minus(T.exp(T.neg(sq))), cfg.gamma)
    return _reduce(T.mul(modulation, sq), reduction)


def soft_orthogonality_penalty(weight, lam):
    """lam · ||W Wᵀ - I||²_F"""
    if not lam >= 0:
        raise ParameterError(f"orthogonality weight must be >= 0, got {lam}")
    weight = T.as_tensor(weight)
    if weight.ndim != 2:
        raise DimensionError(f"orthogonality penalty needs a matrix, got shape {weight.shape}")
    gram = T.matmul(weight, T.transpose(weight))
    residual = T.sub(gram, T.Tensor(np.eye(weight.shape[0])))
    return T.scale(T.reduce_sum(T.square(residual)), float(lam))


def regression_loss(kind, pred, target, focal=None):
    if kind == "mse":
        return mse_loss(pred, target)
    if kind == "mae":
        return mae_loss(pred, target)
    if kind == "focal":
        return focal_mse(pred, target, focal)
    raise ConfigurationError(f"loss '{kind}' is not valid for regression targets. Valid: {list(REGRESSION_LOSSES)}")


def bit_loss(kind, probs, bits, focal=None):
    if kind == "bce":
        return bce_loss(probs, bits)
    if kind == "focal":
        return focal_bce(probs, bits, focal)
    raise ConfigurationError(f"loss '{kind}' is not valid for encoded targets. Valid: {list(BIT_LOSSES)}")
