#!/usr/bin/env python3
"""
Orthogonal Weight Modification and Adam

A Projector keeps P, the orthogonal complement (up to damping alpha) of the
inputs a layer has already consumed. Gradients of a layer y = W x are
projected on the input side, G' = G P, so that later updates leave the
responses to earlier inputs (nearly) unchanged.

AdamState is a plain bias-corrected Adam over Tensor parameters. When a
projector is supplied for a parameter, both the raw gradient and the final
Adam step are projected, so the applied update stays inside range(P).
"""

import warnings
from statistics import median

import numpy as np

import tensor as T
from errors import ContractError, DimensionError, ParameterError
from nn_blocks import LinearLayer, ReLU, Sequential


class OWMWarning(UserWarning):
    """Projector update ignored (zero input vector)"""


class Projector:
    def __init__(self, dim, alpha=1e-3):
        if dim < 1:
            raise ParameterError(f"projector dimension must be positive, got {dim}")
        if not alpha > 0:
            raise ParameterError(f"projector damping alpha must be > 0, got {alpha}")
        self.dim = int(dim)
        self.alpha = float(alpha)
        self.P = np.eye(self.dim)
        self.updates = 0

    def copy(self):
        clone = Projector(self.dim, self.alpha)
        clone.P = self.P.copy()
        clone.updates = self.updates
        return clone

    def update(self, x):
        """P <- P - P x xᵀ P / (alpha + xᵀ P x)"""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape[0] != self.dim:
            raise DimensionError(f"input of length {x.shape[0]} does not match projector dim {self.dim}")
        if not np.any(x):
            warnings.warn("zero input vector; projector left unchanged", OWMWarning, stacklevel=2)
            return self
        k = self.P @ x
        self.P = self.P - np.outer(k, k) / (self.alpha + x @ k)
        self.P = 0.5 * (self.P + self.P.T)
        self.updates += 1
        return self

    def project(self, grad):
        g = np.asarray(grad, dtype=np.float64)
        if g.ndim != 2 or g.shape[1] != self.dim:
            raise DimensionError(f"gradient shape {g.shape} does not match projector dim {self.dim}")
        return g @ self.P

    def __repr__(self):
        return f"Projector(dim={self.dim}, alpha={self.alpha}, updates={self.updates})"


def projector_update(pr, x):
    return pr.update(x)


def project_gradient(pr, grad):
    if isinstance(grad, T.Tensor):
        return T.Tensor(pr.project(grad.data))
    return pr.project(grad)


class AdamState:
    """Bias-corrected Adam; frozen parameters (requires_grad False) are skipped"""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if not lr > 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        b1, b2 = betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ParameterError(f"Adam betas must lie in [0, 1), got {betas}")
        self.params = list(params)
        self.lr = float(lr)
        self.betas = (float(b1), float(b2))
        self.eps = float(eps)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, projectors=None):
        projectors = projectors or {}
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise ContractError(f"trainable parameter {i} (shape {p.shape}) has no gradient")
            pr = projectors.get(id(p))
            g = pr.project(p.grad) if pr is not None else p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            delta = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            if pr is not None:
                delta = pr.project(delta)
            p.data = p.data - delta


def adam_step(state, params=None, grads=None, projectors=None):
    """Functional form: optionally install ``grads`` on ``params`` first"""
    if grads is not None:
        params = params if params is not None else state.params
        if len(params) != len(grads):
            raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
        for p, g in zip(params, grads):
            p.grad = None if g is None else np.asarray(g, dtype=np.float64)
    state.step(projectors)
    return state.params


class OWMTracker:
    """
    Committed and pending projectors for a set of linear layers.

    Gradients are projected with the committed projectors; the batch-mean
    inputs seen while training a task go into the pending ones, which become
    committed at the task boundary.
    """

    def __init__(self, layers, alpha=1e-3):
        self.layers = list(layers)
        self.alpha = alpha
        self.committed = [Projector(layer.in_features, alpha) for layer in self.layers]
        self.pending = [pr.copy() for pr in self.committed]

    def record_batch(self):
        for layer, pr in zip(self.layers, self.pending):
            if layer._last_input is None:
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", OWMWarning)
                pr.update(layer._last_input.mean(axis=0))

    def commit(self):
        self.committed = [pr.copy() for pr in self.pending]

    def projectors(self):
        return {id(layer.weight): pr for layer, pr in zip(self.layers, self.committed)}


# ---------------------------------------------------------------------------
# continual-learning toy: two regression tasks on disjoint input coordinates

def _continual_task(rng, offset, n, dim=8, active=4):
    x = np.zeros((n, dim))
    x[:, offset:offset + active] = rng.normal(size=(n, active))
    coef = rng.normal(size=active)
    y = x[:, offset:offset + active] @ coef
    return x, y[:, None]


def _fit(model, x, y, rng, epochs, batch_size, lr, tracker=None, project=False):
    opt = AdamState(model.trainable_parameters(), lr=lr)
    projectors = tracker.projectors() if (tracker is not None and project) else None
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            loss = T.reduce_mean(T.square(T.sub(model(T.Tensor(x[idx])), T.Tensor(y[idx]))))
            loss.backward()
            opt.step(projectors)
            if tracker is not None:
                tracker.record_batch()


def _task_loss(model, x, y):
    with T.no_grad():
        return float(np.mean((model(T.Tensor(x)).data - y) ** 2))


def run_continual_toy(seed, use_owm=True, n=256, hidden=16, epochs=10, batch_size=4, lr=1e-3, alpha=1e-3):
    """
    Train task A, then task B, on a bias-free 2-layer relu net.

    Returns task-A loss before and after task B, and the final task-B loss.
    """
    rng = np.random.default_rng(seed)
    xa, ya = _continual_task(rng, 0, n)
    xb, yb = _continual_task(rng, 4, n)
    first = LinearLayer(8, hidden, seed=rng, bias=False)
    second = LinearLayer(hidden, 1, seed=rng, bias=False)
    model = Sequential(first, ReLU(), second)
    tracker = OWMTracker([first, second], alpha=alpha)

    _fit(model, xa, ya, rng, epochs, batch_size, lr, tracker=tracker)
    tracker.commit()
    before = _task_loss(model, xa, ya)
    _fit(model, xb, yb, rng, epochs, batch_size, lr, tracker=tracker, project=use_owm)
    return {
        "seed": seed,
        "owm": use_owm,
        "task_a_before": before,
        "task_a_after": _task_loss(model, xa, ya),
        "task_b": _task_loss(model, xb, yb),
    }


def compare_continual(seeds=range(10), **kwargs):
    """Median task-A loss after task B, with and without projection"""
    seeds = list(seeds)
    plain = [run_continual_toy(s, use_owm=False, **kwargs) for s in seeds]
    owm = [run_continual_toy(s, use_owm=True, **kwargs) for s in seeds]
    return {
        "seeds": seeds,
        "plain_runs": plain,
        "owm_runs": owm,
        "median_task_a_plain": median(r["task_a_after"] for r in plain),
        "median_task_a_owm": median(r["task_a_after"] for r in owm),
        "median_task_b_plain": median(r["task_b"] for r in plain),
        "median_task_b_owm": median(r["task_b"] for r in owm),
    }
