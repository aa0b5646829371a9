#!/usr/bin/env python3
"""
Student-Teacher Self-Distillation

Two stochastic views per sample; the student is trained to match the
teacher's centred, sharpened distribution of the other view. The teacher
never receives gradients: it follows the student by an exponential moving
average, and so does the centre vector C (over teacher outputs).
"""

import copy
import os

import numpy as np
import pandas as pd
from tqdm import tqdm

import tensor as T
from errors import DimensionError, ParameterError
from nn_blocks import LinearLayer, Module, ReLU, Sequential, make_rng
from owm_optimizer import AdamState

TOY_TEACHER_MOMENTUM = 0.9


class DistillState:
    """Student, EMA teacher, centre and the four schedule constants"""

    def __init__(self, student, out_dim, tps=0.1, tpt=0.04, teacher_momentum=0.996, center_momentum=0.9):
        for name, value in (("tps", tps), ("tpt", tpt)):
            if not value > 0:
                raise ParameterError(f"{name} must be positive, got {value}")
        for name, value in (("teacher momentum", teacher_momentum), ("center momentum", center_momentum)):
            if not 0 <= value <= 1:
                raise ParameterError(f"{name} must lie in [0, 1], got {value}")
        self.student = student
        self.teacher = copy.deepcopy(student).freeze()
        self.center = np.zeros(out_dim)
        self.out_dim = int(out_dim)
        self.tps = float(tps)
        self.tpt = float(tpt)
        self.l = float(teacher_momentum)
        self.m = float(center_momentum)
        self.steps = 0

    def divergence(self):
        """L2 distance between teacher and student parameter vectors"""
        return float(np.linalg.norm(self.teacher.flat_parameters() - self.student.flat_parameters()))

    def update_teacher(self):
        for gt, gs in zip(self.teacher.parameters(), self.student.parameters()):
            gt.data = self.l * gt.data + (1.0 - self.l) * gs.data

    def update_center(self, teacher_outputs):
        batch_center = np.concatenate(teacher_outputs, axis=0).mean(axis=0)
        self.center = self.m * self.center + (1.0 - self.m) * batch_center


def teacher_distribution(t, st):
    """softmax((t - C) / tpt), computed off the tape"""
    t_data = t.data if isinstance(t, T.Tensor) else np.asarray(t, dtype=np.float64)
    with T.no_grad():
        return T.softmax(T.Tensor(t_data - st.center), axis=1, temperature=st.tpt).data


def distill_cross_entropy(t, s, st):
    """mean over the batch of -sum_k P_teacher,k log P_student,k"""
    s = T.as_tensor(s)
    t_shape = t.shape if isinstance(t, T.Tensor) else np.shape(t)
    if tuple(t_shape) != s.shape or s.ndim != 2:
        raise DimensionError(f"teacher logits {tuple(t_shape)} and student logits {s.shape} must be equal n×K")
    targets = T.Tensor(teacher_distribution(t, st))
    log_student = T.log_softmax(s, axis=1, temperature=st.tps)
    per_sample = T.reduce_sum(T.mul(targets, log_student), axis=1)
    return T.neg(T.reduce_mean(per_sample))


def make_augment(noise=0.1, dropout=0.1):
    """Additive Gaussian noise plus random coordinate dropout"""
    def augment(x, rng):
        keep = rng.uniform(size=x.shape) >= dropout
        return x * keep + rng.normal(scale=noise, size=x.shape)
    return augment


def distill_step(st, batch, augment, opt, rng):
    """
    One symmetric update: H(t1, s2)/2 + H(t2, s1)/2, optimizer step on the
    student (skipped when ``opt`` is None), then teacher and centre EMAs.
    """
    batch = batch.data if isinstance(batch, T.Tensor) else np.asarray(batch, dtype=np.float64)
    if batch.shape[0] < 1:
        raise DimensionError("distillation batch must contain at least one sample")
    x1 = T.Tensor(augment(batch, rng))
    x2 = T.Tensor(augment(batch, rng))
    s1, s2 = st.student(x1), st.student(x2)
    with T.no_grad():
        t1, t2 = st.teacher(x1), st.teacher(x2)
    loss = T.add(
        T.scale(distill_cross_entropy(t1, s2, st), 0.5),
        T.scale(distill_cross_entropy(t2, s1, st), 0.5),
    )
    if opt is not None:
        opt.zero_grad()
        loss.backward()
        opt.step()
    st.update_teacher()
    st.update_center([t1.data, t2.data])
    st.steps += 1
    return loss.item(), st


def collapse_diagnostics(st, probe):
    probe = probe.data if isinstance(probe, T.Tensor) else np.asarray(probe, dtype=np.float64)
    if probe.shape[0] < 1:
        raise DimensionError("probe batch must not be empty")
    with T.no_grad():
        logits = st.teacher(T.Tensor(probe)).data
    mean_dist = teacher_distribution(logits, st).mean(axis=0)
    nonzero = mean_dist[mean_dist > 0]
    return {
        "output_std": logits.std(axis=0),
        "mean_std": float(logits.std(axis=0).mean()),
        "entropy": float(-(nonzero * np.log(nonzero)).sum()),
        "max_entropy": float(np.log(st.out_dim)),
    }


# ---------------------------------------------------------------------------
# toy runs

def projection_network(in_dim, out_dim, hidden=16, seed=0, init_scale=1.0):
    """
    Two-layer projection to K logits. ``init_scale`` shrinks the output
    layer so the first distributions start close to uniform.
    """
    rng = make_rng(seed)
    hidden_layer = LinearLayer(in_dim, hidden, seed=rng)
    output = LinearLayer(hidden, out_dim, seed=rng)
    output.weight.data = output.weight.data * init_scale
    output.bias.data = output.bias.data * init_scale
    return Sequential(hidden_layer, ReLU(), output)


def two_cluster_data(n, dim=4, separation=3.0, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(2, dim))
    centers = separation * centers / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = rng.integers(0, 2, size=n)
    return centers[labels] + rng.normal(scale=0.5, size=(n, dim)), labels


def run_distillation(st, data, steps=200, batch_size=32, lr=5e-3, augment=None, seed=0, verbose=True):
    """Run the distillation loop; returns per-step records"""
    rng = np.random.default_rng(seed)
    augment = augment or make_augment()
    opt = AdamState(st.student.trainable_parameters(), lr=lr)
    records = []
    iterator = range(1, steps + 1)
    if verbose:
        iterator = tqdm(iterator, desc="Distillation")
    for step in iterator:
        idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
        loss, _ = distill_step(st, data[idx], augment, opt, rng)
        records.append({
            "step": step,
            "loss": loss,
            "divergence": st.divergence(),
            "center_norm": float(np.linalg.norm(st.center)),
        })
    return records


def run_distill_toy(steps=200, out_dim=8, hidden=16, n=512, batch_size=32, lr=5e-3, tps=0.1, tpt=0.04,
                    teacher_momentum=TOY_TEACHER_MOMENTUM, center_momentum=0.9, init_scale=0.01, seed=0,
                    verbose=True):
    """
    Two-cluster toy run. The teacher follows faster than in long runs
    (momentum 0.9) so the sharpening loop settles within a few hundred steps.
    """
    data, _ = two_cluster_data(n, seed=seed)
    student = projection_network(data.shape[1], out_dim, hidden=hidden, seed=seed + 1, init_scale=init_scale)
    st = DistillState(student, out_dim, tps, tpt, teacher_momentum, center_momentum)
    records = run_distillation(st, data, steps, batch_size, lr, seed=seed + 2, verbose=verbose)
    return {
        "state": st,
        "records": records,
        "diagnostics": collapse_diagnostics(st, data),
    }


def write_distill_log(records, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame = pd.DataFrame(records, columns=["step", "loss", "divergence", "center_norm"])
    frame.to_csv(path, index=False, float_format="%.9g")
    return path


# ---------------------------------------------------------------------------
# self-supervised pretraining of an image backbone

class BackboneProjector(Module):
    """Backbone embedding followed by a relu projection to K logits"""

    def __init__(self, backbone, out_dim, seed=0):
        self.backbone = backbone
        self.head = LinearLayer(backbone.embedding_dim, out_dim, seed=seed)

    def forward(self, x):
        embedding, _ = self.backbone(x)
        return self.head(T.relu(embedding))


def pretrain_backbone(backbone, images, steps=50, out_dim=8, batch_size=8, lr=1e-3, seed=0,
                      augment=None, verbose=True):
    """
    Distil ``backbone`` (a deep copy is trained) on unlabeled images.

    Returns the teacher's backbone, frozen, plus the step records.
    """
    student = BackboneProjector(copy.deepcopy(backbone).unfreeze(), out_dim, seed=seed)
    st = DistillState(student, out_dim)
    augment = augment or make_augment(noise=0.05, dropout=0.05)
    records = run_distillation(st, images, steps, batch_size, lr, augment=augment, seed=seed, verbose=verbose)
    return st.teacher.backbone.freeze(), records
