#!/usr/bin/env python3
"""
Core Training Engine

Seeded mini-batch Adam training of a (frozen) backbone, an optional feature
pyramid and a regression head, with:

- plain regression on standardised targets (mse / mae / focal-mse), or
  B-bit target encoding trained per bit (bce / focal) and decoded to mm
- orthogonal regularisation: soft penalty on head weights, OWM gradient
  projection, or both
- deep ensembles trained member-parallel in a thread pool
- sequential multi-task training on a shared trunk (task-boundary OWM commits)
- .npz checkpoints
"""

import copy
import json
import math
import os

import numpy as np
from tqdm import tqdm

import tensor as T
from analysis_tools import MetricsRecord
from config import ExperimentConfig
from data_io import get_task
from errors import ConfigurationError, DimensionError, NumericFailure
from nn_blocks import LinearLayer, Module, ToyBackbone, make_rng
from objectives import FocalConfig, bit_loss, regression_loss, soft_orthogonality_penalty
from owm_optimizer import AdamState, OWMTracker
from pyramid_heads import (
    EnsembleConfig,
    FeaturePyramid,
    PyramidConfig,
    build_head,
    ensemble_train_predict,
    flatten_maps,
)
from ssl_distill import pretrain_backbone
from target_codec import BitCodec


class TargetObjective:
    """
    Maps targets in mm to what the head is trained against and back.

    Regression: targets standardised with the training split's mean and sd.
    Encoding: targets become B bits; head logits go through a sigmoid and
    the per-bit loss, predictions are decoded from bit probabilities.
    """

    def __init__(self, cfg, mean=0.0, sd=1.0):
        spec = get_task(cfg.task)
        self.kind = cfg.loss['kind']
        self.focal = FocalConfig(cfg.loss['gamma'], cfg.loss['alpha'])
        self.encoded = bool(cfg.encoding['enabled'])
        self.decode_mode = cfg.encoding['decode_mode']
        self.codec = BitCodec(spec.lo, spec.hi, cfg.encoding['bits']) if self.encoded else None
        self.mean = float(mean)
        self.sd = float(sd) if sd > 0 else 1.0

    @classmethod
    def from_targets(cls, cfg, train_targets):
        y = np.asarray(train_targets, dtype=np.float64).reshape(-1)
        return cls(cfg, float(y.mean()), float(y.std()))

    @property
    def out_dim(self):
        return self.codec.bits if self.encoded else 1

    def prepare(self, targets_mm):
        y = np.asarray(targets_mm, dtype=np.float64).reshape(-1)
        if self.encoded:
            return T.Tensor(self.codec.encode_batch(y).astype(np.float64))
        return T.Tensor(((y - self.mean) / self.sd)[:, None])

    def loss(self, outputs, prepared):
        if self.encoded:
            return bit_loss(self.kind, T.sigmoid(outputs), prepared, self.focal)
        return regression_loss(self.kind, outputs, prepared, self.focal)

    def to_mm(self, outputs):
        data = outputs.data if isinstance(outputs, T.Tensor) else np.asarray(outputs, dtype=np.float64)
        if self.encoded:
            probs = 0.5 * (1.0 + np.tanh(0.5 * data))
            return self.codec.decode_probabilistic_batch(probs, self.decode_mode)
        return data.reshape(-1) * self.sd + self.mean

    def state(self):
        return {"mean": self.mean, "sd": self.sd}


class RegressionModel(Module):
    """backbone → (feature pyramid) → head"""

    def __init__(self, backbone, head, pyramid=None):
        self.backbone = backbone
        self.pyramid = pyramid
        self.head = head

    def forward(self, x):
        embedding, levels = self.backbone(x)
        if self.pyramid is not None:
            embedding = flatten_maps(self.pyramid(levels))
        return self.head(embedding)


class EnsembleModel:
    """K trained members; predictions are averaged in member order"""

    def __init__(self, members, seeds):
        self.members = members
        self.seeds = list(seeds)

    def predict_mm(self, inputs):
        return np.mean([m.predict_mm(inputs) for m in self.members], axis=0)


class TrainedModel:
    """A RegressionModel together with its target mapping"""

    def __init__(self, model, objective, input_shape):
        self.model = model
        self.objective = objective
        self.input_shape = tuple(input_shape)

    def outputs(self, inputs):
        with T.no_grad():
            return self.model(T.Tensor(np.asarray(inputs, dtype=np.float64)))

    def predict_mm(self, inputs):
        return self.objective.to_mm(self.outputs(inputs))


# ---------------------------------------------------------------------------
# model construction

def build_backbone(cfg, input_shape, seed):
    """Feature stem for n×d inputs, conv stack for n×C×S×S images"""
    freeze = bool(cfg.freeze_backbone)
    if len(input_shape) == 1:
        return ToyBackbone.for_features(input_shape[0], cfg.backbone['embedding_dim'], seed=seed, frozen=freeze)
    if len(input_shape) != 3 or input_shape[1] != input_shape[2]:
        raise ConfigurationError(f"image inputs must be C×S×S, got {input_shape}")
    return ToyBackbone.for_images(
        [input_shape[1]],
        channels=cfg.backbone['channels'],
        in_channels=input_shape[0],
        embedding_dim=cfg.backbone['embedding_dim'],
        seed=seed,
        frozen=freeze,
    )


def build_pyramid(cfg, backbone, input_shape, seed):
    if not cfg.fpn['enabled']:
        return None
    if backbone.kind != "images":
        raise ConfigurationError("the feature pyramid needs image inputs; feature-vector datasets emit no maps")
    levels = backbone.level_sizes(input_shape[1])
    if sorted(cfg.fpn['resolutions'], reverse=True) != levels:
        raise ConfigurationError(
            f"fpn.resolutions {cfg.fpn['resolutions']} do not match the backbone levels {levels} "
            f"for {input_shape[1]}×{input_shape[1]} images"
        )
    pcfg = PyramidConfig(levels, cfg.fpn['target_size'], cfg.fpn['channels'], in_channels=backbone.channels)
    return FeaturePyramid(pcfg, seed=seed)


def build_model(cfg, input_shape, head_seed, backbone=None, out_dim=1):
    """Backbone and pyramid are seeded from cfg.seed; the head from ``head_seed``"""
    rng = make_rng(cfg.seed)
    backbone = backbone or build_backbone(cfg, input_shape, rng)
    pyramid = build_pyramid(cfg, backbone, input_shape, rng)
    in_dim = pyramid.output_dim if pyramid is not None else backbone.embedding_dim
    head = build_head(
        cfg.head['kind'], in_dim, out_dim, hidden=cfg.head['hidden'], tokens=cfg.head['tokens'], seed=head_seed
    )
    return RegressionModel(backbone, head, pyramid)


def _head_layers(head):
    return [layer for layer in head.linear_layers if isinstance(layer, LinearLayer)]


# ---------------------------------------------------------------------------
# training loop

class _Regularizer:
    """Soft orthogonality penalty and/or OWM projection for the head weights"""

    def __init__(self, cfg, layers, tracker=None):
        # a tracker owned by this run commits per epoch; a shared one at task boundaries
        self.commit_per_epoch = tracker is None
        enabled = bool(cfg.orthogonal['enabled'])
        mode = cfg.orthogonal['mode']
        self.layers = list(layers)
        self.penalty = enabled and mode in ("soft_penalty", "both")
        self.lam = float(cfg.orthogonal['lambda'])
        self.owm = enabled and mode in ("owm", "both")
        self.tracker = tracker
        if self.owm and self.tracker is None:
            self.tracker = OWMTracker(self.layers, alpha=cfg.orthogonal['alpha'])

    def add_penalty(self, loss):
        if not self.penalty:
            return loss
        for layer in self.layers:
            loss = T.add(loss, soft_orthogonality_penalty(layer.weight, self.lam))
        return loss

    def projectors(self):
        return self.tracker.projectors() if self.owm else None

    def after_batch(self):
        if self.owm:
            self.tracker.record_batch()

    def after_epoch(self):
        if self.owm and self.commit_per_epoch:
            self.tracker.commit()


def _check_finite(value, epoch, where):
    if not math.isfinite(value):
        raise NumericFailure(f"non-finite {where} loss ({value}) in epoch {epoch}")


def _evaluate_loss(model, objective, inputs, targets):
    if len(targets) == 0:
        return float("nan")
    with T.no_grad():
        return objective.loss(model(T.Tensor(inputs)), objective.prepare(targets)).item()


def fit(model, objective, train_x, train_y, val_x, val_y, optimizer_cfg, seed, regularizer=None,
        params=None, verbose=True, desc="Training"):
    """
    Mini-batch Adam over ``params`` (default: the model's trainable parameters).

    The last partial batch is kept. Returns the learning curve as a list of
    {epoch, train_loss, val_loss}; the train loss is the sample-weighted mean
    of the batch losses (penalty included), the validation loss is the plain
    objective on the whole validation split.
    """
    rng = np.random.default_rng(seed)
    params = params if params is not None else model.trainable_parameters()
    opt = AdamState(params, lr=optimizer_cfg['lr'])
    batch = int(optimizer_cfg['batch'])
    epochs = range(1, int(optimizer_cfg['epochs']) + 1)
    if verbose:
        epochs = tqdm(epochs, desc=desc)
    curve = []
    n = len(train_y)
    for epoch in epochs:
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            opt.zero_grad()
            loss = objective.loss(model(T.Tensor(train_x[idx])), objective.prepare(train_y[idx]))
            if regularizer is not None:
                loss = regularizer.add_penalty(loss)
            value = loss.item()
            _check_finite(value, epoch, "training")
            loss.backward()
            opt.step(regularizer.projectors() if regularizer is not None else None)
            if regularizer is not None:
                regularizer.after_batch()
            total += value * len(idx)
        if regularizer is not None:
            regularizer.after_epoch()
        val_loss = _evaluate_loss(model, objective, val_x, val_y)
        if len(val_y):
            _check_finite(val_loss, epoch, "validation")
        curve.append({"epoch": epoch, "train_loss": total / n, "val_loss": val_loss})
    return curve


def _labels(cfg):
    return {
        "task": cfg.task,
        "head": cfg.head['kind'],
        "loss": cfg.loss['kind'],
        "gamma": cfg.loss['gamma'] if cfg.loss['kind'] == 'focal' else "",
        "encoding": "Classification" if cfg.encoding['enabled'] else "Regression",
        "or": cfg.orthogonal['mode'] if cfg.orthogonal['enabled'] else "off",
    }


def _prepare_backbone(cfg, data, splits, verbose):
    """Optionally distil the image backbone on the unlabeled training images"""
    if not (cfg.pretrain['enabled'] and data.is_image):
        return None
    backbone = build_backbone(cfg, data.inputs.shape[1:], make_rng(cfg.seed))
    pretrained, _ = pretrain_backbone(
        backbone,
        data.inputs[splits.train],
        steps=cfg.pretrain['steps'],
        out_dim=cfg.pretrain['out_dim'],
        batch_size=max(2, cfg.optimizer['batch']),
        lr=cfg.optimizer['lr'],
        seed=cfg.seed,
        verbose=verbose,
    )
    return pretrained if cfg.freeze_backbone else pretrained.unfreeze()


def _train_member(cfg, data, splits, objective, head_seed, backbone=None, verbose=True):
    input_shape = data.inputs.shape[1:]
    if backbone is not None:
        backbone = _clone_backbone(backbone, cfg)
    model = build_model(cfg, input_shape, head_seed, backbone=backbone, out_dim=objective.out_dim)
    regularizer = _Regularizer(cfg, _head_layers(model.head))
    curve = fit(
        model,
        objective,
        data.inputs[splits.train],
        data.targets[splits.train, 0],
        data.inputs[splits.val],
        data.targets[splits.val, 0],
        cfg.optimizer,
        seed=head_seed,
        regularizer=regularizer,
        verbose=verbose,
        desc=f"{cfg.task} seed {head_seed}",
    )
    return TrainedModel(model, objective, input_shape), curve


def _clone_backbone(backbone, cfg):
    clone = copy.deepcopy(backbone)
    return clone.freeze() if cfg.freeze_backbone else clone.unfreeze()


def train(cfg, data, splits, verbose=True):
    """
    Train one configuration and evaluate it on the test split.

    Returns (model, MetricsRecord); metrics are in mm. A deep-ensemble head
    trains ``ensemble.k`` members in parallel and reports the ensemble mean.
    """
    cfg.validate()
    if data.task != cfg.task:
        raise ConfigurationError(f"dataset holds task {data.task} but the config trains {cfg.task}")
    if len(splits.train) < 1 or len(splits.test) < 1:
        raise ConfigurationError(f"train and test splits must be non-empty, got {splits.sizes()}")
    if max(np.max(splits.train), np.max(splits.test)) >= len(data):
        raise DimensionError(f"split indices exceed dataset size {len(data)}")

    objective = TargetObjective.from_targets(cfg, data.targets[splits.train, 0])
    backbone = _prepare_backbone(cfg, data, splits, verbose)
    test_x = data.inputs[splits.test]
    test_y = data.targets[splits.test, 0]

    if cfg.head['kind'] == 'deep_ensemble':
        ecfg = EnsembleConfig(k=cfg.ensemble['k'], base_seed=cfg.seed)
        trained, curves = {}, {}

        def train_member(seed):
            trained[seed], curves[seed] = _train_member(cfg, data, splits, objective, seed, backbone, verbose=False)
            return trained[seed].predict_mm

        mean, members, _ = ensemble_train_predict(
            ecfg, train_member, test_x, max_workers=cfg.ensemble['max_workers'], verbose=verbose
        )
        model = EnsembleModel([trained[s] for s in ecfg.seeds], ecfg.seeds)
        curve = [
            {
                "epoch": rows[0]["epoch"],
                "train_loss": float(np.mean([r["train_loss"] for r in rows])),
                "val_loss": float(np.mean([r["val_loss"] for r in rows])),
            }
            for rows in zip(*(curves[s] for s in ecfg.seeds))
        ]
        predictions = mean
    else:
        model, curve = _train_member(cfg, data, splits, objective, cfg.seed, backbone, verbose=verbose)
        predictions = model.predict_mm(test_x)

    record = MetricsRecord.from_predictions(predictions, test_y, curve, labels=_labels(cfg))
    if verbose:
        print(f"📊 {cfg.task} test metrics: MSE {record.mse:.4f}, MAE {record.mae:.4f}, R² {record.r2:.4f}")
    return model, record


# ---------------------------------------------------------------------------
# sequential multi-task training

class MultiTaskModel(Module):
    """Shared backbone and relu trunk, one linear output layer per task"""

    def __init__(self, backbone, trunk, outputs):
        self.backbone = backbone
        self.trunk = trunk
        self.outputs = outputs

    def forward(self, x, task):
        h, _ = self.backbone(x)
        for layer in self.trunk:
            h = T.relu(layer(h))
        return self.outputs[task](h)


class _TaskView(Module):
    """Single-output view of a MultiTaskModel for one task"""

    def __init__(self, model, task):
        self.model = model
        self.task = task

    def forward(self, x):
        return self.model(x, self.task)


def train_sequential(cfg, datasets, order=None, verbose=True):
    """
    Train tasks one after another on a shared trunk.

    ``datasets`` maps task name to (Dataset, SplitIndices); all datasets must
    share the input shape. With OR mode owm/both, the trunk's projectors are
    committed at every task boundary, so later tasks update the trunk only
    orthogonally to inputs seen by earlier ones. Returns (model, summary)
    where summary holds per-task metrics just after each task, after the
    whole sequence, and the MSE increase (forgetting).
    """
    cfg.validate()
    order = list(order or datasets)
    if len(order) < 1:
        raise ConfigurationError("sequential training needs at least one task")
    shapes = {datasets[t][0].inputs.shape[1:] for t in order}
    if len(shapes) != 1:
        raise ConfigurationError(f"tasks must share one input shape, got {sorted(shapes)}")
    input_shape = shapes.pop()

    rng = make_rng(cfg.seed)
    backbone = build_backbone(cfg, input_shape, rng)
    widths = [backbone.embedding_dim] + list(cfg.head['hidden'])
    trunk = [LinearLayer(a, b, seed=rng) for a, b in zip(widths, widths[1:])]
    objectives, outputs = {}, {}
    for task in order:
        data, splits = datasets[task]
        objectives[task] = TargetObjective.from_targets(cfg.copy(task=task), data.targets[splits.train, 0])
        outputs[task] = LinearLayer(widths[-1], objectives[task].out_dim, seed=rng)
    model = MultiTaskModel(backbone, trunk, outputs)
    tracker = OWMTracker(trunk, alpha=cfg.orthogonal['alpha'])

    def evaluate(task):
        data, splits = datasets[task]
        view = TrainedModel(_TaskView(model, task), objectives[task], input_shape)
        pred = view.predict_mm(data.inputs[splits.test])
        return MetricsRecord.from_predictions(pred, data.targets[splits.test, 0])

    after_task, curves = {}, {}
    for i, task in enumerate(order):
        data, splits = datasets[task]
        view = _TaskView(model, task)
        params = [p for layer in trunk for p in layer.parameters()] + outputs[task].parameters()
        params += [p for p in backbone.parameters() if p.requires_grad]
        regularizer = _Regularizer(cfg, trunk, tracker=tracker)
        if verbose:
            print(f"🚀 Task {i + 1}/{len(order)}: {task}")
        curves[task] = fit(
            view,
            objectives[task],
            data.inputs[splits.train],
            data.targets[splits.train, 0],
            data.inputs[splits.val],
            data.targets[splits.val, 0],
            cfg.optimizer,
            seed=cfg.seed + i,
            regularizer=regularizer,
            params=params,
            verbose=verbose,
            desc=task,
        )
        tracker.commit()
        after_task[task] = evaluate(task)

    final = {task: evaluate(task) for task in order}
    summary = {
        "order": order,
        "after_task": after_task,
        "final": final,
        "forgetting": {task: final[task].mse - after_task[task].mse for task in order},
        "curves": curves,
    }
    if verbose:
        print("📊 Sequential training summary:")
        for task in order:
            print(f"   {task}: MSE after task {after_task[task].mse:.4f}, "
                  f"after sequence {final[task].mse:.4f}")
    return model, summary


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(trained, cfg, path):
    """Parameters of a TrainedModel or EnsembleModel plus config and target scaling"""
    members = trained.members if isinstance(trained, EnsembleModel) else [trained]
    arrays = {}
    for i, member in enumerate(members):
        for name, value in member.model.state_dict().items():
            arrays[f"m{i}/{name}"] = value
    meta = {
        "config": cfg.to_flat_dict(),
        "input_shape": list(members[0].input_shape),
        "objective": members[0].objective.state(),
        "seeds": trained.seeds if isinstance(trained, EnsembleModel) else [cfg.seed],
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_checkpoint(path):
    """Rebuild the model saved by save_checkpoint; returns (model, cfg)"""
    with np.load(path) as archive:
        arrays = {k: archive[k] for k in archive.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    cfg = ExperimentConfig.from_flat_dict(meta["config"])
    input_shape = tuple(meta["input_shape"])
    objective = TargetObjective(cfg, meta["objective"]["mean"], meta["objective"]["sd"])

    members = []
    for i, seed in enumerate(meta["seeds"]):
        model = build_model(cfg, input_shape, seed, out_dim=objective.out_dim)
        prefix = f"m{i}/"
        model.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        members.append(TrainedModel(model, objective, input_shape))
    if cfg.head['kind'] == 'deep_ensemble':
        return EnsembleModel(members, meta["seeds"]), cfg
    return members[0], cfg
