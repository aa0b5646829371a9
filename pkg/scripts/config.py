#!/usr/bin/env python3
"""
Experiment Configuration Module

Central description of one training run: task, head, loss, target encoding,
orthogonal regularisation, feature pyramid, backbone freezing, optimizer,
ensemble and synthetic-data settings.

Files are flat JSON objects keyed by dotted field names ("loss.gamma": 2).
The FP_SEED environment variable overrides the seed of a loaded config.
"""

import copy
import json
import os
from datetime import datetime

from data_io import get_task
from errors import ConfigurationError, ParameterError, SchemaError
from objectives import BIT_LOSSES, REGRESSION_LOSSES
from target_codec import DECODE_MODES

SEED_ENV = "FP_SEED"

HEAD_KINDS = ["attention", "deep_ensemble", "mlp"]
OR_MODES = ["both", "owm", "soft_penalty"]


class ExperimentConfig:
    """Central configuration class for a single experiment"""

    def __init__(self, verbose=False):
        self.verbose = verbose
        self.task = "MRD1"
        self.seed = 0
        self.freeze_backbone = True

        self.head = {
            'kind': 'mlp',
            'hidden': [256, 64],
            'tokens': 4,            # attention head: embedding split into this many tokens
        }

        self.loss = {
            'kind': 'mse',
            'gamma': 0.0,           # focusing parameter
            'alpha': 1.0,           # class-balance weight
        }

        self.encoding = {
            'enabled': False,
            'bits': 16,
            'decode_mode': 'expected',
        }

        self.orthogonal = {
            'enabled': False,
            'mode': 'soft_penalty',
            'alpha': 1e-3,          # OWM projector damping
            'lambda': 1e-3,         # soft orthogonality penalty weight
        }

        self.fpn = {
            'enabled': False,
            'resolutions': [320, 160, 80],
            'channels': 4,
            'target_size': 14,
        }

        self.backbone = {
            'embedding_dim': 32,
            'channels': 4,
        }

        self.pretrain = {
            'enabled': False,
            'steps': 50,
            'out_dim': 8,
        }

        self.optimizer = {
            'lr': 1e-3,
            'batch': 4,
            'epochs': 20,
        }

        self.ensemble = {
            'k': 5,
            'max_workers': None,
        }

        self.data = {
            'n': 2000,
            'dim': 32,
            'noise': 0.05,
            'image_size': 16,
        }

    # ------------------------------------------------------------------
    # sections and flat serialisation

    def _sections(self):
        return {
            'head': self.head,
            'loss': self.loss,
            'encoding': self.encoding,
            'or': self.orthogonal,
            'fpn': self.fpn,
            'backbone': self.backbone,
            'pretrain': self.pretrain,
            'optimizer': self.optimizer,
            'ensemble': self.ensemble,
            'data': self.data,
        }

    def to_flat_dict(self):
        flat = {'task': self.task, 'seed': self.seed, 'freeze_backbone': self.freeze_backbone}
        for section, values in self._sections().items():
            for key, value in values.items():
                flat[f"{section}.{key}"] = copy.deepcopy(value)
        return flat

    @classmethod
    def from_flat_dict(cls, flat, verbose=False):
        cfg = cls(verbose=verbose)
        known = cfg.to_flat_dict()
        unknown = sorted(set(flat) - set(known))
        if unknown:
            raise ConfigurationError(f"unknown config keys {unknown}. Available: {sorted(known)}")
        sections = cfg._sections()
        for key, value in flat.items():
            if isinstance(known[key], bool) and not isinstance(value, bool):
                raise ParameterError(f"config key '{key}' must be true or false, got {value!r}")
            if '.' in key:
                section, field = key.split('.', 1)
                sections[section][field] = copy.deepcopy(value)
            else:
                setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def copy(self, **overrides):
        """Independent copy with dotted-key overrides applied and validated"""
        flat = self.to_flat_dict()
        flat.update(overrides)
        return ExperimentConfig.from_flat_dict(flat)

    # ------------------------------------------------------------------
    # setters

    def set_task(self, task):
        self.task = get_task(task).name
        self._status(f"Task set to: {self.task}")

    def set_head(self, kind, hidden=None, tokens=None):
        """Set regressor head kind and widths"""
        if kind not in HEAD_KINDS:
            raise ConfigurationError(f"Invalid head: {kind}. Available: {HEAD_KINDS}")
        self.head['kind'] = kind
        if hidden is not None:
            self.head['hidden'] = [int(h) for h in hidden]
        if tokens is not None:
            self.head['tokens'] = int(tokens)
        self._validate_head()
        self._status(f"Head set to: {kind} (hidden {self.head['hidden']})")

    def set_loss(self, kind, gamma=None, alpha=None):
        self.loss['kind'] = kind
        if gamma is not None:
            self.loss['gamma'] = float(gamma)
        if alpha is not None:
            self.loss['alpha'] = float(alpha)
        self._validate_loss()
        self._status(f"Loss set to: {kind} (gamma {self.loss['gamma']}, alpha {self.loss['alpha']})")

    def set_encoding(self, enabled, bits=None, decode_mode=None):
        """Toggle bit encoding; an mse/mae loss becomes bce (and bce becomes mse when turned off)"""
        self.encoding['enabled'] = bool(enabled)
        if bits is not None:
            self.encoding['bits'] = int(bits)
        if decode_mode is not None:
            self.encoding['decode_mode'] = decode_mode
        self._validate_encoding()
        if self.loss['kind'] not in self.valid_losses():
            # carry the loss over to the counterpart valid for the new target form
            self.loss['kind'] = 'bce' if enabled else 'mse'
            self._status(f"Loss switched to: {self.loss['kind']}")
        state = f"{self.encoding['bits']}-bit, {self.encoding['decode_mode']} decode" if enabled else "off"
        self._status(f"Target encoding: {state}")

    def set_orthogonal(self, enabled, mode=None, alpha=None, lam=None):
        """Configure orthogonal regularisation (OWM projection and/or soft penalty)"""
        self.orthogonal['enabled'] = bool(enabled)
        if mode is not None:
            self.orthogonal['mode'] = mode
        if alpha is not None:
            self.orthogonal['alpha'] = float(alpha)
        if lam is not None:
            self.orthogonal['lambda'] = float(lam)
        self._validate_orthogonal()
        self._status(f"Orthogonal regularisation: {self.orthogonal['mode'] if enabled else 'off'}")

    def set_fpn(self, enabled, resolutions=None, channels=None):
        self.fpn['enabled'] = bool(enabled)
        if resolutions is not None:
            self.fpn['resolutions'] = [int(r) for r in resolutions]
        if channels is not None:
            self.fpn['channels'] = int(channels)
        self._validate_fpn()
        self._status(f"Feature pyramid: {self.fpn['resolutions'] if enabled else 'off'}")

    def set_optimizer(self, lr=None, batch=None, epochs=None):
        if lr is not None:
            self.optimizer['lr'] = float(lr)
        if batch is not None:
            self.optimizer['batch'] = int(batch)
        if epochs is not None:
            self.optimizer['epochs'] = int(epochs)
        self._validate_optimizer()
        self._status(
            f"Optimizer: lr {self.optimizer['lr']}, batch {self.optimizer['batch']}, "
            f"epochs {self.optimizer['epochs']}"
        )

    def set_seed(self, seed):
        self.seed = int(seed)
        self._status(f"Seed set to: {self.seed}")

    def _status(self, message):
        if self.verbose:
            print(f"✅ {message}")

    # ------------------------------------------------------------------
    # validation

    def valid_losses(self):
        return BIT_LOSSES if self.encoding['enabled'] else REGRESSION_LOSSES

    def _validate_head(self):
        if self.head['kind'] not in HEAD_KINDS:
            raise ConfigurationError(f"Invalid head: {self.head['kind']}. Available: {HEAD_KINDS}")
        if not self.head['hidden'] or any(int(h) < 1 for h in self.head['hidden']):
            raise ConfigurationError(f"head widths must be positive, got {self.head['hidden']}")
        if int(self.head['tokens']) < 1:
            raise ConfigurationError(f"head tokens must be >= 1, got {self.head['tokens']}")
        if self.head['kind'] == 'deep_ensemble' and int(self.ensemble['k']) < 2:
            raise ConfigurationError(f"deep ensemble needs k >= 2, got {self.ensemble['k']}")

    def _validate_loss(self):
        kind = self.loss['kind']
        valid = self.valid_losses()
        if kind not in valid:
            mode = "with target encoding" if self.encoding['enabled'] else "without target encoding"
            raise ConfigurationError(
                f"loss '{kind}' is incompatible {mode}. Valid pairs: encoding on -> {BIT_LOSSES}, "
                f"encoding off -> {REGRESSION_LOSSES}"
            )
        if not self.loss['gamma'] >= 0:
            raise ParameterError(f"focal gamma must be >= 0, got {self.loss['gamma']}")
        if not 0 < self.loss['alpha'] <= 1:
            raise ParameterError(f"focal alpha must lie in (0, 1], got {self.loss['alpha']}")

    def _validate_encoding(self):
        if int(self.encoding['bits']) < 1:
            raise ParameterError(f"encoding bits must be >= 1, got {self.encoding['bits']}")
        if self.encoding['decode_mode'] not in DECODE_MODES:
            raise ConfigurationError(
                f"Invalid decode mode: {self.encoding['decode_mode']}. Available: {list(DECODE_MODES)}"
            )

    def _validate_orthogonal(self):
        if self.orthogonal['mode'] not in OR_MODES:
            raise ConfigurationError(f"Invalid OR mode: {self.orthogonal['mode']}. Available: {OR_MODES}")
        if not self.orthogonal['alpha'] > 0:
            raise ParameterError(f"OWM alpha must be positive, got {self.orthogonal['alpha']}")
        if not self.orthogonal['lambda'] >= 0:
            raise ParameterError(f"penalty lambda must be >= 0, got {self.orthogonal['lambda']}")

    def _validate_fpn(self):
        res = self.fpn['resolutions']
        if not res or len(set(res)) != len(res) or any(int(r) < 1 for r in res):
            raise ConfigurationError(f"pyramid resolutions must be distinct positive sizes, got {res}")
        if int(self.fpn['channels']) < 1 or int(self.fpn['target_size']) < 1:
            raise ConfigurationError("pyramid channels and target size must be positive")

    def _validate_optimizer(self):
        if not self.optimizer['lr'] > 0:
            raise ParameterError(f"learning rate must be positive, got {self.optimizer['lr']}")
        if int(self.optimizer['batch']) < 1 or int(self.optimizer['epochs']) < 1:
            raise ParameterError(
                f"batch and epochs must be >= 1, got {self.optimizer['batch']} and {self.optimizer['epochs']}"
            )

    def validate(self):
        """Check every section and cross-field constraint; returns self"""
        try:
            get_task(self.task)
        except SchemaError as exc:
            raise ConfigurationError(str(exc)) from None
        if int(self.ensemble['k']) < 1:
            raise ConfigurationError(f"ensemble k must be >= 1, got {self.ensemble['k']}")
        if int(self.data['n']) < 10 or int(self.data['dim']) < 1 or not self.data['noise'] >= 0:
            raise ConfigurationError(f"invalid data section {self.data}")
        if int(self.backbone['embedding_dim']) < 1 or int(self.backbone['channels']) < 1:
            raise ConfigurationError(f"invalid backbone section {self.backbone}")
        if int(self.pretrain['steps']) < 0 or int(self.pretrain['out_dim']) < 2:
            raise ConfigurationError(f"invalid pretrain section {self.pretrain}")
        self._validate_head()
        self._validate_encoding()
        self._validate_loss()
        self._validate_orthogonal()
        self._validate_fpn()
        self._validate_optimizer()
        return self

    # ------------------------------------------------------------------
    # display / persistence

    def display_configuration(self):
        """Display current configuration"""
        print("🔧 Current Experiment Configuration:")
        print(f"   Task: {self.task}")
        print(f"   Head: {self.head['kind']} (hidden {self.head['hidden']})")
        gamma = f", gamma {self.loss['gamma']}" if self.loss['kind'] == 'focal' else ""
        print(f"   Loss: {self.loss['kind']}{gamma}")
        if self.encoding['enabled']:
            print(f"   Encoding: {self.encoding['bits']}-bit ({self.encoding['decode_mode']} decode)")
        else:
            print("   Encoding: off (Regression)")
        print(f"   OR: {self.orthogonal['mode'] if self.orthogonal['enabled'] else 'off'}")
        print(f"   FPN: {self.fpn['resolutions'] if self.fpn['enabled'] else 'off'}")
        print(f"   Backbone: {'frozen' if self.freeze_backbone else 'trainable'}")
        print(f"   Optimizer: Adam lr {self.optimizer['lr']}, batch {self.optimizer['batch']}, "
              f"epochs {self.optimizer['epochs']}")
        if self.head['kind'] == 'deep_ensemble':
            print(f"   Ensemble: K={self.ensemble['k']}")
        print(f"   Seed: {self.seed}")

    def save_config(self, filename='config.json'):
        """Save current configuration as flat dotted JSON"""
        os.makedirs(os.path.dirname(os.path.abspath(filename)), exist_ok=True)
        with open(filename, 'w') as f:
            json.dump(self.to_flat_dict(), f, indent=2, sort_keys=True)
        self._status(f"Configuration saved to {filename}")
        return filename


def load_config(filename, verbose=False):
    """Load a flat JSON config; FP_SEED, when set, overrides its seed"""
    if not os.path.exists(filename):
        raise ConfigurationError(f"Configuration file {filename} not found")
    with open(filename, 'r') as f:
        try:
            flat = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{filename} is not valid JSON: {exc}") from None
    if not isinstance(flat, dict):
        raise ConfigurationError(f"{filename} must hold a JSON object")
    cfg = ExperimentConfig.from_flat_dict(flat, verbose=verbose)
    apply_seed_override(cfg)
    if verbose:
        print(f"✅ Configuration loaded from {filename} ({datetime.now().isoformat(timespec='seconds')})")
    return cfg


def apply_seed_override(cfg):
    value = os.environ.get(SEED_ENV)
    if value not in (None, ""):
        try:
            cfg.seed = int(value)
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got '{value}'") from None
    return cfg


def main():
    """Show the default configuration"""
    print("🚀 Experiment Configuration Module")
    print("=" * 50)
    config = ExperimentConfig(verbose=True)
    config.display_configuration()

    print("\n💡 Configuration Examples:")
    print("   config.set_encoding(True, bits=16)")
    print("   config.set_loss('focal', gamma=2)")
    print("   config.set_orthogonal(True, mode='owm')")


if __name__ == "__main__":
    main()
