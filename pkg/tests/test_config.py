import json

import pytest

from config import ExperimentConfig, apply_seed_override, load_config
from errors import ConfigurationError, ParameterError


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.task == "MRD1"
    assert cfg.optimizer == {'lr': 1e-3, 'batch': 4, 'epochs': 20}
    assert cfg.head['kind'] == "mlp"
    assert cfg.loss['kind'] == "mse"
    assert not cfg.encoding['enabled']
    assert not cfg.orthogonal['enabled']
    assert cfg.freeze_backbone
    assert cfg.validate() is cfg


def test_flat_dict_round_trip():
    cfg = ExperimentConfig().copy(**{'encoding.enabled': True, 'loss.kind': 'focal', 'loss.gamma': 2.0})
    again = ExperimentConfig.from_flat_dict(cfg.to_flat_dict())
    assert again.to_flat_dict() == cfg.to_flat_dict()
    assert "or.mode" in cfg.to_flat_dict()


def test_copy_is_independent():
    base = ExperimentConfig()
    other = base.copy(**{'head.hidden': [8]})
    other.head['hidden'].append(4)
    assert base.head['hidden'] == [256, 64]


def test_unknown_key_rejected():
    with pytest.raises(ConfigurationError, match="unknown config keys"):
        ExperimentConfig.from_flat_dict({'optimizer.momentum': 0.9})


@pytest.mark.parametrize("encoding, loss", [(True, "mse"), (True, "mae"), (False, "bce")])
def test_incompatible_loss_pairs(encoding, loss):
    with pytest.raises(ConfigurationError, match="incompatible"):
        ExperimentConfig().copy(**{'encoding.enabled': encoding, 'loss.kind': loss})


@pytest.mark.parametrize("encoding, loss", [(True, "bce"), (True, "focal"), (False, "mse"), (False, "mae"),
                                            (False, "focal")])
def test_compatible_loss_pairs(encoding, loss):
    cfg = ExperimentConfig().copy(**{'encoding.enabled': encoding, 'loss.kind': loss})
    assert cfg.loss['kind'] == loss


@pytest.mark.parametrize("overrides", [
    {'loss.gamma': -1.0},
    {'optimizer.lr': 0.0},
    {'optimizer.epochs': 0},
    {'encoding.bits': 0},
    {'or.alpha': 0.0},
])
def test_parameter_errors(overrides):
    with pytest.raises(ParameterError):
        ExperimentConfig().copy(**overrides)


@pytest.mark.parametrize("overrides", [
    {'task': 'MRD3'},
    {'head.kind': 'transformer'},
    {'or.mode': 'orthogonal'},
    {'encoding.decode_mode': 'argmax'},
    {'fpn.resolutions': [16, 16]},
    {'head.kind': 'deep_ensemble', 'ensemble.k': 1},
])
def test_configuration_errors(overrides):
    with pytest.raises(ConfigurationError):
        ExperimentConfig().copy(**overrides)


def test_setters_validate_and_report(capsys):
    cfg = ExperimentConfig(verbose=True)
    cfg.set_encoding(True, bits=8)
    cfg.set_loss('focal', gamma=4)
    cfg.set_orthogonal(True, mode='owm')
    cfg.set_task('LF')
    assert cfg.task == "LF"
    assert cfg.loss['gamma'] == 4.0
    out = capsys.readouterr().out
    assert "✅ Target encoding: 8-bit" in out
    assert "✅ Loss switched to: bce" in out
    assert "✅ Orthogonal regularisation: owm" in out
    with pytest.raises(ConfigurationError):
        cfg.set_loss('mse')


def test_encoding_setter_carries_the_loss_over():
    cfg = ExperimentConfig()
    cfg.set_encoding(True)
    assert cfg.loss['kind'] == "bce"
    assert cfg.validate() is cfg
    cfg.set_loss('focal', gamma=2)
    cfg.set_encoding(False)
    assert cfg.loss['kind'] == "focal"
    cfg.set_loss('mae')
    cfg.set_encoding(True)
    cfg.set_encoding(False)
    assert cfg.loss['kind'] == "mse"


@pytest.mark.parametrize("key", ["encoding.enabled", "or.enabled", "freeze_backbone"])
def test_boolean_keys_reject_other_types(key):
    with pytest.raises(ParameterError, match="true or false"):
        ExperimentConfig.from_flat_dict({key: "false"})
    with pytest.raises(ParameterError):
        ExperimentConfig.from_flat_dict({key: 1})


def test_quiet_setters_print_nothing(capsys):
    ExperimentConfig().set_optimizer(lr=1e-2)
    assert capsys.readouterr().out == ""


def test_save_and_load(tmp_path, monkeypatch):
    monkeypatch.delenv("FP_SEED", raising=False)
    cfg = ExperimentConfig().copy(seed=7, **{'head.kind': 'attention'})
    path = cfg.save_config(str(tmp_path / "cfg.json"))
    loaded = load_config(path)
    assert loaded.to_flat_dict() == cfg.to_flat_dict()
    assert json.loads((tmp_path / "cfg.json").read_text())["head.kind"] == "attention"


def test_seed_environment_override(tmp_path, monkeypatch):
    path = ExperimentConfig().copy(seed=7).save_config(str(tmp_path / "cfg.json"))
    monkeypatch.setenv("FP_SEED", "42")
    assert load_config(path).seed == 42
    assert apply_seed_override(ExperimentConfig()).seed == 42
    monkeypatch.setenv("FP_SEED", "forty-two")
    with pytest.raises(ConfigurationError, match="FP_SEED"):
        load_config(path)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigurationError, match="not valid JSON"):
        load_config(str(bad))
    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]")
    with pytest.raises(ConfigurationError):
        load_config(str(listing))
