import json

import pandas as pd
import pytest

from ablation_workflow import (
    PYRAMID_COLUMNS,
    AblationWorkflow,
    curves_path_for,
    expand_grid,
    load_grid,
    save_ablation,
)
from analysis_tools import REPORT_COLUMNS
from config import ExperimentConfig
from data_io import TASKS, split, synth_generate, synth_generate_images
from errors import ConfigurationError

BASE = {
    'head.hidden': [8],
    'optimizer.epochs': 2,
    'optimizer.batch': 16,
    'optimizer.lr': 1e-2,
    'backbone.embedding_dim': 8,
    'encoding.bits': 8,
}


@pytest.fixture
def base_config():
    return ExperimentConfig().copy(**BASE)


@pytest.fixture
def features():
    data = synth_generate(TASKS["MRD1"], 120, d=8, seed=2)
    return data, split(len(data), seed=0)


def test_default_grid_order():
    cells = expand_grid()
    assert len(cells) == 20
    assert cells[0] == {'encoding.enabled': False, 'loss.kind': 'mse', 'loss.gamma': 0.0, 'or.enabled': False}
    assert cells[1]['or.enabled']
    assert [c['loss.gamma'] for c in cells[2:10:2]] == [0.0, 2.0, 4.0, 6.0]
    assert cells[10] == {'encoding.enabled': True, 'loss.kind': 'bce', 'loss.gamma': 0.0, 'or.enabled': False}
    assert all(c['loss.kind'] == 'focal' for c in cells[12:])
    assert sum(c['encoding.enabled'] for c in cells) == 10


def test_grid_errors(tmp_path):
    with pytest.raises(ConfigurationError, match="unknown grid keys"):
        expand_grid({'lr': [1e-3]})
    with pytest.raises(ConfigurationError):
        expand_grid({'gamma': [-1]})
    path = tmp_path / "grid.json"
    path.write_text(json.dumps({'gamma': [2]}))
    assert len(expand_grid(load_grid(str(path)))) == 8
    with pytest.raises(ConfigurationError):
        load_grid(str(tmp_path / "missing.json"))


def test_full_grid_labels(base_config, features, capsys):
    data, splits = features
    records = AblationWorkflow(base_config, max_workers=4).ablate(data, splits)
    assert len(records) == 20
    first, last = records[0].labels, records[-1].labels
    assert (first['encoding'], first['loss'], first['gamma'], first['or']) == ("Regression", "mse", "", "off")
    assert (last['encoding'], last['loss'], last['gamma'], last['or']) == ("Classification", "focal", 6.0,
                                                                        "soft_penalty")
    out = capsys.readouterr().out
    assert "🚀 Starting ablation: 20 cells" in out
    assert "📊 Ablation Summary" in out


def test_cells_do_not_depend_on_worker_count(base_config, features):
    data, splits = features
    grid = {'encoding': [False, True], 'gamma': [2], 'or': [True]}
    serial = AblationWorkflow(base_config, max_workers=1, verbose=False).ablate(data, splits, grid)
    pooled = AblationWorkflow(base_config, max_workers=4, verbose=False).ablate(data, splits, grid)
    assert serial == pooled
    assert [r.labels['loss'] for r in serial] == ["mse", "focal", "bce", "focal"]


def test_save_ablation(base_config, features, output_dir):
    data, splits = features
    grid = {'encoding': [False], 'gamma': [], 'or': [False, True]}
    records = AblationWorkflow(base_config, verbose=False).ablate(data, splits, grid)
    path, curves = save_ablation(records, str(output_dir / "ablation.csv"))
    assert curves == curves_path_for(path) == str(output_dir / "ablation_curves.csv")
    table = pd.read_csv(path, keep_default_na=False)
    assert list(table.columns) == REPORT_COLUMNS
    assert list(table["or"]) == ["off", "soft_penalty"]
    curve_table = pd.read_csv(curves)
    assert list(curve_table.columns) == ["cell", "epoch", "train_loss", "val_loss"]
    assert len(curve_table) == 2 * 2


def test_pyramid_grid(base_config):
    data = synth_generate_images(TASKS["MRD1"], 40, size=8, seed=3)
    splits = split(len(data), seed=0)
    cfg = base_config.copy(**{
        'fpn.channels': 2,
        'fpn.target_size': 4,
        'backbone.channels': 2,
        'pretrain.steps': 2,
        'pretrain.out_dim': 4,
        'optimizer.epochs': 1,
    })
    records = AblationWorkflow(cfg, verbose=False).ablate_pyramid(data, splits)
    assert [(r.labels['fpn'], r.labels['ssp']) for r in records] == [
        ("off", "off"), ("off", "on"), ("on", "off"), ("on", "on")
    ]
    assert records[0] != records[2]


def test_pyramid_grid_needs_images(base_config, features, output_dir):
    data, splits = features
    with pytest.raises(ConfigurationError, match="image dataset"):
        AblationWorkflow(base_config, verbose=False).ablate_pyramid(data, splits)


def test_pyramid_columns_saved(base_config, output_dir):
    data = synth_generate_images(TASKS["MRD1"], 30, size=8, seed=3)
    splits = split(len(data), seed=0)
    cfg = base_config.copy(**{'backbone.channels': 1, 'fpn.channels': 1, 'fpn.target_size': 2,
                              'pretrain.steps': 1, 'pretrain.out_dim': 2, 'optimizer.epochs': 1})
    records = AblationWorkflow(cfg, verbose=False).ablate_pyramid(data, splits)
    path, _ = save_ablation(records, str(output_dir / "pyramid.csv"), columns=PYRAMID_COLUMNS)
    assert list(pd.read_csv(path).columns) == PYRAMID_COLUMNS


def test_default_grid_table_is_reproducible(base_config, features, output_dir):
    data, splits = features
    cfg = base_config.copy(**{'optimizer.epochs': 1})
    outputs = []
    for run in ("first", "second"):
        records = AblationWorkflow(cfg, max_workers=4, verbose=False).ablate(data, splits)
        path, curves = save_ablation(records, str(output_dir / f"{run}.csv"))
        outputs.append((open(path, "rb").read(), open(curves, "rb").read()))
    assert outputs[0] == outputs[1]

    table = pd.read_csv(output_dir / "first.csv", keep_default_na=False)
    assert len(table) == 20
    assert list(table["encoding"]) == ["Regression"] * 10 + ["Classification"] * 10
    assert list(table["loss"]) == (["mse"] * 2 + ["focal"] * 8 + ["bce"] * 2 + ["focal"] * 8)
    assert list(table["or"]) == ["off", "soft_penalty"] * 10
    assert len(pd.read_csv(output_dir / "first_curves.csv")) == 20
