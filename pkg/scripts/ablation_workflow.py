#!/usr/bin/env python3
"""
Ablation Workflow

Runs grids of training configurations that differ only in the ablated
factors, every cell with the same seed and data split:

- the encoding × loss × orthogonal-regularisation grid
  (Regression / Classification) × (MSE|BCE, Focal 0/2/4/6) × (OR off / on)
- the feature-pyramid × self-supervised-pretraining grid on image data

Cells run in a thread pool; the table is assembled in grid order whatever
the completion order.
"""

import concurrent.futures
import json
import os

import pandas as pd
from tqdm import tqdm

from analysis_tools import REPORT_COLUMNS, records_frame, write_report
from errors import ConfigurationError
from training_engine import train

DEFAULT_GRID = {
    'encoding': [False, True],
    'gamma': [0, 2, 4, 6],
    'or': [False, True],
}

PYRAMID_COLUMNS = ["fpn", "ssp"] + REPORT_COLUMNS


def load_grid(filename):
    """Grid JSON: any of the keys encoding, gamma, or (lists); missing keys keep their defaults"""
    if not os.path.exists(filename):
        raise ConfigurationError(f"grid file {filename} not found")
    with open(filename, 'r') as f:
        try:
            grid = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{filename} is not valid JSON: {exc}") from None
    return grid


def expand_grid(grid=None):
    """
    Dotted-key overrides for every cell, in table order: encoding outermost,
    then the base loss (mse without encoding, bce with it) followed by the
    focal rows, then OR off/on.
    """
    grid = {**DEFAULT_GRID, **(grid or {})}
    unknown = sorted(set(grid) - set(DEFAULT_GRID))
    if unknown:
        raise ConfigurationError(f"unknown grid keys {unknown}. Available: {sorted(DEFAULT_GRID)}")
    if any(float(g) < 0 for g in grid['gamma']):
        raise ConfigurationError(f"grid gammas must be >= 0, got {grid['gamma']}")
    cells = []
    for encoding in grid['encoding']:
        losses = [('bce' if encoding else 'mse', 0.0)] + [('focal', float(g)) for g in grid['gamma']]
        for kind, gamma in losses:
            for orthogonal in grid['or']:
                cells.append({
                    'encoding.enabled': bool(encoding),
                    'loss.kind': kind,
                    'loss.gamma': gamma,
                    'or.enabled': bool(orthogonal),
                })
    return cells


class AblationWorkflow:
    """Grid sweeps over a base ExperimentConfig"""

    def __init__(self, base_config, max_workers=4, verbose=True):
        self.config = base_config
        self.max_workers = max_workers
        self.verbose = verbose
        self.records = []

    def run_cells(self, overrides, data, splits, desc="Grid cells"):
        """Train one configuration per override dict; returns records in cell order"""
        configs = [self.config.copy(**cell) for cell in overrides]
        records = [None] * len(configs)
        if self.verbose:
            print(f"🚀 Starting ablation: {len(configs)} cells")
            print(f"   Max workers: {self.max_workers}")
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            future_to_cell = {
                executor.submit(train, cfg, data, splits, False): idx for idx, cfg in enumerate(configs)
            }
            completed = concurrent.futures.as_completed(future_to_cell)
            if self.verbose:
                completed = tqdm(completed, total=len(configs), desc=desc)
            for future in completed:
                idx = future_to_cell[future]
                _, records[idx] = future.result()
        self.records = records
        return records

    def ablate(self, data, splits, grid=None):
        """Encoding × loss × OR grid; 20 cells with the default grid"""
        records = self.run_cells(expand_grid(grid), data, splits)
        if self.verbose:
            self.print_summary(records)
        return records

    def ablate_pyramid(self, data, splits):
        """FPN off/on × self-supervised pretraining off/on, on image data"""
        if not data.is_image:
            raise ConfigurationError("the pyramid ablation needs an image dataset")
        size = data.inputs.shape[2]
        levels = [size, size // 2, size // 4]
        overrides = []
        for fpn in (False, True):
            for ssp in (False, True):
                overrides.append({'fpn.enabled': fpn, 'fpn.resolutions': levels, 'pretrain.enabled': ssp})
        records = self.run_cells(overrides, data, splits, desc="Pyramid cells")
        for cell, record in zip(overrides, records):
            record.labels['fpn'] = "on" if cell['fpn.enabled'] else "off"
            record.labels['ssp'] = "on" if cell['pretrain.enabled'] else "off"
        if self.verbose:
            self.print_summary(records)
        return records

    def print_summary(self, records):
        print("\n📊 Ablation Summary:")
        for record in records:
            labels = record.labels
            gamma = f" {labels['gamma']:g}" if labels.get('gamma') != "" else ""
            extra = f" FPN {labels['fpn']}, SSP {labels['ssp']}" if 'fpn' in labels else ""
            print(f"   {labels['encoding']:<14} {labels['loss']}{gamma:<4} OR {labels['or']:<12}{extra} "
                  f"MSE {record.mse:.4f}  MAE {record.mae:.4f}  R² {record.r2:.4f}")


def save_ablation(records, path, columns=REPORT_COLUMNS):
    """Results CSV plus ``<stem>_curves.csv`` (cell, epoch, train_loss, val_loss)"""
    write_report(records_frame(records, columns), path, fmt="csv")
    curves = []
    for idx, record in enumerate(records):
        frame = record.curve_frame()
        frame.insert(0, "cell", idx)
        curves.append(frame)
    curves_path = curves_path_for(path)
    pd.concat(curves, ignore_index=True).to_csv(curves_path, index=False, float_format="%.9g", lineterminator="\n")
    return path, curves_path


def curves_path_for(results_path):
    stem, _ = os.path.splitext(results_path)
    return f"{stem}_curves.csv"
