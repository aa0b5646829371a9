#!/usr/bin/env python3
"""
Evaluation Metrics, Reports and Run Quality Control

- MSE / MAE / R² in task units (mm), evaluated off the gradient tape
- MetricsRecord: test metrics plus the per-epoch learning curve
- CSV and markdown result tables, learning-curve SVG (matplotlib + seaborn)
- RunQualityValidator: flags non-finite losses, negative R², rising
  validation curves; JSON report
"""

import json
import math
import os
from datetime import datetime

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

from errors import ConfigurationError, ContractError, SchemaError  # noqa: E402

REPORT_COLUMNS = ["task", "head", "loss", "gamma", "encoding", "or", "mse", "mae", "r2"]
CURVE_COLUMNS = ["epoch", "train_loss", "val_loss"]
REPORT_FORMATS = ("csv", "markdown")


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise ContractError(f"prediction length {pred.shape[0]} does not match target length {target.shape[0]}")
    return pred, target


def metric_mse(pred, target):
    pred, target = _pair(pred, target)
    if pred.size == 0:
        raise ContractError("metric of an empty prediction set")
    return float(np.mean((pred - target) ** 2))


def metric_mae(pred, target):
    pred, target = _pair(pred, target)
    if pred.size == 0:
        raise ContractError("metric of an empty prediction set")
    return float(np.mean(np.abs(pred - target)))


def metric_r2(pred, target, with_flag=False):
    """
    1 - SS_res / SS_tot. A constant target has no defined R²; 0.0 is returned
    and, with ``with_flag``, the second element of the result is True.
    """
    pred, target = _pair(pred, target)
    if pred.size < 2:
        raise ContractError(f"R² needs at least 2 samples, got {pred.size}")
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    if ss_tot == 0.0:
        value, degenerate = 0.0, True
    else:
        value, degenerate = 1.0 - float(np.sum((target - pred) ** 2)) / ss_tot, False
    return (value, degenerate) if with_flag else value


class MetricsRecord:
    """Test-split metrics in mm plus the learning curve (epoch, train loss, val loss)"""

    def __init__(self, mse, mae, r2, curve=None, r2_degenerate=False, labels=None):
        self.mse = float(mse)
        self.mae = float(mae)
        self.r2 = float(r2)
        self.r2_degenerate = bool(r2_degenerate)
        self.curve = [dict(row) for row in (curve or [])]
        self.labels = dict(labels or {})

    @classmethod
    def from_predictions(cls, pred, target, curve=None, labels=None):
        r2, degenerate = metric_r2(pred, target, with_flag=True)
        return cls(metric_mse(pred, target), metric_mae(pred, target), r2, curve, degenerate, labels)

    def to_dict(self):
        row = {col: self.labels.get(col, "") for col in REPORT_COLUMNS[:6]}
        row.update({k: v for k, v in self.labels.items() if k not in row})
        row.update({"mse": self.mse, "mae": self.mae, "r2": self.r2})
        return row

    def curve_frame(self):
        return pd.DataFrame(self.curve, columns=CURVE_COLUMNS)

    def __eq__(self, other):
        return (
            isinstance(other, MetricsRecord)
            and (self.mse, self.mae, self.r2, self.r2_degenerate) == (other.mse, other.mae, other.r2, other.r2_degenerate)
            and self.curve == other.curve
            and self.labels == other.labels
        )

    def __repr__(self):
        return f"MetricsRecord(mse={self.mse:.6g}, mae={self.mae:.6g}, r2={self.r2:.4f}, epochs={len(self.curve)})"


# ---------------------------------------------------------------------------
# tables

def records_frame(records, columns=REPORT_COLUMNS):
    """DataFrame in report column order from MetricsRecords or row dicts"""
    rows = [r.to_dict() if isinstance(r, MetricsRecord) else dict(r) for r in records]
    if not rows:
        raise ContractError("report needs at least one record")
    missing = sorted(set(columns) - set(rows[0]))
    if missing:
        raise ConfigurationError(f"records lack report columns {missing}")
    return pd.DataFrame(rows, columns=list(columns))


def markdown_table(frame):
    def cell(value):
        if isinstance(value, float):
            return f"{value:.6g}"
        return str(value)

    lines = [
        "| " + " | ".join(frame.columns) + " |",
        "|" + "|".join(["---"] * len(frame.columns)) + "|",
    ]
    for row in frame.itertuples(index=False):
        lines.append("| " + " | ".join(cell(v) for v in row) + " |")
    return "\n".join(lines) + "\n"


def write_report(records, path, fmt="csv"):
    """Write a results table as CSV or markdown; returns the path"""
    if fmt not in REPORT_FORMATS:
        raise ConfigurationError(f"unknown report format '{fmt}'. Available: {list(REPORT_FORMATS)}")
    frame = records if isinstance(records, pd.DataFrame) else records_frame(records)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if fmt == "csv":
        frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")
    else:
        with open(path, "w") as f:
            f.write(markdown_table(frame))
    return path


def read_results_csv(path):
    if not os.path.exists(path):
        raise ConfigurationError(f"results file {path} not found")
    frame = pd.read_csv(path, keep_default_na=False)
    missing = [c for c in REPORT_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path} lacks columns {missing}")
    return frame[REPORT_COLUMNS]


def mean_curve(curves):
    """Average several learning curves epoch by epoch"""
    frame = pd.concat([pd.DataFrame(c, columns=CURVE_COLUMNS) for c in curves], ignore_index=True)
    grouped = frame.groupby("epoch", sort=True)[["train_loss", "val_loss"]].mean().reset_index()
    return grouped.to_dict("records")


# ---------------------------------------------------------------------------
# learning-curve figure

def setup_plotting_style():
    plt.style.use('default')
    sns.set_palette("husl")


def plot_learning_curves(curve, path, title="Learning curve"):
    """
    SVG with one train and one validation line, one vertex per epoch.
    The lines carry gids ``train-curve`` and ``val-curve``.
    """
    frame = pd.DataFrame(curve, columns=CURVE_COLUMNS)
    if frame.empty:
        raise ContractError("learning curve is empty")
    setup_plotting_style()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with plt.rc_context({"path.simplify": False, "svg.hashsalt": "learning-curve"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(frame["epoch"], frame["train_loss"], label="train", gid="train-curve")
        ax.plot(frame["epoch"], frame["val_loss"], label="validation", gid="val-curve")
        ax.set_xlabel("Epoch")
        ax.set_ylabel("Loss")
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def report(records, path, fmt="csv", curves=None):
    """Results table, plus the epoch-wise mean learning curve as SVG when ``curves`` is given"""
    write_report(records, path, fmt=fmt)
    if curves:
        plot_learning_curves(mean_curve([r.curve for r in records]), curves)
    return path


# ---------------------------------------------------------------------------
# quality control

class RunQualityValidator:
    """Quality control over a set of MetricsRecords"""

    def __init__(self):
        self.validation_results = {}

    def validate_records(self, records, names=None):
        names = names or [f"run_{i}" for i in range(len(records))]
        validation_results = {
            'total_runs': len(records),
            'clean_runs': 0,
            'quality_issues': [],
            'recommendations': [],
            'runs': {},
        }
        for name, record in zip(names, records):
            issues = []
            losses = [v for row in record.curve for v in (row['train_loss'], row['val_loss'])]
            if any(not math.isfinite(v) for v in losses):
                issues.append("non-finite loss in learning curve")
            if record.r2 < 0:
                issues.append(f"negative R² ({record.r2:.4f})")
            if record.r2_degenerate:
                issues.append("constant test targets, R² undefined")
            if len(record.curve) >= 2 and record.curve[-1]['val_loss'] > record.curve[0]['val_loss']:
                issues.append("validation loss ended above its first epoch")
            validation_results['runs'][name] = {
                'mse': record.mse,
                'mae': record.mae,
                'r2': record.r2,
                'epochs': len(record.curve),
                'issues': issues,
            }
            if issues:
                validation_results['quality_issues'].extend(f"{name}: {issue}" for issue in issues)
            else:
                validation_results['clean_runs'] += 1

        if any("negative R²" in issue for issue in validation_results['quality_issues']):
            validation_results['recommendations'].append("Check loss/encoding pairing and learning rate")
        if any("validation loss" in issue for issue in validation_results['quality_issues']):
            validation_results['recommendations'].append("Consider fewer epochs or a smaller learning rate")
        self.validation_results = validation_results
        return validation_results

    def generate_quality_report(self, filename=None):
        """Print the quality report; optionally save it as JSON"""
        if not self.validation_results:
            print("⚠️ No validation results available. Run validate_records() first.")
            return None

        results = self.validation_results
        print("\n📊 Run Quality Report:")
        print(f"   Total runs: {results['total_runs']}")
        print(f"   Clean runs: {results['clean_runs']}")
        if results['quality_issues']:
            print(f"\n   ⚠️ Quality Issues ({len(results['quality_issues'])}):")
            for issue in results['quality_issues']:
                print(f"     - {issue}")
        if results['recommendations']:
            print(f"\n   💡 Recommendations ({len(results['recommendations'])}):")
            for rec in results['recommendations']:
                print(f"     - {rec}")

        if filename:
            self.save_validation_results(filename)
        return results

    def save_validation_results(self, filename='results/quality_report.json'):
        validation_data = {
            'timestamp': datetime.now().isoformat(),
            'validation_results': self.validation_results,
        }
        os.makedirs(os.path.dirname(os.path.abspath(filename)), exist_ok=True)
        with open(filename, 'w') as f:
            json.dump(validation_data, f, indent=2)
        print(f"✅ Quality report saved to {filename}")
        return filename

    def load_validation_results(self, filename='results/quality_report.json'):
        if os.path.exists(filename):
            with open(filename, 'r') as f:
                self.validation_results = json.load(f).get('validation_results', {})
            print(f"✅ Quality report loaded from {filename}")
            return True
        print(f"⚠️ Quality report not found: {filename}")
        return False
