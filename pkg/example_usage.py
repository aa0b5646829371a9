#!/usr/bin/env python3
"""
Example Usage of the Bitwise Regression Training Harness

This script demonstrates how to use the various components of the harness.
"""

import sys

import numpy as np

# Add scripts directory to path
sys.path.append('scripts')

from ablation_workflow import AblationWorkflow, save_ablation
from analysis_tools import RunQualityValidator, plot_learning_curves
from config import ExperimentConfig
from data_io import get_task, split, synth_generate
from main_workflow import run_continual, run_distill
from target_codec import BitCodec
from training_engine import train, train_sequential


def small_config():
    config = ExperimentConfig(verbose=True)
    config.set_optimizer(lr=1e-2, batch=16, epochs=5)
    config.set_head('mlp', hidden=[32, 16])
    return config


def example_single_run():
    """Plain regression vs. 16-bit target encoding"""
    print("=" * 60)
    print("EXAMPLE: Single Training Runs")
    print("=" * 60)

    config = small_config()
    data = synth_generate(get_task(config.task), 400, d=16, seed=config.seed)
    splits = split(len(data), seed=config.seed)

    _, plain = train(config, data, splits)
    config.set_encoding(True, bits=16)
    config.set_loss('focal', gamma=2)
    _, encoded = train(config, data, splits)

    print(f"   Regression:     MSE {plain.mse:.4f}  R² {plain.r2:.4f}")
    print(f"   Classification: MSE {encoded.mse:.4f}  R² {encoded.r2:.4f}")
    plot_learning_curves(encoded.curve, 'results/example_curve.svg', title="Focal BCE, 16 bits")
    print("✅ Learning curve saved to results/example_curve.svg")


def example_codec():
    """How a value travels through the bit encoding"""
    print("=" * 60)
    print("EXAMPLE: Target Codec")
    print("=" * 60)

    spec = get_task("MRD1")
    codec = BitCodec(spec.lo, spec.hi, bits=8)
    bits = codec.encode(2.59)
    print(f"   2.59 mm -> {''.join(str(b) for b in bits)} -> {codec.decode(bits):.4f} mm")
    probs = np.clip(bits + np.linspace(-0.2, 0.2, 8), 0.0, 1.0)
    print(f"   Expected decode of noisy probabilities: {codec.decode_probabilistic(probs):.4f} mm")
    print(f"   Quantization error bound: {codec.max_error:.4f} mm")


def example_ablation():
    """A reduced encoding × loss × OR grid"""
    print("=" * 60)
    print("EXAMPLE: Ablation Grid")
    print("=" * 60)

    config = small_config()
    data = synth_generate(get_task(config.task), 400, d=16, seed=config.seed)
    splits = split(len(data), seed=config.seed)

    workflow = AblationWorkflow(config, max_workers=4)
    records = workflow.ablate(data, splits, grid={'gamma': [2], 'or': [False, True]})
    save_ablation(records, 'results/example_ablation.csv')

    validator = RunQualityValidator()
    validator.validate_records(records)
    validator.generate_quality_report()


def example_sequential():
    """MRD1 then MRD2 then LF on one trunk, with OWM at task boundaries"""
    print("=" * 60)
    print("EXAMPLE: Sequential Tasks")
    print("=" * 60)

    config = small_config()
    config.set_orthogonal(True, mode='owm')
    datasets = {}
    for i, task in enumerate(["MRD1", "MRD2", "LF"]):
        data = synth_generate(get_task(task), 300, d=16, seed=i)
        datasets[task] = (data, split(len(data), seed=i))
    _, summary = train_sequential(config, datasets)
    for task, delta in summary['forgetting'].items():
        print(f"   {task}: forgetting {delta:+.4f}")


def main():
    """Main function to run examples"""
    print("🚀 Bitwise Regression Training Harness - Examples")
    print("=" * 60)
    print("\nChoose an example to run:")
    print("1. Single Training Runs")
    print("2. Target Codec")
    print("3. Ablation Grid")
    print("4. Sequential Tasks")
    print("5. Self-Distillation Toy")
    print("6. Continual-Learning Toy")
    print("7. Run All Examples")

    choice = input("\nEnter your choice (1-7): ").strip()

    examples = {
        '1': [example_single_run],
        '2': [example_codec],
        '3': [example_ablation],
        '4': [example_sequential],
        '5': [lambda: run_distill(steps=100, out='results/example_distill.csv')],
        '6': [lambda: run_continual(seeds=3, epochs=5, out='results/example_continual.json')],
    }
    examples['7'] = [fn for key in sorted(examples) for fn in examples[key]]

    if choice not in examples:
        print("❌ Invalid choice. Please run the script again.")
        return
    for example in examples[choice]:
        example()

    print("\n✅ Examples completed!")
    print("Check the results/ directory for outputs.")


if __name__ == "__main__":
    main()
