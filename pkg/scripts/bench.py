"""
Performance Benchmark for Bench Hedge

Measures path-simulation throughput for both model variants and checks that
the worker count does not change a single simulated number.

Target: >100k path-steps/sec per worker for the stylized model.
"""

import time
import sys
import os

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cli.perf import default_workers
from sim.models import simulate_random_scaling_mmm, simulate_stylized_mmm
from sim.scenarios import load_preset
from sim.stochastic_core import TimeGrid

TARGET_PATH_STEPS_PER_SEC = 100_000


def time_simulation(simulate, params, grid, n_paths, n_workers):
    start = time.time()
    paths = simulate(params, grid, n_paths, seed=2024, n_workers=n_workers)
    return paths, time.time() - start


def run_benchmark(n_paths: int = 20000, n_steps: int = 100):
    """
    Run performance benchmark.

    Args:
        n_paths: Paths per run (default 20000)
        n_steps: Grid steps over [0, 10] (default 100)

    Returns:
        Dictionary with performance metrics
    """
    workers = default_workers()
    grid = TimeGrid(0.0, 10.0, n_steps)
    print("=" * 70)
    print("BENCH HEDGE - PERFORMANCE BENCHMARK")
    print("=" * 70)
    print(f"\nConfiguration:")
    print(f"  Paths: {n_paths}")
    print(f"  Steps: {n_steps}")
    print(f"  Workers: 1 and {workers}")

    results = {}
    identical = True
    for label, simulate, preset in (('stylized', simulate_stylized_mmm, 'stylized_base'),
                                    ('random_scaling', simulate_random_scaling_mmm, 'random_scaling_cir')):
        params = load_preset(preset)
        print(f"\nRunning {label}...")
        serial, serial_sec = time_simulation(simulate, params, grid, n_paths, 1)
        parallel, parallel_sec = time_simulation(simulate, params, grid, n_paths, workers)
        same = all(np.array_equal(serial[name], parallel[name]) for name in serial.channels)
        identical = identical and same
        rate = n_paths * n_steps / serial_sec
        results[label] = {
            'serial_sec': serial_sec,
            'parallel_sec': parallel_sec,
            'path_steps_per_sec': rate,
            'speedup': serial_sec / parallel_sec if parallel_sec > 0 else 0.0,
            'identical_across_workers': same,
        }
        print(f"  ✅ serial {serial_sec:.2f}s, {workers} workers {parallel_sec:.2f}s ({rate:,.0f} path-steps/sec)")
        print(f"  {'✅' if same else '❌'} results identical across worker counts")

    target_met = results['stylized']['path_steps_per_sec'] > TARGET_PATH_STEPS_PER_SEC

    print("\n" + "=" * 70)
    print("BENCHMARK RESULTS")
    print("=" * 70)
    print(f"\nTarget Analysis:")
    print(f"  Target: >{TARGET_PATH_STEPS_PER_SEC:,} path-steps/sec (stylized, one worker)")
    print(f"  Actual: {results['stylized']['path_steps_per_sec']:,.0f} path-steps/sec")
    print(f"  Status: {'✅ TARGET MET' if target_met else '❌ TARGET NOT MET'}")
    print(f"  Determinism: {'✅ identical' if identical else '❌ worker count changed results'}")
    print("\n" + "=" * 70)

    return {'n_paths': n_paths, 'n_steps': n_steps, 'workers': workers, 'models': results,
            'target_met': target_met, 'deterministic': identical}


def main():
    """Run benchmark with command line arguments"""
    n_paths = 20000
    if len(sys.argv) > 1:
        try:
            n_paths = int(sys.argv[1])
            print(f"Custom path count: {n_paths}")
        except ValueError:
            print(f"Invalid path count, using default: {n_paths}")

    results = run_benchmark(n_paths)
    sys.exit(0 if results['target_met'] and results['deterministic'] else 1)


if __name__ == "__main__":
    main()
