"""Benchmark: compiled kernel core vs pure-numpy fallback.

Times the three convolution kernels at the default experiment geometry, and
one full second-order attack iteration (the production hot loop). Run:

    python benchmarks/bench_kernels.py [--repeats 20]
"""
import argparse
import time

import numpy as np

from fedrecon import dataio, fedsim, models
from fedrecon.engine import kernels, match_loss_and_data_grad


def _time(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 12, 14, 14))
    w = rng.standard_normal((12, 12, 5, 5))
    y = kernels.conv2d_forward(x, w, 2, 2, 2, 2)
    gy = rng.standard_normal(y.shape)

    cases = {
        "conv2d_forward": lambda: kernels.conv2d_forward(x, w, 2, 2, 2, 2),
        "conv2d_dinput": lambda: kernels.conv2d_dinput(gy, w, 2, 2, 2, 2, 14, 14),
        "conv2d_dweight": lambda: kernels.conv2d_dweight(x, gy, 2, 2, 2, 2, 5, 5),
    }
    rows = []
    for name, fn in cases.items():
        row = {"name": name}
        for backend in kernels.available_backends():
            with kernels.use_backend(backend):
                row[backend] = _time(fn, repeats)
        rows.append(row)
    return rows


def bench_attack_iteration(repeats):
    dataset = dataio.synthetic_digits(20, seed=1)
    model = models.build_model(models.ArchSpec("lenet_small", (1, 28, 28), 10), seed=2)
    scenario = fedsim.UnlearnScenario(
        full_set=dataset.subset(np.arange(16), "D"),
        forget_indices=np.arange(12),
        mode="simulated",
    )
    pair = fedsim.capture_pair(model, model, scenario)
    x = np.random.default_rng(3).uniform(0, 1, (16, 1, 28, 28))
    _, union_y = scenario.union_batch()

    def one_iteration():
        match_loss_and_data_grad(pair.theta_star, x, union_y, pair.g_pre)

    row = {"name": "attack_iteration (batch 16)"}
    for backend in kernels.available_backends():
        with kernels.use_backend(backend):
            row[backend] = _time(one_iteration, max(3, repeats // 4))
    return [row]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    backends = sorted(kernels.available_backends())
    if len(backends) == 1:
        print("compiled core not built; only the numpy fallback is available")

    rows = bench_kernels(args.repeats) + bench_attack_iteration(args.repeats)
    header = f"{'kernel':<30}" + "".join(f"{b:>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for row in rows:
        line = f"{row['name']:<30}"
        for b in backends:
            line += f"{row[b] * 1e3:>12.3f}ms"
        if len(backends) == 2:
            line += f"{row['numpy'] / row['compiled']:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
