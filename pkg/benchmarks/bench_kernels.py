#!/usr/bin/env python3
"""Microbenchmarks for the numeric kernels: compiled extension vs numpy.

Backend selection happens at import time, so comparing the two means two
interpreters: run this script directly and it times the active backend,
re-executes itself in a subprocess with ``TAGTRIM_PURE_PYTHON=1``, and
prints a side-by-side table. ``--json`` makes a run emit machine-readable
results and skip the subprocess (that is how the child reports back).

Example::

    python3 benchmarks/bench_kernels.py --rows 4096 --dim 64
"""

import argparse
import json
import os
import subprocess
import sys
from time import perf_counter

import numpy as np

from tagtrim import model as M
from tagtrim.numerics import GradientTape, backend
from tagtrim.querydata import SynthConfig, build_vocab, generate_synthetic
from tagtrim.traineval import Adam, TrainConfig


def best_of(fn, repeats):
    """Best wall-clock time of ``repeats`` calls (after one warm-up)."""
    fn()
    best = float("inf")
    for _ in range(repeats):
        start = perf_counter()
        fn()
        best = min(best, perf_counter() - start)
    return best


def kernel_cases(rows, dim):
    """Closures over representative inputs for every dispatched kernel."""
    rng = np.random.default_rng(0)
    x = rng.normal(size=(rows, dim))
    gy = rng.normal(size=(rows, dim))
    resid = rng.normal(size=(rows, dim))
    scores = rng.normal(size=(rows, dim))
    weights = (rng.random(size=(rows, dim)) < 0.4).astype(np.float64)
    weights[:, 0] = 1.0  # every row keeps at least one admissible key
    alpha, coeff = backend.weighted_softmax(scores, weights)
    soft = backend.softmax(scores)
    _, xhat, inv_std = backend.add_norm(x, resid, 1.0, 0.0, 1e-5)

    return {
        "gelu forward": lambda: backend.gelu(x),
        "gelu backward": lambda: backend.gelu_grad(x, gy),
        "add+norm forward": lambda: backend.add_norm(x, resid, 1.0, 0.0, 1e-5),
        "add+norm backward": lambda: backend.add_norm_grad(
            gy, xhat, inv_std, 1.0
        ),
        "weighted softmax forward": lambda: backend.weighted_softmax(
            scores, weights
        ),
        "weighted softmax backward": lambda: backend.weighted_softmax_grad(
            gy, alpha, coeff
        ),
        "softmax forward": lambda: backend.softmax(scores),
        "softmax backward": lambda: backend.softmax_grad(gy, soft),
    }


def train_step_case(batch_size=64):
    """One optimizer step (forward, backward, update) on the heaviest mode."""
    records = generate_synthetic(SynthConfig(n_records=batch_size, seed=9))
    vocab = build_vocab(records)
    cfg = M.ModelConfig(
        d_model=32, n_heads=4, n_layers=1, d_ff=64, max_len=12,
        graph_mode="dynamic", fusion="gated",
    )
    params = M.init_params(cfg, vocab.n_tokens, vocab.n_tags, seed=0)
    batch = M.prepare_batch(records, vocab, cfg)
    tensors = [tensor for _, tensor in params.items()]
    optimizer = Adam(tensors, TrainConfig(epochs=1))

    def step():
        with GradientTape() as tape:
            out = M.forward_batch(batch, params, cfg)
            loss = M.batch_loss(out["p"], batch)
        optimizer.step(tape.gradients(loss, tensors))

    return step


def run_suite(rows, dim, repeats):
    results = {"backend": backend.active_backend(), "timings": {}}
    for name, fn in kernel_cases(rows, dim).items():
        results["timings"][name] = best_of(fn, repeats)
    results["timings"]["train step (dynamic-gated, batch 64)"] = best_of(
        train_step_case(), max(3, repeats // 10)
    )
    return results


def format_seconds(seconds):
    if seconds < 1e-3:
        return f"{seconds * 1e6:8.1f} µs"
    if seconds < 1.0:
        return f"{seconds * 1e3:8.2f} ms"
    return f"{seconds:8.3f} s "


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=4096,
                        help="row count for the kernel inputs")
    parser.add_argument("--dim", type=int, default=64,
                        help="row width for the kernel inputs")
    parser.add_argument("--repeats", type=int, default=50,
                        help="timed repetitions per kernel (best is kept)")
    parser.add_argument("--json", action="store_true",
                        help="print raw results as JSON and exit")
    args = parser.parse_args(argv)

    mine = run_suite(args.rows, args.dim, args.repeats)
    if args.json:
        print(json.dumps(mine))
        return 0

    child = subprocess.run(
        [sys.executable, os.path.abspath(__file__), "--json",
         "--rows", str(args.rows), "--dim", str(args.dim),
         "--repeats", str(args.repeats)],
        env={**os.environ, "TAGTRIM_PURE_PYTHON": "1"},
        capture_output=True, text=True, check=True,
    )
    pure = json.loads(child.stdout)

    print(f"kernel inputs: {args.rows} rows x {args.dim} columns, "
          f"best of {args.repeats}")
    if mine["backend"] != "compiled":
        print("note: compiled extension unavailable; both columns use the "
              "numpy backend")
    header = f"{'case':<40} {mine['backend']:>12} {'python':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, seconds in mine["timings"].items():
        reference = pure["timings"][name]
        print(f"{name:<40} {format_seconds(seconds):>12} "
              f"{format_seconds(reference):>12} {reference / seconds:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
