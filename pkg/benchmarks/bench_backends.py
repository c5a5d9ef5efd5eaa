"""Benchmark the compiled kernels against the numpy fallback.

Usage:
    python3 benchmarks/bench_backends.py [--quick]

Reports per-call times for each hot kernel (in-process, both backends) and
an end-to-end rollout-collection comparison run in subprocesses so each
backend is selected at import time, exactly as production code sees it.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np  # noqa: E402

from ddxplan._core import fallback  # noqa: E402

try:
    from ddxplan._core import _speedups as compiled
except ImportError:
    compiled = None


def kernel_inputs(rng):
    t_steps, m = 2048, 60
    rewards = rng.normal(size=t_steps)
    values = rng.normal(size=t_steps)
    dones = (rng.random(t_steps) < 0.1).astype(float)
    dones[-1] = 1.0
    logits = rng.normal(size=m)
    mask = rng.random(m) < 0.5
    mask[0] = True
    probs = fallback.masked_softmax_1d(logits, mask)
    parent_index = np.full(m, -1, dtype=np.int64)
    for j in range(10, m):
        parent_index[j] = (j - 10) % 10
    asked = rng.random(m) < 0.3
    triplets = np.zeros(3 * m)
    for j in range(m):
        triplets[3 * j + int(rng.integers(3))] = 1.0
    return {
        "gae_scan": (rewards, values, dones, 0.99, 0.95),
        "masked_softmax_1d": (logits, mask),
        "categorical_sample": (probs, 0.371),
        "action_mask": (asked, triplets, parent_index),
    }


def bench_kernels(repeat: int) -> None:
    rng = np.random.default_rng(0)
    inputs = kernel_inputs(rng)
    print(f"{'kernel':<20} {'python (us)':>12} {'compiled (us)':>14} {'speedup':>8}")
    for name, args in inputs.items():
        fn_py = getattr(fallback, name)
        t_py = min(timeit.repeat(lambda: fn_py(*args), number=repeat, repeat=3)) / repeat
        if compiled is None:
            print(f"{name:<20} {t_py * 1e6:>12.2f} {'n/a':>14} {'n/a':>8}")
            continue
        fn_c = getattr(compiled, name)
        t_c = min(timeit.repeat(lambda: fn_c(*args), number=repeat, repeat=3)) / repeat
        print(
            f"{name:<20} {t_py * 1e6:>12.2f} {t_c * 1e6:>14.2f} {t_py / t_c:>7.1f}x"
        )


ROLLOUT_SNIPPET = r"""
import time
import numpy as np
import ddxplan
from ddxplan.cohort import CohortConfig, generate_cohort
from ddxplan.neural import actor_critic_init
from ddxplan.ontology import generate_synthetic_ontology
from ddxplan.rl_train import collect_rollouts
from ddxplan.screen_env import EnvConfig

onto = generate_synthetic_ontology(10, 5)
cohort = generate_cohort(onto, CohortConfig(n_diseases=5, size=200, history_dim=16, seed=0))
policy = actor_critic_init(16 + 3 * onto.size, onto.size, np.random.default_rng(0))
env_config = EnvConfig(budget=10)
collect_rollouts(policy, cohort, env_config, 256, np.random.default_rng(0), n_envs=8)  # warmup
start = time.perf_counter()
buf = collect_rollouts(policy, cohort, env_config, @STEPS@, np.random.default_rng(1), n_envs=8)
elapsed = time.perf_counter() - start
print(f"{ddxplan.BACKEND} {len(buf)} {elapsed:.3f}")
"""


def bench_rollout(steps: int) -> None:
    print(f"\nend-to-end: collect_rollouts({steps} steps, M=60, budget=10, n_envs=8)")
    times = {}
    for label, env_extra in (("compiled", {}), ("python", {"DDXPLAN_PURE_PYTHON": "1"})):
        env = dict(os.environ)
        env["PYTHONPATH"] = os.path.join(os.path.dirname(__file__), "..", "src")
        env.update(env_extra)
        out = subprocess.run(
            [sys.executable, "-c", ROLLOUT_SNIPPET.replace("@STEPS@", str(steps))],
            capture_output=True,
            text=True,
            env=env,
            check=True,
        )
        backend, n_steps, elapsed = out.stdout.split()
        times[label] = float(elapsed)
        rate = int(n_steps) / float(elapsed)
        print(f"  {backend:<9} {float(elapsed):.3f}s  ({rate:,.0f} steps/s)")
    if "compiled" in times and times["compiled"] > 0:
        print(f"  speedup  {times['python'] / times['compiled']:.2f}x")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true", help="fewer repeats")
    args = parser.parse_args()
    repeat = 2000 if args.quick else 20000
    if compiled is None:
        print("compiled kernels not built; run: python3 setup.py build_ext --inplace\n")
    bench_kernels(repeat)
    bench_rollout(2048 if args.quick else 8192)


if __name__ == "__main__":
    main()
