"""Compare the compiled and numpy closed-loop rollout kernels.

Runs one batch of guided rollouts (a dispersed fine-braking-like state set
over a t_go grid) with each backend, checks that they agree and reports the
wall-clock time per rollout.

    python3 benchmarks/bench_rollout.py --samples 200 --tgo-step 10
"""
import argparse
import time

import numpy as np

from lunardescent import _kernels
from lunardescent._kernels import _rollout_py
from lunardescent.dynamics import MoonConstants


def _batch(n_samples, tgo_step, seed):
    c = MoonConstants()
    g = c.gravity
    rng = np.random.default_rng(seed)
    mean = np.array([-3000.0, 6000.0, 0.0, 60.0, -40.0, 0.0, 980.0])
    X = mean + rng.normal(size=(n_samples, 7)) * [500, 500, 0, 10, 10, 0, 0]
    grid = np.arange(150.0, 500.0 + 1e-9, tgo_step)
    states = np.repeat(X, len(grid), axis=0)
    tgo = np.tile(grid, n_samples)
    target = np.r_[0.0, 800.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    targets = np.tile(target, (len(states), 1))
    abar0 = np.zeros((len(states), 3))
    tmax = c.max_thrust(4)
    args = (states, targets, abar0, tgo, g, 0.3 * tmax, tmax, c.exhaust_velocity, c.dry_mass)
    return args


def _time(fn, args, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=100)
    ap.add_argument("--tgo-step", type=float, default=10.0)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args(argv)

    args = _batch(a.samples, a.tgo_step, a.seed)
    n = len(args[0])
    print(f"{n} rollouts ({a.samples} states x {n // a.samples} t_go values), best of {a.repeat}")
    t_py, out_py = _time(_rollout_py.rollout_batch, args, a.repeat)
    print(f"  numpy   {t_py:8.3f} s  {1e3 * t_py / n:8.3f} ms/rollout")
    try:
        from lunardescent._kernels import _rollout_cy
    except ImportError:
        print("  cython  not built (run `pip install -e . --no-build-isolation`)")
        return 0
    t_cy, out_cy = _time(_rollout_cy.rollout_batch, args, a.repeat)
    print(f"  cython  {t_cy:8.3f} s  {1e3 * t_cy / n:8.3f} ms/rollout  ({t_py / t_cy:.1f}x)")
    same_status = np.array_equal(out_py[1], out_cy[1])
    dx = float(np.max(np.abs(out_py[0] - out_cy[0])))
    print(f"  agreement: status identical {same_status}, max final-state difference {dx:.2e}")
    print(f"  import-time backend: {_kernels.BACKEND}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
