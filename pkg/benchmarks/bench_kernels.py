"""Compare the compiled and numpy likelihood kernels.

    python3 benchmarks/bench_kernels.py --households 2000 --months 30 --order 30
"""

import argparse
import time

import numpy as np

from takeup import kernels
from takeup.quadrature import gauss_hermite


def make_panel(households: int, months: int, seed: int):
    rng = np.random.default_rng(seed)
    n = households * months
    ua = rng.normal(-1.0, 0.5, n)
    uc = rng.normal(1.5, 0.5, n)
    d = (rng.random(n) < 0.5).astype(np.int8)
    dprev = np.empty_like(d)
    dprev[1:] = d[:-1]
    dprev[::months] = 0
    starts = np.arange(0, n + 1, months, dtype=np.int64)
    return ua, uc, dprev, d, starts


def best_of(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--households", type=int, default=2000)
    ap.add_argument("--months", type=int, default=30)
    ap.add_argument("--order", type=int, default=30)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ua, uc, dprev, d, starts = make_panel(args.households, args.months, args.seed)
    rule = gauss_hermite(args.order)
    call = (ua, uc, dprev, d, starts, rule.nodes, rule.log_weights, 1.5, 0.9)

    backends = ["python"]
    try:
        kernels.get_backend("compiled")
        backends.insert(0, "compiled")
    except ImportError:
        print("compiled extension not built; timing the numpy kernels only")

    print(f"{args.households} households x {args.months} months, {args.order} nodes, best of {args.repeats}")
    print(f"{'backend':10s}{'loglik (s)':>14s}{'loglik+grad (s)':>18s}")
    results = {}
    for name in backends:
        impl = kernels.get_backend(name)
        t_ll = best_of(lambda: impl.household_loglik(*call), args.repeats)
        t_gr = best_of(lambda: impl.household_loglik_grad(*call), args.repeats)
        results[name] = (impl.household_loglik(*call), t_ll, t_gr)
        print(f"{name:10s}{t_ll:14.4f}{t_gr:18.4f}")

    if len(results) == 2:
        ll_c, tc, gc = results["compiled"]
        ll_p, tp, gp = results["python"]
        print(f"speed-up: loglik {tp / tc:.1f}x, loglik+grad {gp / gc:.1f}x; "
              f"max |difference| {np.max(np.abs(ll_c - ll_p)):.2e}")


if __name__ == "__main__":
    main()
