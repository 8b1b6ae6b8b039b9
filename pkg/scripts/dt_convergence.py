"""Time-step convergence of the reverse Hoelder BSDE: Y_0 error against e^{p(p-1) lambda^2 T / 2}.

Solves on each grid with one seed and prints the error and the ratio of
successive errors (close to 2 for a first-order scheme while the time error
dominates the Monte Carlo error).
"""

import argparse
import math

from bmo_bsde.bsde import LinearBsdeSpec, solve_backward
from bmo_bsde.timegrid import Constant, TimeGrid, build_martingale, simulate_brownian, stochastic_exponential


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lam", type=float, default=0.5)
    ap.add_argument("--p", type=float, default=3.0)
    ap.add_argument("--paths", type=int, default=20_000)
    ap.add_argument("--steps", type=int, nargs="+", default=[25, 50, 100, 200, 400])
    args = ap.parse_args(argv)

    exact = math.exp(args.p * (args.p - 1) * args.lam**2 / 2)
    prev = None
    print(f"{'steps':>6} {'Y_0':>12} {'error':>11} {'ratio':>6}")
    for n in args.steps:
        b = simulate_brownian(TimeGrid(1.0, n), args.paths, seed=1)
        M = stochastic_exponential(build_martingale(b, Constant(args.lam)))
        y0 = solve_backward(LinearBsdeSpec.reverse_holder(M, args.p)).y0
        err = abs(y0 - exact)
        ratio = "" if prev is None else f"{prev / err:6.2f}"
        print(f"{n:>6} {y0:>12.8f} {err:>11.3e} {ratio:>6}")
        prev = err


if __name__ == "__main__":
    main()
