"""L1 error of the implicit scheme against the Barenblatt profile under grid refinement."""
import argparse

import numpy as np

from pmelab.grid import Grid
from pmelab.reference import BarenblattParams, barenblatt_field, barenblatt_problem
from pmelab.solver import solve_cauchy_dirichlet


def l1_error(m, nx, T):
    p = BarenblattParams(m)
    g = Grid.make(1, nx, round(T * nx) + 1)
    u, _ = solve_cauchy_dirichlet(barenblatt_problem(p, g))
    B = barenblatt_field(p, g).values[-1]
    return float(np.abs(u.values[-1] - B).sum() / np.abs(B).sum())


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--m", type=float, default=2.0)
    ap.add_argument("--T", type=float, default=0.1)
    ap.add_argument("--nx", type=int, nargs="+", default=[100, 200, 400])
    args = ap.parse_args()
    prev = None
    print(f"{'nx':>6} {'L1 rel error':>14} {'ratio':>7}")
    for nx in args.nx:
        e = l1_error(args.m, nx, args.T)
        print(f"{nx:6d} {e:14.6e} {'' if prev is None else f'{prev / e:7.3f}'}")
        prev = e


if __name__ == "__main__":
    main()
