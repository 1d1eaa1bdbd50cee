"""Balayage capacity against the brute-force constrained mass maximizer."""
import argparse
import time

from pmelab.capacity import brute_force_capacity, capacity_of_compact
from pmelab.grid import CompactSet, Grid

CASES = {"spatial": [(4, 6), (4, 7), (4, 8)], "temporal": [(4, 7), (5, 7), (6, 7)],
         "block": [(4, 6), (4, 7), (5, 6), (5, 7)]}


def refine(cells):
    return sorted({(2 * n + a, 2 * i + b) for n, i in cells for a in (-1, 0) for b in (0, 1)
                   if 2 * n + a > 0})


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--m", type=float, default=2.0)
    ap.add_argument("--refined", action="store_true", help="also run on the halved grid")
    args = ap.parse_args()
    grids = [("coarse", Grid.make(1, 16, 12), lambda c: c)]
    if args.refined:
        grids.append(("refined", Grid.make(1, 32, 23), refine))
    print(f"{'case':>9} {'grid':>8} {'balayage':>10} {'oracle':>10} {'rel err':>8} {'time':>6}")
    for name, cells in CASES.items():
        for tag, g, map_cells in grids:
            K = CompactSet.from_cells(g, map_cells(cells))
            t = time.perf_counter()
            cap = capacity_of_compact(K, args.m).value
            orc = brute_force_capacity(K, args.m).value
            print(f"{name:>9} {tag:>8} {cap:10.6f} {orc:10.6f} {abs(cap - orc) / orc:8.2%} "
                  f"{time.perf_counter() - t:5.1f}s")


if __name__ == "__main__":
    main()
