"""
Temporal order of BDF1/2/3 on a 2D heat equation.

With the exact solution (x^2 + y^2)(2 + sin(pi t)) the spatial error vanishes
for p >= 2, so the space-time H1 error measures the time integrator alone and
the fitted slopes land on 1, 2 and 3.  With sin(pi x) sin(pi y) sin(pi t) the
spatial error sets a floor, and the error stops decreasing once the time
error falls below it.

Usage:  python3 demos/bdf_convergence.py [--p 3] [--problem poly]
"""

import argparse

from semcardio.bench import bdf_order_study, plateau_check


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    ap.add_argument("--p", type=int, default=3)
    ap.add_argument("--problem", choices=("poly", "sin"), default="poly")
    ap.add_argument("--t-final", type=float, default=1.0)
    args = ap.parse_args(argv)

    st = bdf_order_study(ps=(args.p,), problem=args.problem, t_final=args.t_final)
    print(f"problem {args.problem}, p = {args.p}, dt = {st['dts']}")
    for (p, scheme), s in st["slopes"].items():
        errs = [r["err_H1"] for r in st["rows"] if r["scheme"] == scheme]
        print(f"  {scheme}: H1 errors " + " ".join(f"{e:.2e}" for e in errs) + f"  slope {s['H1']:.2f}")
    if args.problem == "sin":
        for (p, scheme), v in plateau_check(st).items():
            print(f"  {scheme}: local slope at the smallest dt {v['slope_below']:.2f}")


if __name__ == "__main__":
    main()
