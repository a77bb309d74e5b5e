"""Which modes each sensor sees: <c_j, phi_k> for both families of the example."""

import argparse

from rsfdi.reaction_diffusion import build_system
from rsfdi.spectral_core import SpectralVector, inner_product


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kmax", type=int, default=64)
    args = ap.parse_args()

    sys = build_system()
    blind = {f.label: [] for f in sys.families}
    for f in sys.families:
        for k in range(1, args.kmax + 1):
            v = SpectralVector.unit(f.label, k)
            g = [inner_product(c, v, sys) for c in sys.C]
            if all(abs(x) < 1e-14 for x in g):
                blind[f.label].append(k)
            if k <= 9:
                print(f"{f.label} k={k:<3} <c1,phi>={g[0]: .3e} <c2,phi>={g[1]: .3e}")
    for lab, ks in blind.items():
        print(f"{lab}: invisible to both sensors for k = {ks}")


if __name__ == "__main__":
    main()
