"""Operator norms of the kernel blocks K^(l,m) for a basis that depends only
on the conformation, showing that the off-diagonal blocks are small."""
import argparse

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigsh

from specvol import simulate, solver
from specvol.simulate import DatasetConfig


def block_norm(k, l, m, n):
    def mv(x):
        a = np.zeros((k.r, n, n, n))
        a[m] = x.reshape(n, n, n)
        return solver.apply_kernels(k, a)[l].ravel()

    op = LinearOperator((n**3, n**3), matvec=mv, dtype=float)
    return float(abs(eigsh(op, k=1, which="LM", tol=1e-6, return_eigenvectors=False)[0]))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-images", type=int, default=2000)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--seed", type=int, default=6)
    args = ap.parse_args()
    n = args.size
    ds = simulate.sample_dataset(DatasetConfig(n_images=args.n_images, n=n, kind="spin", seed=args.seed))
    th = ds.conformations["theta"]
    f = np.column_stack([np.ones_like(th), np.cos(th), np.sin(th), np.cos(2 * th), np.sin(2 * th)])
    k = solver.build_kernels(ds, np.linalg.qr(f)[0])
    norms = np.array([[block_norm(k, l, m, n) for m in range(k.r)] for l in range(k.r)])
    np.set_printoptions(precision=4, suppress=True)
    print(norms)
    off = norms[~np.eye(k.r, dtype=bool)]
    print(f"max off-diagonal / mean diagonal = {off.max() / np.diag(norms).mean():.4f}")


if __name__ == "__main__":
    main()
