#!/usr/bin/env python3
"""Finite-difference sweep over the two analytic backward passes.

For a batch of random instances this compares branch_loss_gradient and
attention_gate_backward against central finite differences of their
forward ops and prints the worst relative error per trial.  Exits 1 if
any trial exceeds the tolerance.

Example:

    python scripts/check_gradients.py --trials 20 --seed 3
"""

import argparse
import sys

import numpy as np

from lesionkit.netmath import (
    AttentionMap,
    ClassWeights,
    FeatureStack,
    attention_gate_backward,
    attention_gate_forward,
    branch_loss,
    branch_loss_gradient,
)


def parse_args(argv):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--step", type=float, default=1e-4)
    ap.add_argument("--tol", type=float, default=1e-4)
    ap.add_argument("--max-rows", type=int, default=256,
                    help="largest (voxels, 6) loss instance to draw")
    return ap.parse_args(argv)


def fd_gradient(fun, x, step):
    g = np.zeros(x.size)
    flat = x.reshape(-1)
    for k in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[k] += step
        lo[k] -= step
        g[k] = (fun(hi.reshape(x.shape)) - fun(lo.reshape(x.shape))) / (2 * step)
    return g.reshape(x.shape)


def rel_err(analytic, fd):
    return float(np.max(np.abs(analytic - fd)
                        / np.maximum(np.abs(analytic) + np.abs(fd), 1e-6)))


def loss_trial(rng, n_rows, step):
    n = int(rng.integers(8, n_rows + 1))
    w = ClassWeights.lesion_default()
    p = rng.uniform(0.05, 0.95, size=(n, 6))
    y = np.zeros((n, 6))
    y[np.arange(n), rng.integers(0, 6, size=n)] = 1.0
    analytic = branch_loss_gradient(p, y, w)
    fd = fd_gradient(lambda a: branch_loss(a, y, w).total, p, step)
    return f"loss  n={n:3d}", rel_err(analytic, fd)


def gate_trial(rng, step):
    c = int(rng.integers(2, 7))
    h = int(rng.integers(4, 9))
    w = int(rng.integers(4, 9))
    if rng.random() < 0.5:
        ah, aw = h * int(rng.integers(1, 4)), w * int(rng.integers(1, 4))
        path = "pool"
    else:
        ah, aw = int(rng.integers(h, 2 * h + 1)), int(rng.integers(w, 2 * w + 1))
        path = "bilin"
    f = FeatureStack(rng.normal(size=(c, h, w)))
    a = AttentionMap(rng.uniform(0.1, 0.9, size=(ah, aw)))
    dout = rng.normal(size=(c, h, w))
    df, da = attention_gate_backward(f, a, dout)
    fd_f = fd_gradient(
        lambda arr: float((attention_gate_forward(FeatureStack(arr), a).planes
                           * dout).sum()), f.planes, step)
    fd_a = fd_gradient(
        lambda arr: float((attention_gate_forward(f, AttentionMap(arr)).planes
                           * dout).sum()), a.plane, step)
    label = f"gate  {c}x{h}x{w} <- {ah}x{aw} ({path})"
    return label, max(rel_err(df, fd_f), rel_err(da, fd_a))


def main(argv=None) -> int:
    args = parse_args(argv)
    rng = np.random.default_rng(np.random.Philox(args.seed))
    worst = 0.0
    for i in range(args.trials):
        for label, err in (loss_trial(rng, args.max_rows, args.step),
                           gate_trial(rng, args.step)):
            flag = "" if err < args.tol else "  <-- FAIL"
            print(f"[{i:02d}] {label:28s} max rel err {err:.3e}{flag}")
            worst = max(worst, err)
    print(f"\nworst over {args.trials} trials: {worst:.3e} (tol {args.tol:.0e})")
    if worst >= args.tol:
        print("FAIL")
        return 1
    print("OK")
    return 0


if __name__ == "__main__":
    sys.exit(main())
