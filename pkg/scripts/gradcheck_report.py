#!/usr/bin/env python3
"""Per-tensor analytic vs central-difference gradient errors at desk dims.

Relative error is ||a - n|| / max(||a|| + ||n||, 1e-6); tensors whose true
gradient is exactly zero are marked so the floored value is read as an
absolute roundoff bound.
"""
import argparse

import numpy as np

from brainroi import encoder as enc
from brainroi.volume_atlas import MembershipMatrix


def fd_grad(loss, params, h):
    out = {}
    for name, value in params.items():
        flat = value.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss(params)
            flat[i] = old - h
            g[i] = (up - loss(params)) / (2 * h)
            flat[i] = old
        out[name] = g.reshape(value.shape)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--voxels", type=int, default=32)
    ap.add_argument("--samples", type=int, default=2)
    ap.add_argument("--h", type=float, default=1e-5)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    for mode in enc.FUSION_MODES:
        cfg = enc.EncoderConfig(fusion_mode=mode)
        rng = np.random.default_rng(args.seed)
        params = enc.init_params(cfg, [8, 8], seed=args.seed)
        mems = [MembershipMatrix(rng.integers(-1, 8, args.voxels), 8) for _ in range(2)]
        batch = enc.SubjectBatch(rng.uniform(-1, 1, (args.voxels, 3)), rng.normal(size=(args.samples, args.voxels)),
                                 mems)
        target = rng.normal(size=(args.samples, cfg.L, cfg.D_out))
        _, analytic = enc.loss_and_grad(batch, params, cfg, target)
        numeric = fd_grad(lambda p: enc.loss_and_grad(batch, p, cfg, target)[0],
                          {k: v.copy() for k, v in params.items()}, args.h)
        print(f"\n[{mode}]  {'tensor':<16}{'|analytic|':>12}{'rel.err':>12}")
        for k in params:
            a, n = analytic[k], numeric[k]
            err = np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-6)
            note = "  (zero gradient)" if np.linalg.norm(a) < 1e-12 else ""
            print(f"        {k:<16}{np.linalg.norm(a):12.3e}{err:12.2e}{note}")


if __name__ == "__main__":
    main()
