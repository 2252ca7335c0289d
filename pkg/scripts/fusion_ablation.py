#!/usr/bin/env python3
"""Train the desk preset once per fusion mode and compare validation MSE."""
import argparse
import time
from dataclasses import replace

from brainroi import encoder as enc
from brainroi import training as tr


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--noise", type=float, default=0.0)
    ap.add_argument("--stage1-epochs", type=int, default=40)
    args = ap.parse_args()

    ds = tr.generate_synthetic_dataset(tr.SyntheticDatasetSpec(noise_sigma=args.noise, seed=args.seed))
    print(f"{'fusion':<12}{'initial':>12}{'stage 1':>12}{'stage 2':>12}{'secs':>8}")
    for mode in enc.FUSION_MODES:
        cfg = replace(enc.EncoderConfig(), fusion_mode=mode)
        t0 = time.perf_counter()
        p = enc.init_params(cfg, ds.n_labels, args.seed)
        r1 = tr.run_stage(tr.preset_config("desk", 1, args.seed, epochs=args.stage1_epochs), ds, p, cfg)
        r2 = tr.run_stage(tr.preset_config("desk", 2, args.seed), ds, r1.best_params, cfg)
        print(f"{mode:<12}{r1.curve[0]['macro_val_mse']:12.4g}{r1.best_macro_val:12.3g}"
              f"{r2.best_macro_val:12.3g}{time.perf_counter() - t0:8.1f}")


if __name__ == "__main__":
    main()
