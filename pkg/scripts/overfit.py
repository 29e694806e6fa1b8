"""Overfit the desk network on 4 synthetic patches, then run the coarse-to-fine
and step-progression checks on the result.

    python scripts/overfit.py [--out runs/overfit] [--fresh]
"""

import argparse
import json
import logging

from ssrde.experiments import coarse_to_fine, overfit_config, run_overfit, train_set_psnr


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--fresh", action="store_true", help="train even if a matching run exists")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)

    cfg = overfit_config()
    run = run_overfit(args.out, cfg, reuse=not args.fresh)
    net = run.net()
    losses = run.losses
    result = {
        "fingerprint": cfg.fingerprint(),
        "seconds": run.seconds,
        "best_train_psnr": max(run.psnrs),
        "final_train_psnr": run.psnrs[-1],
        "loss_first_50_strictly_decreasing": all(b < a for a, b in zip(losses[:50], losses[1:50])),
        "train_set_psnr": train_set_psnr(net, cfg),
        "coarse_to_fine": coarse_to_fine(net, cfg),
    }
    (run.out / "results.json").write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
