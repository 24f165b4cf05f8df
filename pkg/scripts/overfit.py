"""Capacity sanity check: memorize 32 samples and report the final training loss.

    python3 scripts/overfit.py --out runs/overfit [--epochs 200]

Writes ``<out>/overfit.json`` and prints whether the loss fell below the
preset target (0.05).
"""

import argparse
import json
import logging

from m2tr.config import overfit_preset
from m2tr.train import overfit_run


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/overfit")
    parser.add_argument("--epochs", type=int, help="override the preset's 200 epochs")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    preset = overfit_preset()
    cfg = preset.config if args.epochs is None else preset.config.replace(epochs=args.epochs)
    summary = overfit_run(args.out, preset, cfg, progress=not args.quiet)
    print(json.dumps(summary, sort_keys=True, indent=2))
    print(f"final loss {summary['final_loss']:.4f}: target {'met' if summary['final_loss'] < preset.target_loss else 'NOT met'}")


if __name__ == "__main__":
    main()
