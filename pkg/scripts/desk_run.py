"""Desk preset end to end: generate data, train, score the best checkpoint.

    python3 scripts/desk_run.py --out runs/desk [--variants full,no_ff]

Writes ``<out>/desk.json`` with validation/test metrics and wall times, and
prints whether the desk targets (val AUC >= 0.95, test mask IoU >= 0.70,
15 minutes) are met.
"""

import argparse
import json
import logging

from m2tr.train import ABLATIONS, desk_run


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--variants", default="full", help=f"comma list from {sorted(ABLATIONS)}")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    summary = desk_run(args.out, variants=args.variants.split(","), progress=not args.quiet)
    print(json.dumps(summary, sort_keys=True, indent=2))
    full = summary["variants"].get("full")
    if full:
        ok = full["val_auc"] >= 0.95 and full["test_mask_iou"] >= 0.70 and full["total_seconds"] <= 900
        print(f"desk targets {'met' if ok else 'NOT met'}")


if __name__ == "__main__":
    main()
