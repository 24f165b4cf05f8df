"""Train ablation variants on one dataset with a shared seed and data order.

    python3 scripts/ablation.py --data runs/desk/data --out runs/ablation \
        --variants full,no_mt,no_ff,no_cmf [--single-scale] [--epochs 10]

The dataset directory needs train/ and val/ splits; a test/ split adds test
columns to ``<out>/ablation.csv``.
"""

import argparse

from m2tr.config import Config, desk_preset
from m2tr.train import ABLATIONS, run_ablation, single_scale_variants


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data", required=True)
    parser.add_argument("--out", default="runs/ablation")
    parser.add_argument("--config", help="JSON config; defaults to the desk preset")
    parser.add_argument("--variants", default="full,no_mt,no_ff,no_cmf")
    parser.add_argument("--single-scale", action="store_true", help="add one variant per patch side")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--max-steps-per-epoch", type=int)
    args = parser.parse_args()
    cfg = Config.load(args.config) if args.config else desk_preset().config
    if args.epochs:
        cfg = cfg.replace(epochs=args.epochs)
    variants = {name: ABLATIONS[name] for name in args.variants.split(",")}
    if args.single_scale:
        variants.update(single_scale_variants(cfg))
    rows = run_ablation(cfg, variants, args.data, args.out, args.max_steps_per_epoch)
    for row in rows:
        print(f"{row['variant']:>16}  val AUC {row['val_auc']:.4f}  test AUC {row['test_auc']}  "
              f"params {row['n_params']}")


if __name__ == "__main__":
    main()
