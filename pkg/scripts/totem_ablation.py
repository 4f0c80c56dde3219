"""Reconstruction L1 of one room seen through 2 versus 4 totems.

    python scripts/totem_ablation.py --epochs 3000
"""
import argparse

from totemcheck import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=3000)
    ap.add_argument("--pose-mode", default="oracle", choices=["init", "joint", "oracle"])
    args = ap.parse_args()

    runs = ex.totem_count_runs(args.seed, (2, 3, 4), args.epochs, args.pose_mode)
    for n, r in runs.items():
        print(f"{n} totems  L1 region {r.l1:.4f}  full {r.l1_full:.4f}  rays {len(r.rays)}")
    gap = runs[2].l1 / runs[4].l1 - 1
    print(f"2 vs 4 totems: {100 * gap:+.1f}% region L1 (region seen through 4 totems)")


if __name__ == "__main__":
    main()
