"""Camera-view reconstruction L1 for frozen-init, joint and oracle totem poses.

L1 region is scored on the pixels visible through the totems, L1 full on every non-totem pixel.

    python scripts/table1.py --epochs 3000
"""
import argparse
import time

from totemcheck import experiments as ex
from totemcheck import simcam


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0, help="scene seed (0 is the default scene)")
    ap.add_argument("--epochs", type=int, default=3000)
    args = ap.parse_args()

    t0 = time.time()
    runs = ex.pose_mode_runs(simcam.random_scene(args.seed), args.epochs)
    print(f"{'pose':8s} {'L1 region':>10s} {'L1 full':>9s} {'pose err':>9s}")
    for mode in ("init", "joint", "oracle"):
        r = runs[mode]
        print(f"{mode:8s} {r.l1:10.4f} {r.l1_full:9.4f} {r.pose_l1:9.4f}")
    l1 = {m: r.l1 for m, r in runs.items()}
    print(f"oracle <= joint <= init: {l1['oracle'] <= l1['joint'] <= l1['init']}"
          f"  ({time.time() - t0:.0f} s)")


if __name__ == "__main__":
    main()
