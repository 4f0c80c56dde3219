"""Command-line driver: render | tamper | reconstruct | detect | eval.

Every command writes one ``manifest.json`` and one byte-deterministic
``metrics.json`` into its output directory. Heavy modules are imported lazily so
that ``--threads`` can configure numba before it loads.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import shutil
import sys
import time
from pathlib import Path

from . import __version__

log = logging.getLogger("totemcheck")

BUNDLE_FILES = ("scene.json", "image.png", "poses.json")
GLOBAL_DEFAULTS = {"seed": None, "threads": None, "out": None, "verbose": False}


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    if args.out is None:
        raise SystemExit(f"error: {args.command} needs --out DIR")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing file: {p}")
    return p


def _write_manifest(out: Path, args, inputs: dict, outputs: list, seed, started: float):
    from .imageio import dump_json

    dump_json(out / "manifest.json", {
        "command": args.command,
        "argv": sys.argv[1:],
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(outputs),
        "seed": seed,
        "threads": args.threads,
        "version": __version__,
        "wall_clock_s": round(time.time() - started, 3),
    })


# ---------------------------------------------------------------------------
# bundle I/O


def write_bundle(out: Path, bundle, image=None) -> list:
    from .imageio import dump_json, write_mask, write_rgb16

    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "scene.json", bundle.spec.to_dict())
    write_rgb16(out / "image.png", bundle.image if image is None else image)
    (out / "masks").mkdir(exist_ok=True)
    names = []
    for m in bundle.totem_masks:
        name = f"masks/mask_{m.totem_id:02d}.png"
        write_mask(out / name, m.mask)
        names.append(name)
    dump_json(out / "poses.json", {"gt_poses": [list(map(float, p)) for p in bundle.gt_poses],
                                   "masks": names})
    return ["scene.json", "image.png", "poses.json", *names]


def read_bundle(path):
    """Returns (spec, image, masks, gt_poses) from a bundle directory."""
    from .imageio import load_json, read_mask, read_rgb
    from .posefit import TotemMask
    from .simcam import SceneSpec
    from .schemas import SchemaError

    d = Path(path)
    for f in BUNDLE_FILES:
        _need(d / f)
    try:
        spec = SceneSpec.from_dict(load_json(d / "scene.json"))
    except SchemaError as e:
        raise SchemaError(f"{d / 'scene.json'}: {e}") from None
    poses = load_json(d / "poses.json")
    masks = [TotemMask(j, read_mask(_need(d / name))) for j, name in enumerate(poses["masks"])]
    if len(masks) != len(spec.totems):
        raise ValueError(f"{d}: {len(masks)} masks for {len(spec.totems)} totems")
    return spec, read_rgb(d / "image.png"), masks, poses["gt_poses"]


def _union(masks):
    import numpy as np

    u = np.zeros(masks[0].mask.shape, dtype=bool)
    for m in masks:
        u |= m.mask
    return u


# ---------------------------------------------------------------------------
# commands


def cmd_render(args):
    from .imageio import dump_json, load_json
    from .simcam import SceneSpec, random_scene, render

    started = time.time()
    out = _out_dir(args)
    if args.scene:
        spec = SceneSpec.from_dict(load_json(_need(args.scene)))
        if args.seed is not None:
            spec.seed = args.seed
    else:
        spec = random_scene(args.seed or 0, n_totems=args.totems, size=args.size)
    bundle = render(spec)
    files = write_bundle(out, bundle)
    metrics = {"image_sha256": _sha256(out / "image.png"), "n_totems": len(bundle.totem_masks),
               "mask_pixels": [int(m.mask.sum()) for m in bundle.totem_masks], "seed": spec.seed}
    dump_json(out / "metrics.json", metrics)
    _write_manifest(out, args, {"scene": args.scene or "<generated>"}, files + ["metrics.json"],
                    spec.seed, started)
    log.info("rendered %d totems into %s", len(bundle.totem_masks), out)


def cmd_tamper(args):
    import numpy as np

    from . import experiments
    from .imageio import dump_json, load_json, write_mask, write_rgb16
    from .schemas import validate
    from .simcam import object_from_dict
    from .verify import Manipulation, apply_manipulation

    started = time.time()
    out = _out_dir(args)
    spec, image, masks, gt_poses = read_bundle(args.bundle)
    cfg = load_json(_need(args.manip))
    validate(cfg, "manipulation", str(args.manip))
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    union = _union(masks)
    if cfg["kind"] == "color_patch":
        color = cfg.get("color") or np.random.default_rng(seed).random(3).tolist()
        manip = Manipulation("color_patch", tuple(cfg["region"]), tuple(color))
    else:
        src = cfg.get("source", {})
        source = experiments.splice_source(
            spec, [object_from_dict(o) for o in src.get("add_objects", [])],
            src.get("remove_objects", []))
        manip = Manipulation("splice", tuple(cfg["region"]), source=source)
    tampered, gt = apply_manipulation(image, manip, seed, union)

    src_dir = Path(args.bundle)
    for f in ("scene.json", "poses.json"):
        shutil.copyfile(src_dir / f, out / f)
    shutil.copytree(src_dir / "masks", out / "masks", dirs_exist_ok=True)
    write_rgb16(out / "image.png", tampered)
    write_mask(out / "gt_mask.png", gt)
    dump_json(out / "manipulation.json", {**cfg, "seed": seed})
    metrics = {"kind": cfg["kind"], "changed_pixels": int(gt.sum()),
               "image_sha256": _sha256(out / "image.png"), "seed": seed}
    dump_json(out / "metrics.json", metrics)
    _write_manifest(out, args, {"bundle": args.bundle, "manipulation": args.manip},
                    ["scene.json", "poses.json", "masks", "image.png", "gt_mask.png",
                     "manipulation.json", "metrics.json"], seed, started)


def cmd_reconstruct(args):
    from . import experiments
    from .imageio import dump_json, load_json, write_rgb16
    from .radfield import TrainConfig, save_checkpoint, write_history_csv

    started = time.time()
    out = _out_dir(args)
    spec, image, masks, _ = read_bundle(args.bundle)
    if args.train:
        from .schemas import SchemaError

        try:
            cfg = TrainConfig.from_dict(load_json(_need(args.train)))
        except SchemaError as e:
            raise SchemaError(f"{args.train}: {e}") from None
    else:
        cfg = TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    rec = experiments.reconstruct(spec, image, masks, cfg, experiments.ground_truth_view(spec))
    save_checkpoint(out / "checkpoint.npz", rec.result, cfg, rec.init_centers)
    write_rgb16(out / "reconstruction.png", rec.image)
    write_history_csv(out / "history.csv", rec.result.history)
    dump_json(out / "train_config.json", cfg.to_dict())
    metrics = {"pose_mode": cfg.pose_mode, **rec.metrics(),
               "init_centers": rec.init_centers.tolist(), "seed": cfg.seed}
    dump_json(out / "metrics.json", metrics)
    _write_manifest(out, args, {"bundle": args.bundle, "train": args.train or "<defaults>"},
                    ["checkpoint.npz", "reconstruction.png", "history.csv", "train_config.json",
                     "metrics.json"], cfg.seed, started)
    log.info("recon L1 %.4f  pose L1 %.4f", rec.l1, rec.pose_l1)


def cmd_detect(args):
    import numpy as np

    from . import radfield, verify
    from .experiments import scene_box
    from .imageio import dump_json, read_mask, write_heatmap_png

    started = time.time()
    out = _out_dir(args)
    spec, image, masks, _ = read_bundle(args.bundle)
    fld, centers, _, meta = radfield.load_checkpoint(_need(args.checkpoint))
    cfg = radfield.TrainConfig.from_dict(meta["config"])
    totems = [t.moved(c) for t, c in zip(spec.totems, centers)]
    lo, hi = scene_box(spec)
    rays = radfield.preprocess_rays(spec.camera, totems, masks, image, lo, hi,
                                    cfg.cube_overflow_threshold)
    near, far = meta["near"], meta["far"]
    region = verify.protected_region(fld, rays, spec.camera, near, far, cfg.samples_per_ray)
    recon = radfield.render_camera_view(fld, spec.camera, near, far, cfg.samples_per_ray)
    gt_path = Path(args.bundle) / "gt_mask.png"
    gt = read_mask(gt_path) if gt_path.exists() else None
    union = _union(masks)
    report = verify.detect(image, recon, region, union, gt)
    write_heatmap_png(out / "heatmap.png", report.heatmap)
    np.save(out / "heatmap_raw.npy", report.raw.astype(np.float32))
    rep = report.to_dict()
    manip = Path(args.bundle) / "manipulation.json"
    kind = "none"
    if manip.exists():
        from .imageio import load_json

        kind = load_json(manip)["kind"]
    rep["kind"] = kind
    dump_json(out / "report.json", rep)
    metrics = {k: v for k, v in rep.items() if k != "per_patch"}
    dump_json(out / "metrics.json", metrics)
    _write_manifest(out, args, {"bundle": args.bundle, "checkpoint": args.checkpoint},
                    ["heatmap.png", "heatmap_raw.npy", "report.json", "metrics.json"],
                    args.seed, started)
    if "ap" in rep:
        log.info("AP %.3f (naive %.3f) over %d patches", rep["ap"], rep["naive_baseline"],
                 rep["n_patches"])
    else:
        log.info("no manipulated patches; max raw score %.1f is the baseline noise level",
                 rep["max_raw_score"])


def eval_rows(dirs) -> list:
    from .imageio import load_json

    rows = []
    for d in dirs:
        d = Path(d)
        m = load_json(_need(d / "metrics.json"))
        cmd = load_json(_need(d / "manifest.json"))["command"]
        rows.append({
            "run": d.name,
            "command": cmd,
            "group": m.get("kind", m.get("pose_mode", "")),
            "ap": m.get("ap"),
            "naive_baseline": m.get("naive_baseline"),
            "recon_l1": m.get("recon_l1"),
            "pose_l1": m.get("pose_l1"),
        })
    return rows


def summarize(rows) -> list:
    import numpy as np

    groups = {}
    for r in rows:
        groups.setdefault((r["command"], r["group"]), []).append(r)
    out = []
    for (cmd, group), rs in sorted(groups.items()):
        def mean(key):
            vals = [r[key] for r in rs if r[key] is not None]
            return float(np.mean(vals)) if vals else None

        out.append({"command": cmd, "group": group, "n": len(rs), "mean_ap": mean("ap"),
                    "mean_naive": mean("naive_baseline"), "recon_l1": mean("recon_l1"),
                    "pose_l1": mean("pose_l1")})
    return out


def _fmt(v):
    return "" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_eval(args):
    import csv

    from .imageio import dump_json

    started = time.time()
    rows = eval_rows(args.dirs)
    summary = summarize(rows)
    cols = ["command", "group", "n", "mean_ap", "mean_naive", "recon_l1", "pose_l1"]
    widths = [max(len(c), *(len(_fmt(s[c])) for s in summary)) for c in cols]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(_fmt(s[c]).ljust(w) for c, w in zip(cols, widths)) for s in summary]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out is not None:
        out = _out_dir(args)
        with open(out / "eval.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["run", "command", "group", "ap", "naive_baseline",
                                              "recon_l1", "pose_l1"])
            w.writeheader()
            w.writerows(rows)
        with open(out / "summary.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            w.writerows(summary)
        (out / "eval.txt").write_text(text)
        dump_json(out / "metrics.json", {"rows": rows, "summary": summary})
        _write_manifest(out, args, {f"dir{i}": d for i, d in enumerate(args.dirs)},
                        ["eval.csv", "summary.csv", "eval.txt", "metrics.json"], args.seed,
                        started)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="overrides config seeds")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="numba worker threads")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="totemcheck", description=__doc__.splitlines()[0],
                                parents=[common])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[common], **k)

    r = sub.add_parser("render", help="render a scene to a bundle directory")
    r.add_argument("scene", nargs="?", help="scene JSON (default: generated from --seed)")
    r.add_argument("--size", type=int, default=256)
    r.add_argument("--totems", type=int, default=4)
    r.set_defaults(func=cmd_render)

    t = sub.add_parser("tamper", help="apply a manipulation to a bundle")
    t.add_argument("bundle")
    t.add_argument("manip", help="manipulation JSON")
    t.set_defaults(func=cmd_tamper)

    c = sub.add_parser("reconstruct", help="fit a radiance field from the totem pixels")
    c.add_argument("bundle")
    c.add_argument("train", nargs="?", help="training config JSON (default: built-in)")
    c.set_defaults(func=cmd_reconstruct)

    d = sub.add_parser("detect", help="inconsistency heatmap and patch AP")
    d.add_argument("bundle")
    d.add_argument("checkpoint")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="aggregate metrics from run directories")
    e.add_argument("dirs", nargs="+")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.threads is not None:
        if args.threads < 1:
            raise SystemExit("error: --threads must be positive")
        if "numba" in sys.modules:
            import numba

            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        else:
            os.environ["NUMBA_NUM_THREADS"] = str(args.threads)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    from .schemas import SchemaError

    try:
        args.func(args)
    except (FileNotFoundError, SchemaError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
