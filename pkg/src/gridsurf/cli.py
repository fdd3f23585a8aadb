"""Command-line entry point.

Subcommands: gen-data, train, render, extract, eval, verify, compare. All
numeric outputs are written as CSV records with matplotlib figures rendered
next to them. Every command is reproducible from (config, seed) alone with
--threads 1.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import report as rpt
from .field import Bounds
from .loss import ColorMetric
from .render import (chamfer, extract_mesh, level_set_stability, psnr,
                     reference_mesh_from_scene, render_surface, render_volume,
                     save_image, save_mesh_obj, save_mesh_ply)
from .sensor import (bounds_from_config, generate_dataset, load_config,
                     load_dataset, rig_from_config, save_dataset,
                     scene_from_config)
from .train import (Checkpoint, TrainConfig, train, train_config_from_dict)
from .background import BackgroundStrategy

STABILITY_LEVELS = (0.01, 0.1, 0.5, 0.9, 0.99)
STRATEGY_FLAGS = {"free-flight": "free_flight", "level-set": "level_set",
                  "color-dep": "color_dependent"}


class CliError(RuntimeError):
    pass


def _load_full_config(path):
    cfg = load_config(path)
    for key in ("scene", "rig", "bounds"):
        if key not in cfg:
            raise CliError(f"config is missing the '{key}' section")
    return cfg


def _train_config(cfg: dict, args) -> TrainConfig:
    tc = train_config_from_dict(cfg.get("train", {}))
    if getattr(args, "seed", None) is not None:
        tc.seed = args.seed
    if getattr(args, "strategy", None):
        tc.strategy = BackgroundStrategy(kind=STRATEGY_FLAGS[args.strategy])
    if getattr(args, "relax", False):
        tc.relax.enabled = True
    return tc


def _require(path, what):
    if not Path(path).exists():
        raise CliError(f"{what} not found: {path}")
    return path


def cmd_gen_data(args):
    cfg = _load_full_config(_require(args.config, "config"))
    scene = scene_from_config(cfg["scene"])
    rig = rig_from_config(cfg["rig"])
    bounds = bounds_from_config(cfg["bounds"])
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    ds = generate_dataset(scene, rig, seed=seed, threads=args.threads)
    save_dataset(ds, args.out, bounds=bounds, extra_meta={"seed": seed})
    print(f"wrote {len(ds.cameras)} views "
          f"({len(ds.train_idx)} train / {len(ds.heldout_idx)} held out) "
          f"to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_full_config(_require(args.config, "config"))
    ds, bounds = load_dataset(_require(args.data, "dataset"))
    if bounds is None:
        bounds = bounds_from_config(cfg["bounds"])
    tc = _train_config(cfg, args)
    state = train(ds, tc, bounds, out_dir=args.out,
                  resume_from=args.resume, quiet=False)
    print(f"trained {state.iteration} iterations -> "
          f"{Path(args.out) / 'checkpoint_final.bin'}")
    return 0


def _march_step(ckpt: Checkpoint, cfg: dict) -> float:
    frac = float(cfg.get("train", {}).get("step_fraction", 1.0 / 256.0))
    return frac * ckpt.occ.bounds.diagonal


def cmd_render(args):
    ckpt = Checkpoint.load(_require(args.checkpoint, "checkpoint"))
    cfg = _load_full_config(args.config) if args.config else {}
    step = _march_step(ckpt, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .sensor import rig_cameras
    if cfg:
        cams = rig_cameras(rig_from_config(cfg["rig"]))
        cam = cams[args.view % len(cams)]
    else:
        raise CliError("render needs --config to define the camera rig")
    rows = []
    if args.mode in ("surface", "both"):
        img, st = render_surface(ckpt.occ, ckpt.rad, cam, ckpt.env, step,
                                 threshold=args.level, threads=args.threads)
        save_image(out / "surface.png", img)
        rows.append({"metric": "surface_mean_evals_per_ray",
                     "value": st.mean_evals_per_ray})
    if args.mode in ("volume", "both"):
        img, st = render_volume(ckpt.occ, ckpt.rad, cam, ckpt.env, step,
                                threads=args.threads)
        save_image(out / "volume.png", img)
        rows.append({"metric": "volume_mean_evals_per_ray",
                     "value": st.mean_evals_per_ray})
    rpt.write_csv(out / "render.csv", rows, ["metric", "value"])
    print(f"rendered view {args.view} -> {out}")
    return 0


def cmd_extract(args):
    ckpt = Checkpoint.load(_require(args.checkpoint, "checkpoint"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh = extract_mesh(ckpt.occ, level=args.level)
    save_mesh_obj(out / "mesh.obj", mesh)
    save_mesh_ply(out / "mesh.ply", mesh)
    print(f"extracted {len(mesh.vertices)} vertices / "
          f"{len(mesh.triangles)} triangles at level {args.level} -> {out}")
    return 0


def cmd_eval(args):
    cfg = _load_full_config(_require(args.config, "config"))
    ds, _ = load_dataset(_require(args.data, "dataset"))
    ckpt = Checkpoint.load(_require(args.checkpoint, "checkpoint"))
    step = _march_step(ckpt, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []

    idx = ds.heldout_idx if len(ds.heldout_idx) else ds.train_idx[:1]
    ps_s, ps_v, ev_s, ev_v = [], [], [], []
    for ci in idx:
        cam = ds.cameras[ci]
        img_s, st_s = render_surface(ckpt.occ, ckpt.rad, cam, ckpt.env, step,
                                     threshold=args.level,
                                     threads=args.threads)
        img_v, st_v = render_volume(ckpt.occ, ckpt.rad, cam, ckpt.env, step,
                                    threads=args.threads)
        ps_s.append(psnr(img_s, ds.images[ci]))
        ps_v.append(psnr(img_v, ds.images[ci]))
        ev_s.append(st_s.mean_evals_per_ray)
        ev_v.append(st_v.mean_evals_per_ray)
    rows.append({"metric": "psnr_surface_heldout", "value": np.mean(ps_s)})
    rows.append({"metric": "psnr_volume_heldout", "value": np.mean(ps_v)})
    rows.append({"metric": "mean_evals_per_ray_surface", "value": np.mean(ev_s)})
    rows.append({"metric": "mean_evals_per_ray_volume", "value": np.mean(ev_v)})

    cam = ds.cameras[idx[0]]
    mat = level_set_stability(ckpt.occ, ckpt.rad, cam, ckpt.env, step,
                              STABILITY_LEVELS)
    off = mat[~np.eye(len(STABILITY_LEVELS), dtype=bool)]
    rows.append({"metric": "min_pairwise_level_psnr", "value": off.min()})
    rpt.write_level_stability(out, STABILITY_LEVELS, mat)

    scene = scene_from_config(cfg["scene"])
    mesh = extract_mesh(ckpt.occ, level=args.level)
    if not mesh.is_empty and scene.primitives:
        ref = reference_mesh_from_scene(scene, ckpt.occ.bounds)
        if not ref.is_empty:
            cd = chamfer(mesh, ref, n_points=args.chamfer_points, seed=0)
            rows.append({"metric": "chamfer_to_reference", "value": cd})
            rows.append({"metric": "chamfer_in_cell_widths",
                         "value": cd / float(np.max(ckpt.occ.cell_size))})

    rpt.write_eval_report(out, rows)
    for r in rows:
        print(f"{r['metric']}: {r['value']:.4f}")
    return 0


def cmd_verify(args):
    from .verify import run_verification
    rows, ok = run_verification(progress=print)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        rpt.write_verify_report(args.out, rows)
    print("verification " + ("PASSED" if ok else "FAILED"))
    return 0 if ok else 1


def cmd_compare(args):
    cfg = _load_full_config(_require(args.config, "config"))
    ds, bounds = load_dataset(_require(args.data, "dataset"))
    if bounds is None:
        bounds = bounds_from_config(cfg["bounds"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = _train_config(cfg, args)
    metric = ColorMetric(base.metric)

    variants = {
        "ours": base,
        "nerf": _with(base, loss_kind="nerf"),
        "relaxed": _with(base, relax_enabled=True),
    }
    results = {}
    idx = ds.heldout_idx if len(ds.heldout_idx) else ds.train_idx[:1]
    for name, tc in variants.items():
        run_dir = out / name
        state = train(ds, tc, bounds, out_dir=run_dir)
        step = tc.step_fraction * bounds.diagonal
        mode_volume = name != "ours"
        ps, im_loss, ev_s, ev_v = [], [], [], []
        for ci in idx:
            cam = ds.cameras[ci]
            img_s, st_s = render_surface(state.occ, state.rad, cam, state.env,
                                         step, threads=args.threads)
            img_v, st_v = render_volume(state.occ, state.rad, cam, state.env,
                                        step, threads=args.threads)
            img = img_v if mode_volume else img_s
            ps.append(psnr(img, ds.images[ci]))
            im_loss.append(float(np.mean(metric.value(img, ds.images[ci]))))
            ev_s.append(st_s.mean_evals_per_ray)
            ev_v.append(st_v.mean_evals_per_ray)
        mat = level_set_stability(state.occ, state.rad, ds.cameras[idx[0]],
                                  state.env, step, STABILITY_LEVELS)
        off = mat[~np.eye(len(STABILITY_LEVELS), dtype=bool)]
        results[name] = {
            "psnr_heldout": float(np.mean(ps)),
            "image_loss_heldout": float(np.mean(im_loss)),
            "min_pairwise_level_psnr": float(off.min()),
            "mean_evals_per_ray_surface": float(np.mean(ev_s)),
            "mean_evals_per_ray_volume": float(np.mean(ev_v)),
            "flagged_cell_fraction": state.relax_state.flagged_fraction(),
        }
        print(f"[{name}] psnr {results[name]['psnr_heldout']:.2f} dB, "
              f"level stability {results[name]['min_pairwise_level_psnr']:.1f} dB")
    rpt.write_compare_report(out, results)
    print(f"comparison written to {out}")
    return 0


def _with(tc: TrainConfig, loss_kind=None, relax_enabled=None):
    from dataclasses import replace
    from copy import deepcopy
    out = deepcopy(tc)
    if loss_kind is not None:
        out.loss_kind = loss_kind
    if relax_enabled is not None:
        out.relax.enabled = relax_enabled
    return out


def build_parser():
    p = argparse.ArgumentParser(
        prog="gridsurf",
        description="occupancy + radiance grid scene reconstruction")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out=True):
        if config:
            sp.add_argument("--config", help="scene/rig/train YAML")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("gen-data", help="render a synthetic dataset")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="optimize fields on a dataset")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--resume", default=None)
    sp.add_argument("--strategy", choices=sorted(STRATEGY_FLAGS))
    sp.add_argument("--relax", action="store_true")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("render", help="render a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--level", type=float, default=0.5)
    sp.add_argument("--mode", choices=("surface", "volume", "both"),
                    default="both")
    sp.add_argument("--view", type=int, default=0)
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("extract", help="marching-cubes mesh from a checkpoint")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--level", type=float, default=0.5)
    sp.set_defaults(fn=cmd_extract)

    sp = sub.add_parser("eval", help="PSNR / Chamfer / stability reports")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--level", type=float, default=0.5)
    sp.add_argument("--chamfer-points", type=int, default=100_000)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("verify", help="run the derivation oracle suite")
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("compare", help="train ours vs nerf vs relaxed")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--strategy", choices=sorted(STRATEGY_FLAGS))
    sp.add_argument("--relax", action="store_true")
    sp.set_defaults(fn=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
