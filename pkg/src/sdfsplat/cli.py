"""Command-line interface.

Commands: synthesize | train | render | relight | evaluate | prune-report |
bake-env | ablate.  Exit codes: 0 success, 2 validation failure, 3
numerical abort during optimization.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dataio, metrics
from .linalg import InvalidInputError
from .pipeline import render_inference
from .rasterizer import render_gbuffer
from .sdf import solve_prune_threshold
from .shading import EnvironmentLight
from .training import NumericalAbortError, TrainConfig, TrainState, train_step

LOG_FIELDS = [
    "iteration",
    "phase",
    "loss_gs",
    "l_c",
    "l_nd",
    "l_sm",
    "l_mask",
    "l_dn",
    "l_sdf2gs",
    "loss_sdf",
    "l_gs2sdf",
    "l_eik",
    "l_hes",
    "l_tv",
    "l_sdf_mask",
    "n_primitives",
    "s_eps",
    "gamma",
]

BUILTIN_SCENES = {
    "glossy-sphere": [
        dataio.ToyPrimitive(
            kind="sphere", center=(0, 0, 0), radius=1.0,
            albedo=(0.75, 0.68, 0.6), roughness=0.2, metallic=0.8,
        )
    ],
    "matte-sphere": [
        dataio.ToyPrimitive(
            kind="sphere", center=(0, 0, 0), radius=1.0,
            albedo=(0.6, 0.3, 0.2), roughness=0.8, metallic=0.0,
        )
    ],
}


def _load_scene(spec):
    if spec in BUILTIN_SCENES:
        return BUILTIN_SCENES[spec]
    doc = json.loads(Path(spec).read_text())
    return [dataio.ToyPrimitive(**p) for p in doc["primitives"]]


def _load_config(args):
    cfg_dict = {}
    if getattr(args, "config", None):
        cfg_dict.update(json.loads(Path(args.config).read_text()))
    if getattr(args, "seed", None) is not None:
        cfg_dict["seed"] = args.seed
    if getattr(args, "iters_scale", None) is not None:
        cfg_dict["iters_scale"] = args.iters_scale
    for toggle in getattr(args, "ablate", None) or []:
        key = {"def": "deferred", "inc": "sdf_enabled", "pru": "sdf_pruning_enabled"}[toggle]
        cfg_dict[key] = False
    return TrainConfig.from_dict(cfg_dict)


def run_training(state: TrainState, log_path=None, checkpoint_path=None, progress_every=0):
    """Drive train_step to the end of the schedule; append the loss CSV."""
    writer = None
    log_file = None
    if log_path:
        log_file = open(log_path, "a", newline="")
        writer = csv.DictWriter(log_file, fieldnames=LOG_FIELDS, extrasaction="ignore")
        if log_file.tell() == 0:
            writer.writeheader()
    try:
        total = state.total_iterations()
        t0 = time.time()
        while state.phase() != "done":
            report = train_step(state)
            if writer:
                writer.writerow(report)
            if progress_every and (report["iteration"] % progress_every == 0):
                print(
                    f"[{report['iteration']}/{total}] {report['phase']}"
                    f" loss_gs={report.get('loss_gs', float('nan')):.4f}"
                    f" loss_sdf={report.get('loss_sdf', float('nan')):.4f}"
                    f" prims={report['n_primitives']}"
                    f" ({time.time() - t0:.0f}s)",
                    flush=True,
                )
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        dataio.save_checkpoint(checkpoint_path, state)
    return state


def cmd_synthesize(args):
    primitives = _load_scene(args.scene)
    out = Path(args.out)
    train_env = dataio.default_training_environment(args.env_res, args.seed)
    holdout_env = dataio.holdout_environment(args.env_res, args.seed)
    dataio.synthesize_toy_dataset(
        out / "train", primitives, n_views=args.views, resolution=args.resolution,
        samples=args.samples, seed=args.seed, env_faces=train_env,
    )
    dataio.synthesize_toy_dataset(
        out / "test", primitives, n_views=args.test_views, resolution=args.resolution,
        samples=args.samples, seed=args.seed + 1, env_faces=train_env, camera_offset=0.37,
    )
    dataio.synthesize_toy_dataset(
        out / "relit", primitives, n_views=args.test_views, resolution=args.resolution,
        samples=args.samples, seed=args.seed + 1, env_faces=holdout_env, camera_offset=0.37,
    )
    print(f"dataset written under {out} (train/test/relit)")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    dataset = dataio.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = TrainState(dataset.views, dataset.bounds, cfg)
    run_training(
        state,
        log_path=out / "losses.csv",
        checkpoint_path=out / "checkpoint.npz",
        progress_every=args.progress_every,
    )
    print(f"checkpoint: {out / 'checkpoint.npz'}")
    return 0


def _render_views(state, cameras, light, out_dir, dump_gbuffer=False, workers=1):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = state.scene.cloud.params()
    for i, cam in enumerate(cameras):
        color = render_inference(
            params, cam, light, background=state.cfg.background,
            deferred=state.cfg.deferred, workers=workers,
        )
        dataio.write_pfm(out_dir / f"view_{i:03d}.pfm", color)
        dataio.write_png(out_dir / f"view_{i:03d}.png", np.clip(color, 0, 1))
        if dump_gbuffer:
            gb, _ = render_gbuffer(params, cam)
            gdir = out_dir / f"gbuffer_{i:03d}"
            gdir.mkdir(exist_ok=True)
            for name, plane in gb.plane_values().items():
                dataio.write_pfm(gdir / f"{name}.pfm", plane.astype(np.float64))
    return out_dir


def cmd_render(args):
    state = dataio.load_checkpoint(args.checkpoint)
    dataset = dataio.load_dataset(args.data)
    state.rebuild_light()
    _render_views(
        state, [v.camera for v in dataset.views], state.light, args.out,
        dump_gbuffer=args.dump_gbuffer, workers=args.workers,
    )
    print(f"renders written to {args.out}")
    return 0


def cmd_relight(args):
    state = dataio.load_checkpoint(args.checkpoint)
    dataset = dataio.load_dataset(args.data)
    env_dir = Path(args.env)
    faces = dataio.read_env_faces(sorted(env_dir.glob("face*.pfm")))
    light = EnvironmentLight(faces)
    _render_views(
        state, [v.camera for v in dataset.views], light, args.out, workers=args.workers
    )
    print(f"relit renders written to {args.out}")
    return 0


def cmd_evaluate(args):
    dataset = dataio.load_dataset(args.gt)
    pred_dir = Path(args.pred)
    rows = []
    for i, view in enumerate(dataset.views):
        pred_path = pred_dir / f"view_{i:03d}.pfm"
        if not pred_path.exists():
            raise dataio.DataError(f"missing prediction {pred_path}")
        pred = dataio.read_pfm(pred_path)
        gt = view.image
        if args.mode == "relight":
            pred, _ = metrics.relight_normalize(pred, gt, view.mask)
        p = metrics.psnr(np.clip(pred, 0, 1), np.clip(gt, 0, 1))
        s = metrics.ssim(np.clip(pred, 0, 1), np.clip(gt, 0, 1))
        rows.append({"view": i, "psnr": p, "ssim": float(np.asarray(s))})
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_ssim = float(np.mean([r["ssim"] for r in rows]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["view", "psnr", "ssim"])
        w.writeheader()
        w.writerows(rows)
        w.writerow({"view": "mean", "psnr": mean_psnr, "ssim": mean_ssim})
    print(f"mean PSNR {mean_psnr:.2f} dB, mean SSIM {mean_ssim:.4f} -> {out}")
    return 0


def cmd_prune_report(args):
    state = dataio.load_checkpoint(args.checkpoint)
    s_vals, _ = state.field.query(state.scene.cloud.means.astype(np.float64))
    s_vals = np.asarray(s_vals)
    gamma = float(np.exp(ad.value_of(state.field.params["log_gamma"])[0]))
    s_eps = solve_prune_threshold(gamma, state.cfg.sdf_prune_density)
    hist, edges = np.histogram(s_vals, bins=20)
    print(f"primitives: {len(s_vals)}")
    print(f"gamma: {gamma:.4f}  s_eps: {s_eps if s_eps is not None else 'n/a (gamma too small)'}")
    print("sdf-at-center histogram:")
    for count, lo, hi in zip(hist, edges[:-1], edges[1:]):
        print(f"  [{lo:+.4f}, {hi:+.4f}): {count}")
    if s_eps is not None:
        print(f"outliers beyond s_eps: {(s_vals > s_eps).sum()}")
    return 0


def cmd_bake_env(args):
    faces = dataio.read_env_faces(sorted(Path(args.env).glob("face*.pfm")))
    light = EnvironmentLight(faces)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for li, (level, rough) in enumerate(zip(light.mips, light.mip_roughness)):
        for fi in range(6):
            dataio.write_pfm(out / f"spec_l{li}_r{rough:.2f}_face{fi}.pfm", level[fi])
    for fi in range(6):
        dataio.write_pfm(out / f"irradiance_face{fi}.pfm", light.irradiance[fi])
    np.save(out / "dfg.npy", light.dfg)
    print(f"prefiltered chain written to {out}")
    return 0


def cmd_ablate(args):
    """Train the four-row component matrix and tabulate relit PSNR."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    variants = [
        ("baseline", ["def", "inc", "pru"]),
        ("def", ["inc", "pru"]),
        ("def+inc", ["pru"]),
        ("full", []),
    ]
    seeds = [int(s) for s in args.seeds.split(",")]
    dataset = dataio.load_dataset(args.data)
    test = dataio.load_dataset(args.test_data) if args.test_data else None
    relit = dataio.load_dataset(args.relit_data) if args.relit_data else None
    rows = []
    for name, toggles in variants:
        for seed in seeds:
            ns = argparse.Namespace(
                config=args.config, seed=seed, iters_scale=args.iters_scale, ablate=toggles
            )
            cfg = _load_config(ns)
            state = TrainState(dataset.views, dataset.bounds, cfg)
            run_training(state)
            row = {"variant": name, "seed": seed}
            if relit is not None:
                light = EnvironmentLight(relit.env_faces)
                psnrs = []
                for view in relit.views:
                    pred = render_inference(
                        state.scene.cloud.params(), view.camera, light,
                        background=cfg.background, deferred=cfg.deferred,
                    )
                    pred_n, _ = metrics.relight_normalize(pred, view.image, view.mask)
                    psnrs.append(metrics.psnr(np.clip(pred_n, 0, 1), np.clip(view.image, 0, 1)))
                row["relit_psnr"] = float(np.mean(psnrs))
            if test is not None:
                state.rebuild_light()
                psnrs = []
                for view in test.views:
                    pred = render_inference(
                        state.scene.cloud.params(), view.camera, state.light,
                        background=cfg.background, deferred=cfg.deferred,
                    )
                    psnrs.append(metrics.psnr(np.clip(pred, 0, 1), np.clip(view.image, 0, 1)))
                row["nvs_psnr"] = float(np.mean(psnrs))
            rows.append(row)
            print(row, flush=True)
    with open(out / "ablation.csv", "w", newline="") as f:
        fieldnames = ["variant", "seed", "relit_psnr", "nvs_psnr"]
        w = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    print(f"ablation table: {out / 'ablation.csv'}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sdfsplat",
        description="SDF-regularized relightable Gaussian splatting at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="render a toy dataset with the MC oracle")
    p.add_argument("--out", required=True)
    p.add_argument("--scene", default="glossy-sphere")
    p.add_argument("--views", type=int, default=30)
    p.add_argument("--test-views", type=int, default=10)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--samples", type=int, default=2048)
    p.add_argument("--env-res", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train", help="run the three-phase optimization")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config overrides")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iters-scale", type=float, default=None)
    p.add_argument("--ablate", nargs="*", choices=["def", "inc", "pru"], default=None)
    p.add_argument("--progress-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render dataset cameras from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-gbuffer", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("relight", help="render under a novel environment map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--env", required=True, help="directory with face0..face5.pfm")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("evaluate", help="PSNR/SSIM of rendered views against a dataset")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True, help="dataset manifest")
    p.add_argument("--mode", choices=["nvs", "relight"], default="nvs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("prune-report", help="SDF-at-center histogram and threshold")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_prune_report)

    p = sub.add_parser("bake-env", help="prefilter an environment map")
    p.add_argument("--env", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bake_env)

    p = sub.add_parser("ablate", help="train the component-toggle matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", default=None)
    p.add_argument("--relit-data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--iters-scale", type=float, default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (dataio.DataError, InvalidInputError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalAbortError as e:
        print(f"numerical abort: {e}; diagnostics: {e.diagnostics}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
