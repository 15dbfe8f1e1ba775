"""Command-line surface tying the pipeline together.

Every command exits nonzero on any invariant violation.  Seeds default to
fixed constants so bare invocations are reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

DEFAULT_SEED = 1234


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="stylefield",
        description="Fit, restyle, render, and evaluate synthetic 3D scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-scene", help="generate a synthetic scene dataset")
    p.add_argument("--spec", required=True, choices=["sphere", "box", "blend", "room"])
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--views", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=128)

    p = sub.add_parser("synth-styles", help="generate procedural style images")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=128)

    p = sub.add_parser("pretrain-stylizer", help="train and freeze the 2D stylizer")
    p.add_argument("--textures", required=True)
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="Stage I: fit one scene (disentanglement)")
    p.add_argument("--scene", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("stylize", help="Stage II: train the visual prompt")
    p.add_argument("--ckpts", required=True, help="comma-separated checkpoint dirs")
    p.add_argument("--styles", required=True)
    p.add_argument("--stylizer", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("render", help="render a camera path")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--style", default=None)
    p.add_argument("--stylizer", default=None)
    p.add_argument("--prompt", default=None)
    p.add_argument("--camera-path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=96)
    p.add_argument("--face-res", type=int, default=48)

    p = sub.add_parser("eval", help="multi-view consistency report")
    p.add_argument("--renders", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--pairs-seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bake-cubemap", help="bake reconstructed appearance to a cubemap")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--face-res", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--suite", required=True, choices=["render", "stylizer", "losses"])
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)

    p = sub.add_parser("benchmark", help="time numba vs numpy kernel backends")
    p.add_argument("--sizes", default="default")

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except Exception as exc:  # noqa: BLE001  (CLI boundary: report and exit nonzero)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "synth-scene":
        from .sceneio import synth_scene

        m = synth_scene(args.spec, args.seed, args.views, args.out,
                        width=args.size, height=args.size)
        print(f"wrote {len(m.frames)} frames to {args.out}")
        return 0

    if cmd == "synth-styles":
        from .sceneio import save_png, synth_styles
        from .diffcore.tensorfile import save_f32t

        styles = synth_styles(args.count, args.seed, size=args.size)
        os.makedirs(args.out, exist_ok=True)
        for i, img in enumerate(styles):
            save_f32t(os.path.join(args.out, f"style_{i:03d}.f32t"), img)
            save_png(os.path.join(args.out, f"style_{i:03d}.png"), img)
        print(f"wrote {len(styles)} styles to {args.out}")
        return 0

    if cmd == "pretrain-stylizer":
        from .stylizer2d import pretrain_stylizer

        textures = _load_style_dir(args.textures)
        net = pretrain_stylizer(textures, args.iters, args.seed, log_every=max(1, args.iters // 10))
        net.save(args.out)
        print(f"stylizer frozen and saved to {args.out}")
        return 0

    if cmd == "fit":
        from .sceneio import load_manifest
        from .training import SceneDataset, StageIConfig, fit_scene, psnr_on_views

        man = load_manifest(os.path.join(args.scene, "manifest.json"))
        ds = SceneDataset(man)
        cfg = StageIConfig.from_json(args.config)
        scene, _ = fit_scene(ds, cfg, out_dir=args.out)
        with open(os.path.join(args.out, "scene_dir.json"), "w") as f:
            json.dump({"scene_dir": os.path.abspath(args.scene)}, f)
        if scene.aborted:
            print("fit aborted on divergence; checkpoint holds last finite state")
            return 1
        test = man.split_indices("test") or man.split_indices("train")[:2]
        score = psnr_on_views(ds, scene, test, n_samples=cfg.n_samples)
        print(f"fit done; held-out PSNR {score:.2f} dB; checkpoint at {args.out}")
        with open(os.path.join(args.out, "psnr.json"), "w") as f:
            json.dump({"psnr_db": score, "views": test}, f)
        return 0

    if cmd == "stylize":
        from .scene_model import SceneModel
        from .sceneio import load_manifest
        from .stylizer2d import StylizerNet
        from .training import (
            SceneBundle, SceneDataset, StageIIConfig, precompute_ics, train_prompt,
        )

        cfg = StageIIConfig.from_json(args.config)
        net = StylizerNet.load(args.stylizer)
        styles = _load_style_dir(args.styles)
        bundles = []
        for ck in args.ckpts.split(","):
            scene = SceneModel.load(ck)
            man = load_manifest(os.path.join(_scene_dir_of(ck), "manifest.json"))
            ds = SceneDataset(man)
            ics = {
                yi: precompute_ics(net, ds, st, cache_dir=os.path.join(ck, f"ics_{yi:02d}"))
                for yi, st in enumerate(styles)
            }
            bundles.append(SceneBundle(scene=scene, dataset=ds, ics=ics))
        regime = "scene-related" if len(bundles) == 1 else "scene-agnostic"
        print(f"{regime} prompt training on {len(bundles)} scene(s), {len(styles)} style(s)")
        train_prompt(cfg, net, bundles, styles, out_path=args.out)
        print(f"prompt saved to {args.out}")
        return 0

    if cmd == "render":
        return _cmd_render(args)

    if cmd == "eval":
        return _cmd_eval(args)

    if cmd == "bake-cubemap":
        from .scene_model import SceneModel
        from .sceneio import save_png
        from .stylepattern import bake_appearance_cubemap

        scene = SceneModel.load(args.ckpt)
        cm = bake_appearance_cubemap(scene, args.face_res)
        cm.save(args.out)
        save_png(os.path.splitext(args.out)[0] + ".png", cm.to_cross())
        print(f"baked {args.face_res}x{args.face_res} cubemap to {args.out}")
        return 0

    if cmd == "gradcheck":
        from .gradsuites import run_suite

        return 0 if run_suite(args.suite, seed=args.seed) else 1

    if cmd == "benchmark":
        from benchmarks.bench_kernels import run_benchmark  # type: ignore

        run_benchmark()
        return 0

    raise RuntimeError(f"unhandled command {cmd}")


def _scene_dir_of(ckpt_dir: str) -> str:
    meta = os.path.join(ckpt_dir, "scene_dir.json")
    if os.path.exists(meta):
        with open(meta) as f:
            return json.load(f)["scene_dir"]
    raise FileNotFoundError(
        f"{ckpt_dir}: missing scene_dir.json (write it or fit via the CLI)"
    )


def _load_style_dir(path: str) -> list:
    from .diffcore.tensorfile import load_f32t
    from .sceneio import load_png

    if os.path.isfile(path):
        return [_load_image_any(path)]
    names = sorted(os.listdir(path))
    out = []
    seen = set()
    for n in names:
        stem, ext = os.path.splitext(n)
        if stem in seen:
            continue
        if ext == ".f32t":
            out.append(load_f32t(os.path.join(path, n)))
            seen.add(stem)
        elif ext == ".png" and stem + ".f32t" not in names:
            out.append(load_png(os.path.join(path, n)))
            seen.add(stem)
    if not out:
        raise FileNotFoundError(f"no style images under {path}")
    return out


def _load_image_any(path: str):
    from .diffcore.tensorfile import load_f32t
    from .sceneio import load_png

    return load_f32t(path) if path.endswith(".f32t") else load_png(path)


def _load_camera_path(path: str):
    from .renderer import Camera

    with open(path) as f:
        doc = json.load(f)
    cams = []
    for fd in doc["frames"]:
        cams.append(
            Camera(
                fx=float(doc["fx"]), fy=float(doc["fy"]), cx=float(doc["cx"]),
                cy=float(doc["cy"]), width=int(doc["width"]), height=int(doc["height"]),
                near=float(doc["near"]), far=float(doc["far"]),
                cam_to_world=np.asarray(fd["cam_to_world"], dtype=np.float64),
            )
        )
    return cams


def _cmd_render(args) -> int:
    from .diffcore.tensorfile import load_f32t, save_f32t
    from .scene_model import SceneModel
    from .sceneio import save_png
    from .renderer import render_image

    scene = SceneModel.load(args.ckpt)
    cams = _load_camera_path(args.camera_path)
    os.makedirs(args.out, exist_ok=True)
    cubemap = None
    source = "appearance"
    if args.style:
        from .diffcore.tensor import no_grad
        from .stylizer2d import NoiseContent, StylizerNet, generate_style_pattern
        from .stylepattern import Cubemap

        if not args.stylizer:
            raise FileNotFoundError("render: --style requires --stylizer")
        net = StylizerNet.load(args.stylizer)
        style = _load_image_any(args.style)
        prompt = None
        face_res = args.face_res
        if args.prompt:
            prompt = load_f32t(args.prompt)
            if prompt.ndim == 4:
                prompt = prompt[0]
            face_res = prompt.shape[2]
        with no_grad():
            pattern = generate_style_pattern(
                net, style, NoiseContent(99, face_res), prompt=prompt
            )
        cubemap = Cubemap(np.clip(pattern.data, 0.0, 1.0).astype(np.float32))
        source = "cubemap"
    for i, cam in enumerate(cams):
        out = render_image(
            scene, cam, color_source=source, cubemap=cubemap,
            n_samples=args.samples, weight_cutoff=1e-4,
        )
        save_f32t(os.path.join(args.out, f"frame_{i:03d}.f32t"), out["image"])
        save_png(os.path.join(args.out, f"frame_{i:03d}.png"), out["image"])
    print(f"rendered {len(cams)} frames to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .diffcore.tensorfile import load_f32t
    from .evalmetrics import (
        ViewGeometry, consistency_score, exact_flow, pair_schedule, write_report,
    )
    from .sceneio import load_manifest

    man = load_manifest(os.path.join(args.scene, "manifest.json"))
    render_files = sorted(
        f for f in os.listdir(args.renders) if f.startswith("frame_") and f.endswith(".f32t")
    )
    n = min(len(render_files), len(man.frames))
    if n < 8:
        raise RuntimeError(f"eval: need at least 8 aligned frames, found {n}")
    imgs = [load_f32t(os.path.join(args.renders, render_files[i])) for i in range(n)]
    geo = [ViewGeometry(cam=man.camera(i), depth=man.load_depth(i)) for i in range(n)]
    voxel = (man.aabb[1][0] - man.aabb[0][0]) / 63.0
    rows = []
    from .evalmetrics import MetricError

    for pair in pair_schedule(n, args.pairs_seed):
        x, y = pair["x"], pair["y"]
        flow = exact_flow(geo[x], geo[y], occlusion_eps=2.0 * voxel)
        try:
            score = consistency_score(imgs[x], imgs[y], flow)
        except MetricError:
            # no co-visible pixels for this pair; recorded but not averaged
            score = {"e_feat": float("nan"), "e_rgb": float("nan"), "coverage": 0.0}
        rows.append({**pair, **score})
    defined = [r for r in rows if np.isfinite(r["e_feat"])]
    for tag in ("short", "long"):
        if not any(r["tag"] == tag for r in defined):
            raise RuntimeError(f"eval: every {tag}-range pair has an empty mask")
    write_report(args.out, [r for r in defined])
    short = np.mean([r["e_feat"] for r in defined if r["tag"] == "short"])
    long_ = np.mean([r["e_feat"] for r in defined if r["tag"] == "long"])
    print(f"consistency report at {args.out}: short {short:.6f}, long {long_:.6f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
