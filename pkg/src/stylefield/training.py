"""Two-stage optimization.

Stage I jointly fits geometry and the sphere-factored appearance of one
scene from posed images (reconstruction + weighted cycle penalty).  Stage II
freezes everything and tunes only the stylizer-bottleneck prompt under the
geometry-aware stylization loss: rendered restyled views must line up with
2D-stylized training photos while matching the style reference's feature
statistics.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .diffcore import ops
from .diffcore.adam import AdamState, adam_step
from .diffcore.tensor import DiffcoreError, ParamSet, Tensor, backward, no_grad
from .diffcore.tensorfile import load_f32t, save_f32t
from .renderer import RayBundle, generate_rays, render_rays
from .scene_model import SceneModel, SceneModelConfig
from .sceneio import SceneManifest
from .stylepattern import faces_from_cross
from .stylizer2d import FeatureBank, NoiseContent, StylizerNet, align_stats, make_prompt


class FreezeViolation(DiffcoreError):
    """A Stage II run modified something other than the prompt."""


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass
class StageIConfig:
    iterations: int = 2000
    ray_batch: int = 2048
    lambda_rec: float = 1.0
    lambda_cycle: float = 1.0
    lr_voxels: float = 0.1
    lr_mlp: float = 0.001
    seed: int = 0
    n_samples: int = 96
    grid_res: int = 96
    uv_grid_res: int = 64
    weight_cutoff: float = 1e-3
    cycle_weight_cutoff: float = 0.01
    stratified: bool = True

    @classmethod
    def from_json(cls, path: str) -> "StageIConfig":
        with open(path) as f:
            return cls(**json.load(f))

    def to_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=1)


@dataclass
class StageIIConfig:
    iterations: int = 5000
    lr_prompt: float = 0.1
    lambda_style: float = 0.1
    seed: int = 0
    pattern_face_res: int = 48
    noise_seed: int = 99
    n_samples: int = 96
    weight_cutoff: float = 3e-4
    stratified: bool = True
    share_prompt_across_styles: bool = True
    scenes: list = field(default_factory=list)  # checkpoint dirs (CLI use)
    styles: list = field(default_factory=list)  # style image paths (CLI use)

    @classmethod
    def from_json(cls, path: str) -> "StageIIConfig":
        with open(path) as f:
            return cls(**json.load(f))

    def to_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def rec_loss(pred: Tensor, observed: np.ndarray) -> Tensor:
    """Mean over the ray batch of the per-ray RGB Euclidean error."""
    diff = ops.sub(pred, np.asarray(observed, dtype=pred.data.dtype))
    return ops.mean(ops.norm_lastaxis(diff))


def cycle_loss(points: np.ndarray, weights: np.ndarray, scene: SceneModel,
               sphere_pts: Tensor | None = None) -> Tensor:
    """Weighted round-trip error sum_i w_i ||p_i - inverse(uv(p_i))||.

    Weights are contribution weights from compositing and enter as
    constants.  ``sphere_pts`` lets a caller reuse sphere points already
    computed for the same samples; degenerate samples must already be
    dropped from all three inputs.
    """
    pts = np.asarray(points, dtype=np.float64)
    if sphere_pts is None:
        clamped = np.clip(pts, scene.bbox_min, scene.bbox_max)
        s, valid = scene.query_uv_batch(clamped)
        if not valid.all():
            keep = np.nonzero(valid)[0]
            from .renderer import _take_rows

            s = _take_rows(s, keep)
            pts = pts[keep]
            weights = weights[keep]
    else:
        s = sphere_pts
    back = scene.inverse_map(s)
    disp = ops.sub(np.asarray(pts, dtype=back.data.dtype), back)
    norms = ops.norm_lastaxis(disp)
    return ops.sum_(ops.mul(norms, np.asarray(weights, dtype=back.data.dtype)))


def gas_loss(
    rendered,
    stylized_view,
    style_image=None,
    *,
    bank: FeatureBank | None = None,
    lambda_style: float = 0.1,
    style_stats=None,
):
    """Geometry-aware stylization loss.

    ``rendered`` and ``stylized_view`` are (3,H,W) (tensor or array); the
    first term is the mean per-pixel RGB distance between them.  The style
    term compares feature-bank channel statistics of the rendered image
    against the style reference (pass precomputed ``style_stats`` to skip
    re-extracting them).  Returns (total, alignment term, style term).
    """
    r = rendered if isinstance(rendered, Tensor) else Tensor(np.asarray(rendered, dtype=np.float64))
    v = stylized_view if isinstance(stylized_view, Tensor) else Tensor(np.asarray(stylized_view, dtype=np.float64))
    if tuple(r.shape) != tuple(v.shape):
        raise DiffcoreError(
            f"gas_loss: rendered {tuple(r.shape)} and stylized view {tuple(v.shape)} differ"
        )
    C, H, W = r.shape
    diff = ops.sub(v, r)
    per_pixel = ops.norm_lastaxis(
        ops.transpose(ops.reshape(diff, (C, H * W)), (1, 0))
    )
    term1 = ops.mean(per_pixel)

    bank = bank or FeatureBank(seed=0)
    if style_stats is None:
        if style_image is None:
            raise DiffcoreError("gas_loss: need style_image or style_stats")
        style_stats = bank.stats(style_image)
    feats = bank.extract_features(r)
    term2 = None
    for f, (mu_s, sd_s) in zip(feats, style_stats):
        mu_r, sd_r = ops.channel_stats(f)
        nch = mu_r.data.size
        dmu = ops.l2norm(ops.sub(ops.reshape(mu_r, (nch,)), mu_s.astype(f.data.dtype)))
        dsd = ops.l2norm(ops.sub(ops.reshape(sd_r, (nch,)), sd_s.astype(f.data.dtype)))
        t = ops.add(dmu, dsd)
        term2 = t if term2 is None else ops.add(term2, t)
    total = ops.add(term1, ops.mul(term2, lambda_style))
    return total, term1, term2


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


class SceneDataset:
    """Manifest plus loaded images and flattened per-split ray arrays."""

    def __init__(self, manifest: SceneManifest):
        self.manifest = manifest
        self.images = [manifest.load_image(i) for i in range(len(manifest.frames))]

    def view_rays(self, i: int) -> RayBundle:
        cam = self.manifest.camera(i)
        rays = generate_rays(cam, cam.pixel_grid())
        rays.colors = self.images[i].reshape(-1, 3)
        return rays

    def gather_split(self, split: str):
        idx = self.manifest.split_indices(split)
        if not idx:
            raise DiffcoreError(f"SceneDataset: no {split!r} frames")
        os_, ds_, cs_ = [], [], []
        for i in idx:
            r = self.view_rays(i)
            os_.append(r.origins)
            ds_.append(r.dirs)
            cs_.append(r.colors)
        return (
            np.concatenate(os_),
            np.concatenate(ds_),
            np.concatenate(cs_),
            idx,
        )


# ---------------------------------------------------------------------------
# Stage I
# ---------------------------------------------------------------------------


def fit_scene(
    dataset: SceneDataset,
    cfg: StageIConfig,
    out_dir: str | None = None,
    *,
    log_every: int = 200,
    quiet: bool = False,
) -> tuple[SceneModel, list]:
    """Joint disentanglement training; returns (model, loss history rows)."""
    man = dataset.manifest
    model_cfg = SceneModelConfig(
        density_extents=(cfg.grid_res,) * 3,
        uv_extents=(cfg.uv_grid_res,) * 3,
        bbox_min=tuple(man.aabb[0]),
        bbox_max=tuple(man.aabb[1]),
        seed=cfg.seed,
    )
    scene = SceneModel(model_cfg)
    origins, dirs, colors, _ = dataset.gather_split("train")
    rng = np.random.default_rng(cfg.seed)

    voxels = ParamSet()
    mlps = ParamSet()
    for name, t in scene.params.items():
        (voxels if name in ("density_raw", "uv_raw") else mlps).add(
            name, t, trainable=True
        )
    opt_vox = AdamState(lr=cfg.lr_voxels)
    opt_mlp = AdamState(lr=cfg.lr_mlp)

    history = []
    snapshot = {n: t.data.copy() for n, t in scene.params.items()}
    aborted = False
    for it in range(cfg.iterations):
        sel = rng.integers(0, origins.shape[0], cfg.ray_batch)
        rays = RayBundle(
            origins=origins[sel], dirs=dirs[sel], pixels=np.zeros((sel.size, 2)),
            near=man.near, far=man.far, colors=colors[sel],
        )
        pixel, samples, aux = render_rays(
            scene,
            rays,
            n_samples=cfg.n_samples,
            stratified=cfg.stratified,
            rng=rng,
            weight_cutoff=cfg.weight_cutoff,
            return_aux=True,
        )
        l_rec = rec_loss(pixel, rays.colors)
        # the cycle term is weight-gated, so restrict it to samples that
        # actually contribute; below the cutoff w * displacement is noise
        w_flat = samples.w.reshape(-1)[aux["active"]]
        strong = np.nonzero(w_flat > cfg.cycle_weight_cutoff)[0]
        if strong.size:
            from .renderer import _take_rows

            l_cyc = cycle_loss(
                aux["points"][aux["active"]][strong],
                w_flat[strong],
                scene,
                sphere_pts=_take_rows(aux["sphere"], strong),
            )
        else:
            l_cyc = Tensor(np.zeros(()))
        loss = ops.add(ops.mul(l_rec, cfg.lambda_rec), ops.mul(l_cyc, cfg.lambda_cycle))
        val = loss.item()
        if not np.isfinite(val):
            for n, t in scene.params.items():
                t.data = snapshot[n]
            aborted = True
            if not quiet:
                print(f"fit_scene: non-finite loss at iter {it}, restored snapshot")
            break
        grads = backward(loss, scene.params)
        adam_step(voxels, grads, opt_vox)
        adam_step(mlps, grads, opt_mlp)
        history.append((it, val, l_rec.item(), l_cyc.item()))
        if it % 50 == 0:
            snapshot = {n: t.data.copy() for n, t in scene.params.items()}
        if not quiet and log_every and it % log_every == 0:
            print(
                f"fit iter {it}: total {val:.4f} rec {l_rec.item():.4f} "
                f"cycle {l_cyc.item():.4f}"
            )
    if out_dir:
        scene.save(out_dir)
        _write_curve(
            os.path.join(out_dir, "loss_curve.csv"),
            ["iteration", "total", "rec", "cycle"],
            history,
        )
        with open(os.path.join(out_dir, "fit_config.json"), "w") as f:
            json.dump({**asdict(cfg), "aborted": aborted}, f, indent=1)
    scene.aborted = aborted
    return scene, history


def _write_curve(path, headers, rows):
    with open(path, "w") as f:
        f.write(",".join(headers) + "\n")
        for row in rows:
            f.write(",".join(f"{v}" for v in row) + "\n")


def psnr_on_views(
    dataset: SceneDataset, scene: SceneModel, views, *, n_samples=96, weight_cutoff=0.0
) -> float:
    from .evalmetrics import psnr
    from .renderer import render_image

    scores = []
    for i in views:
        out = render_image(
            scene,
            dataset.manifest.camera(i),
            n_samples=n_samples,
            weight_cutoff=weight_cutoff,
        )
        scores.append(psnr(out["image"], dataset.images[i]))
    finite = [s for s in scores if np.isfinite(s)]
    return float(np.mean(finite)) if finite else float("inf")


def surface_cycle_stats(
    dataset: SceneDataset,
    scene: SceneModel,
    *,
    views=None,
    n_samples=96,
    surface_w=0.1,
    max_rays=4096,
    seed=7,
):
    """Cycle displacement statistics over strongly contributing samples.

    Returns (weighted mean displacement, fraction of surface samples whose
    displacement is below one voxel edge, sphere points of those samples).
    """
    man = dataset.manifest
    rng = np.random.default_rng(seed)
    views = views if views is not None else man.split_indices("train")
    origins, dirs = [], []
    for i in views:
        r = dataset.view_rays(i)
        origins.append(r.origins)
        dirs.append(r.dirs)
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    sel = rng.choice(origins.shape[0], min(max_rays, origins.shape[0]), replace=False)
    rays = RayBundle(
        origins=origins[sel], dirs=dirs[sel], pixels=np.zeros((sel.size, 2)),
        near=man.near, far=man.far,
    )
    with no_grad():
        _, samples, aux = render_rays(
            scene, rays, n_samples=n_samples, weight_cutoff=1e-4, return_aux=True
        )
        w = samples.w.reshape(-1)
        surf_mask = np.zeros(w.size, dtype=bool)
        surf_mask[aux["active"]] = True
        surf_mask &= w > surface_w
        picked = np.nonzero(surf_mask[aux["active"]])[0]
        if picked.size == 0:
            return float("nan"), 0.0, np.zeros((0, 3))
        pts = aux["points"][aux["active"]][picked]
        s_all = aux["sphere"].data[picked]
        back = scene.inverse_map(s_all).data
    disp = np.linalg.norm(pts - back, axis=1)
    ws = w[aux["active"]][picked]
    voxel = scene.cfg.voxel_edge()
    frac = float((disp < voxel).mean())
    return float((ws * disp).sum() / ws.sum()), frac, s_all


# ---------------------------------------------------------------------------
# Stage II
# ---------------------------------------------------------------------------


@dataclass
class SceneBundle:
    """One fitted scene ready for restyling: model, data, stylized-view cache."""

    scene: SceneModel
    dataset: SceneDataset
    ics: dict  # style index -> list of (3,H,W) arrays, indexed by frame


def precompute_ics(
    net: StylizerNet, dataset: SceneDataset, style, cache_dir: str | None = None
) -> list[np.ndarray]:
    """Stylize every view photo once (no prompt); optionally cache to disk."""
    if not net.frozen:
        raise FreezeViolation("precompute_ics: stylizer must be frozen")
    out = []
    for i in range(len(dataset.manifest.frames)):
        path = None
        if cache_dir:
            os.makedirs(cache_dir, exist_ok=True)
            path = os.path.join(cache_dir, f"ics_{i:03d}.f32t")
            if os.path.exists(path):
                out.append(load_f32t(path))
                continue
        from .stylizer2d import stylize_image

        with no_grad():
            ics = stylize_image(net, dataset.images[i], style).data
        if path:
            save_f32t(path, ics)
        out.append(ics.astype(np.float64))
    return out


def _view_render_tensor(scene, dataset, view, pattern, cfg, rng):
    """Differentiable cubemap-sourced render of one full view, as (3,H,W)."""
    rays = dataset.view_rays(view)
    pixel, _, _ = render_rays(
        scene,
        rays,
        n_samples=cfg.n_samples,
        stratified=cfg.stratified,
        rng=rng,
        color_source="cubemap",
        cubemap=pattern,
        weight_cutoff=cfg.weight_cutoff,
        return_aux=True,
    )
    H, W = dataset.manifest.height, dataset.manifest.width
    return ops.transpose(ops.reshape(pixel, (H, W, 3)), (2, 0, 1))


def precompute_view_geometry(scene, dataset, view, cfg, seed=0):
    """Freeze one view's sample geometry for repeated restyled renders.

    With the scene frozen, only pattern texels change between Stage II
    iterations, so weights, sphere points, and texel addresses per sample
    are constants; rendering reduces to a texel gather plus a weighted
    per-ray sum and a constant residual (inactive fill + background).
    """
    from .renderer import DEFAULT_BACKGROUND, FILL_COLOR, sample_depths
    from .stylepattern import ab_to_texel, sphere_to_face

    man = dataset.manifest
    rays = dataset.view_rays(view)
    rng = np.random.default_rng(seed)
    t, delta = sample_depths(
        man.near, man.far, cfg.n_samples, n_rays=len(rays),
        stratified=cfg.stratified, rng=rng,
    )
    pts = (rays.origins[:, None, :] + rays.dirs[:, None, :] * t[:, :, None]).reshape(-1, 3)
    with no_grad():
        sig = scene.query_density(pts).data.reshape(len(rays), cfg.n_samples)
    from . import kernels

    dt = sig.dtype
    _, w, _, total_trans = kernels.composite_forward(
        sig, delta.astype(dt), np.zeros(sig.shape + (3,), dtype=dt), np.zeros(3, dtype=dt)
    )
    flat_w = w.reshape(-1)
    active = np.nonzero(flat_w > cfg.weight_cutoff)[0]
    with no_grad():
        s, valid = scene.query_uv_batch(
            np.clip(pts[active], scene.bbox_min, scene.bbox_max)
        )
    active = active[valid]
    sphere = s.data[valid]
    face, a, b = sphere_to_face(sphere)
    bg = np.asarray(DEFAULT_BACKGROUND)
    w_act = flat_w[active]
    seg = active // cfg.n_samples
    inactive_per_ray = w.sum(axis=1) - np.bincount(seg, weights=w_act, minlength=len(rays))
    residual = (
        total_trans[:, None] * bg[None, :]
        + inactive_per_ray[:, None] * FILL_COLOR
    )
    return {
        "face": face,
        "a": a,
        "b": b,
        "w": w_act,
        "seg": seg,
        "residual": residual,
        "n_rays": len(rays),
        "height": man.height,
        "width": man.width,
    }


def render_view_from_pattern(geo: dict, pattern) -> Tensor:
    """Differentiable (3,H,W) render from precomputed view geometry."""
    from .stylepattern import ab_to_texel

    F = pattern.shape[1]
    row, col = ab_to_texel(geo["a"], geo["b"], F)
    colors = ops.cubemap_sample_op(pattern, geo["face"], row, col)
    summed = ops.weighted_segment_sum_op(colors, geo["w"], geo["seg"], geo["n_rays"])
    pixel = ops.add(summed, geo["residual"].astype(colors.data.dtype))
    return ops.transpose(
        ops.reshape(pixel, (geo["height"], geo["width"], 3)), (2, 0, 1)
    )


def train_prompt(
    cfg: StageIIConfig,
    net: StylizerNet,
    bundles: list[SceneBundle],
    styles: list[np.ndarray],
    *,
    bank: FeatureBank | None = None,
    out_path: str | None = None,
    log_every: int = 500,
    quiet: bool = False,
):
    """Optimize the visual prompt only; everything else is verified frozen.

    Returns (prompt ParamSet, history rows).  One prompt is shared across
    styles when ``share_prompt_across_styles`` (default) or when a single
    style is given; otherwise one prompt per style is stacked in the output.
    """
    if not bundles:
        raise DiffcoreError("train_prompt: need at least one fitted scene")
    if not net.frozen:
        raise FreezeViolation("train_prompt: stylizer must be frozen before Stage II")
    bank = bank or FeatureBank(seed=0)
    for b in bundles:
        b.scene.params.freeze_all()

    before = {}
    for si, b in enumerate(bundles):
        before[f"scene{si}"] = b.scene.params.checksums()
    before["stylizer"] = net.params.checksums()

    F = cfg.pattern_face_res
    z = NoiseContent(cfg.noise_seed, F)
    n_prompts = 1 if (cfg.share_prompt_across_styles or len(styles) == 1) else len(styles)
    prompts = [make_prompt(F) for _ in range(n_prompts)]

    # the noise content and each style are fixed, so the aligned bottleneck
    # is a constant per style; only the decoder reruns each iteration
    with no_grad():
        zc = net.encode(Tensor(z.image[None].astype(np.float32)))
        aligned = []
        style_stats = []
        for st in styles:
            from .stylizer2d import _chw

            zs = net.encode(Tensor(_chw(st)[None].astype(np.float32)))
            aligned.append(align_stats(zc, zs).data.copy())
            style_stats.append(bank.stats(st))

    rng = np.random.default_rng(cfg.seed)
    combos = [
        (si, yi, v)
        for si in range(len(bundles))
        for yi in range(len(styles))
        for v in bundles[si].dataset.manifest.split_indices("train")
    ]
    # sample geometry per (scene, view) is frozen for the whole run; only
    # the pattern texels change between iterations
    geo_cache = {}
    for si, b in enumerate(bundles):
        for v in b.dataset.manifest.split_indices("train"):
            geo_cache[(si, v)] = precompute_view_geometry(
                b.scene, b.dataset, v, cfg, seed=cfg.seed * 1000003 + si * 1009 + v
            )
    order = []
    history = []
    opts = [AdamState(lr=cfg.lr_prompt) for _ in prompts]
    for it in range(cfg.iterations):
        if not order:
            order = list(rng.permutation(len(combos)))
        si, yi, view = combos[order.pop()]
        b = bundles[si]
        pi = 0 if n_prompts == 1 else yi
        prompt = prompts[pi]["prompt"]

        zin = ops.add(Tensor(aligned[yi]), ops.reshape(prompt, (1,) + tuple(prompt.shape)))
        pattern = faces_from_cross(ops.reshape(net.decode(zin), (3, 3 * F, 4 * F)), F)
        i_r = render_view_from_pattern(geo_cache[(si, view)], pattern)
        total, t1, t2 = gas_loss(
            i_r,
            b.ics[yi][view],
            bank=bank,
            lambda_style=cfg.lambda_style,
            style_stats=style_stats[yi],
        )
        val = total.item()
        if not np.isfinite(val):
            raise DiffcoreError(f"train_prompt: non-finite loss at iter {it}")
        grads = backward(total, prompts[pi])
        adam_step(prompts[pi], grads, opts[pi])
        history.append((it, val, t1.item(), t2.item()))
        if not quiet and log_every and it % log_every == 0:
            print(f"prompt iter {it}: gas {val:.4f} align {t1.item():.4f} style {t2.item():.4f}")

    after = {}
    for si, b in enumerate(bundles):
        after[f"scene{si}"] = b.scene.params.checksums()
    after["stylizer"] = net.params.checksums()
    for group in before:
        for name, h in before[group].items():
            if after[group][name] != h:
                raise FreezeViolation(
                    f"train_prompt: parameter {group}/{name} changed during Stage II"
                )

    if out_path:
        stacked = (
            prompts[0]["prompt"].data
            if n_prompts == 1
            else np.stack([p["prompt"].data for p in prompts])
        )
        save_f32t(out_path, stacked)
        _write_curve(
            os.path.splitext(out_path)[0] + "_curve.csv",
            ["iteration", "gas", "align", "style"],
            history,
        )
    return prompts if n_prompts > 1 else prompts[0], history


def eval_gas_on_views(
    cfg: StageIIConfig,
    net: StylizerNet,
    bundle: SceneBundle,
    style,
    style_index: int,
    views,
    prompt=None,
    *,
    bank: FeatureBank | None = None,
    seed: int = 1234,
):
    """Deterministic gas-loss evaluation per view; returns (mean, mean term1)."""
    bank = bank or FeatureBank(seed=0)
    F = cfg.pattern_face_res
    z = NoiseContent(cfg.noise_seed, F)
    from .stylizer2d import generate_style_pattern

    eval_cfg = StageIIConfig(**{**asdict(cfg), "stratified": False})
    with no_grad():
        pattern = generate_style_pattern(
            net, style, z, prompt=prompt if prompt is not None else None
        )
        stats = bank.stats(style)
        totals, t1s = [], []
        for v in views:
            geo = precompute_view_geometry(bundle.scene, bundle.dataset, v, eval_cfg, seed=seed)
            i_r = render_view_from_pattern(geo, pattern)
            total, t1, _ = gas_loss(
                i_r, bundle.ics[style_index][v], bank=bank,
                lambda_style=cfg.lambda_style, style_stats=stats,
            )
            totals.append(total.item())
            t1s.append(t1.item())
    return float(np.mean(totals)), float(np.mean(t1s))
