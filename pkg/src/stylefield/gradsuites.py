"""End-to-end gradient-check suites (64-bit, deterministic sampling).

Each suite builds a miniature version of a full differentiable path and
runs the central-difference checker against it: rendered pixels vs density
nodes, rendered pixels vs style-pattern texels, the stylization loss vs the
prompt, and the cycle penalty vs sphere-mapping nodes.
"""

from __future__ import annotations

import numpy as np

from .diffcore import ops
from .diffcore.gradcheck import FDReport, finite_diff_check
from .diffcore.tensor import Tensor
from .renderer import RayBundle, render_rays
from .scene_model import SceneModel, SceneModelConfig
from .stylepattern import faces_from_cross
from .stylizer2d import FeatureBank, NoiseContent, StylizerNet, align_stats
from .training import cycle_loss, gas_loss

REL_TOL = 1e-4


def _tiny_scene(seed: int, res: int = 6) -> SceneModel:
    cfg = SceneModelConfig(
        density_extents=(res,) * 3,
        uv_extents=(res - 1,) * 3,
        bbox_min=(-1.0, -1.0, -1.0),
        bbox_max=(1.0, 1.0, 1.0),
        seed=seed,
    )
    scene = SceneModel(cfg, dtype=np.float64)
    rng = np.random.default_rng(seed)
    scene.params["density_raw"].data = rng.normal(1.0, 1.5, scene.params["density_raw"].shape)
    scene.params["uv_raw"].data = scene.params["uv_raw"].data + rng.normal(
        0.0, 0.15, scene.params["uv_raw"].shape
    )
    return scene


def _tiny_rays(seed: int, n_rays: int = 6) -> RayBundle:
    rng = np.random.default_rng(seed + 1)
    origins = np.tile(np.array([0.0, 0.0, -2.5]), (n_rays, 1))
    targets = rng.uniform(-0.45, 0.45, (n_rays, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return RayBundle(
        origins=origins, dirs=dirs, pixels=np.zeros((n_rays, 2)), near=1.0, far=4.0
    )


def _render_sum(scene, rays, cubemap=None, n_samples=6):
    pixel, _ = render_rays(
        scene,
        rays,
        n_samples=n_samples,
        stratified=False,
        color_source="cubemap" if cubemap is not None else "appearance",
        cubemap=cubemap,
        weight_cutoff=0.0,
    )
    return ops.sum_(pixel)


def gradcheck_render_density(seed: int = 0) -> FDReport:
    """d (sum of rendered pixels) / d (density-grid raw values)."""
    scene = _tiny_scene(seed)
    rays = _tiny_rays(seed)

    def fn(pt: Tensor):
        old = scene.params.replace("density_raw", pt)
        try:
            return _render_sum(scene, rays)
        finally:
            scene.params.replace("density_raw", old)

    return finite_diff_check(fn, scene.params["density_raw"], eps=1e-5)


def gradcheck_render_texel(seed: int = 0, face_res: int = 4) -> FDReport:
    """d (sum of cubemap-shaded pixels) / d (pattern texels)."""
    scene = _tiny_scene(seed)
    rays = _tiny_rays(seed)
    rng = np.random.default_rng(seed + 2)
    faces = rng.uniform(0.0, 1.0, (6, face_res, face_res, 3))

    def fn(pt: Tensor):
        return _render_sum(scene, rays, cubemap=pt)

    return finite_diff_check(fn, Tensor(faces), eps=1e-5)


def gradcheck_cycle_uv(seed: int = 0) -> FDReport:
    """d cycle_loss / d (sphere-mapping raw values)."""
    scene = _tiny_scene(seed)
    rng = np.random.default_rng(seed + 3)
    pts = rng.uniform(-0.8, 0.8, (48, 3))
    weights = rng.uniform(0.0, 1.0, 48)

    def fn(pt: Tensor):
        old = scene.params.replace("uv_raw", pt)
        try:
            return cycle_loss(pts, weights, scene)
        finally:
            scene.params.replace("uv_raw", old)

    return finite_diff_check(fn, scene.params["uv_raw"], eps=1e-5)


def gradcheck_gas_prompt(seed: int = 0, face_res: int = 8, max_coords: int = 384) -> FDReport:
    """d gas_loss / d prompt through pattern generation and rendering."""
    scene = _tiny_scene(seed)
    net = StylizerNet(seed=seed + 10, dtype=np.float64)
    net.freeze()
    bank = FeatureBank(seed=0)
    rng = np.random.default_rng(seed + 4)
    z = NoiseContent(seed + 5, face_res)
    style = rng.uniform(0.0, 1.0, (32, 32, 3))
    style_stats = bank.stats(style)
    target_view = rng.uniform(0.0, 1.0, (3, 32, 32))

    zc = net.encode(Tensor(z.image[None]))
    zs = net.encode(Tensor(np.ascontiguousarray(style.transpose(2, 0, 1))[None]))
    aligned = align_stats(zc, zs).data.copy()

    n_rays = 32 * 32
    rng2 = np.random.default_rng(seed + 6)
    origins = np.tile(np.array([0.0, 0.0, -2.5]), (n_rays, 1))
    targets = rng2.uniform(-0.5, 0.5, (n_rays, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rays = RayBundle(origins=origins, dirs=dirs, pixels=np.zeros((n_rays, 2)), near=1.0, far=4.0)

    def fn(pt: Tensor):
        zin = ops.add(Tensor(aligned), ops.reshape(pt, (1,) + tuple(pt.shape)))
        pattern = faces_from_cross(
            ops.reshape(net.decode(zin), (3, 3 * face_res, 4 * face_res)), face_res
        )
        pixel, _ = render_rays(
            scene, rays, n_samples=5, stratified=False,
            color_source="cubemap", cubemap=pattern, weight_cutoff=0.0,
        )
        i_r = ops.transpose(ops.reshape(pixel, (32, 32, 3)), (2, 0, 1))
        total, _, _ = gas_loss(
            i_r, target_view, bank=bank, lambda_style=0.1, style_stats=style_stats
        )
        return total

    prompt0 = np.zeros((64, 3 * face_res // 4, face_res))
    return finite_diff_check(fn, Tensor(prompt0), eps=1e-5, max_coords=max_coords, seed=seed)


SUITES = {
    "render": [
        ("rendered pixel vs density node", gradcheck_render_density),
        ("rendered pixel vs pattern texel", gradcheck_render_texel),
    ],
    "stylizer": [("gas loss vs prompt", gradcheck_gas_prompt)],
    "losses": [("cycle loss vs sphere-mapping node", gradcheck_cycle_uv)],
}


def run_suite(name: str, seed: int = 0, tol: float = REL_TOL) -> bool:
    if name not in SUITES:
        raise KeyError(f"unknown gradcheck suite {name!r}; pick from {sorted(SUITES)}")
    ok = True
    for label, fn in SUITES[name]:
        report = fn(seed)
        good = report.passed(tol)
        ok &= good
        print(
            f"[{'PASS' if good else 'FAIL'}] {label}: max rel err "
            f"{report.max_rel_err:.3e} over {report.n_checked} coords "
            f"({len(report.excluded)} kinks excluded)"
        )
    return ok
