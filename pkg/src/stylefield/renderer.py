"""Pinhole cameras, ray sampling, and differentiable volume rendering.

Pixel coordinates are continuous with texel centers at (i + 0.5, j + 0.5);
a ray through coordinate (cx, cy) is the optical axis.  Compositing follows
the emission-absorption model: per-sample weight w_i = T_i (1 - exp(-sigma_i
delta_i)), residual transmittance goes to an explicit background color.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ops
from .diffcore.tensor import DiffcoreError, Tensor, no_grad
from .scene_model import SceneModel


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_to_world: np.ndarray  # 4x4 rigid transform
    near: float
    far: float

    def __post_init__(self):
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise DiffcoreError("Camera: focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise DiffcoreError(f"Camera: need 0 < near < far, got {self.near}, {self.far}")
        R = self.cam_to_world[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-5:
            raise DiffcoreError("Camera: rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    def pixel_grid(self) -> np.ndarray:
        """All pixel-center coordinates, row-major, shape (H*W, 2)."""
        xs = np.arange(self.width) + 0.5
        ys = np.arange(self.height) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=-1)


@dataclass
class RayBundle:
    origins: np.ndarray  # (R,3)
    dirs: np.ndarray  # (R,3) unit
    pixels: np.ndarray  # (R,2) image-plane coordinates
    near: float = 0.1
    far: float = 10.0
    colors: np.ndarray | None = None  # optional ground truth (R,3)

    def __len__(self):
        return self.origins.shape[0]


def generate_rays(cam: Camera, pixels: np.ndarray) -> RayBundle:
    """World-space rays through the given image-plane coordinates.

    Callers keep coordinates inside the frame when the rays stand for
    pixels; arbitrary plane coordinates are accepted (total function).
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    d_cam = np.stack(
        [
            (pixels[:, 0] - cam.cx) / cam.fx,
            (pixels[:, 1] - cam.cy) / cam.fy,
            np.ones(pixels.shape[0]),
        ],
        axis=-1,
    )
    d_world = d_cam @ cam.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.origin, d_world.shape).copy()
    return RayBundle(
        origins=origins, dirs=d_world, pixels=pixels, near=cam.near, far=cam.far
    )


def sample_depths(near, far, n, n_rays=1, stratified=False, rng=None):
    """Depths and spacings for n samples per ray over [near, far].

    Bin edges are uniform; deterministic mode takes bin centers, stratified
    mode jitters within each bin.  The final spacing closes against the far
    bound: delta_n = far - t_n.
    """
    if n < 1:
        raise DiffcoreError("sample_depths: need n >= 1")
    edges = near + (far - near) * np.arange(n + 1) / n
    width = (far - near) / n
    if stratified:
        if rng is None:
            rng = np.random.default_rng(0)
        u = rng.uniform(0.0, 1.0, size=(n_rays, n))
    else:
        u = np.full((n_rays, n), 0.5)
    t = edges[:-1][None, :] + u * width
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = far - t[:, -1]
    # the jitter keeps each t_i inside its bin, so spacings stay positive
    # except possibly the last one when t_n == far exactly
    np.maximum(delta, 1e-12, out=delta)
    return t, delta


@dataclass
class RaySamples:
    """Per-ray sample bookkeeping for one rendered batch."""

    t: np.ndarray  # (R,N)
    delta: np.ndarray  # (R,N)
    sigma: np.ndarray  # (R,N)
    color: np.ndarray  # (R,N,3)
    w: np.ndarray  # (R,N)
    trans: np.ndarray  # (R,N)

    def check_invariants(self, near, far, tol=1e-6):
        assert np.all(self.t[:, 0] >= near - tol) and np.all(self.t[:, -1] <= far + tol)
        assert np.all(np.diff(self.t, axis=1) > 0)
        assert np.all(self.delta > 0)
        assert np.all(self.w >= -tol)
        assert np.all(self.w.sum(axis=1) <= 1.0 + tol)
        assert np.all(np.diff(self.trans, axis=1) <= tol)


def composite(sigma, color, delta, background):
    """Differentiable compositing; see ops.composite for the contract."""
    return ops.composite(sigma, color, delta, background)


def expected_depth(w: np.ndarray, t: np.ndarray, eps: float = 1e-6):
    """Weight-averaged depth per ray plus a validity flag (enough opacity)."""
    wsum = w.sum(axis=-1)
    depth = (w * t).sum(axis=-1) / np.maximum(wsum, eps)
    return depth, wsum > eps


DEFAULT_BACKGROUND = np.array([1.0, 1.0, 1.0])
DEFAULT_N_SAMPLES = 128
FILL_COLOR = 0.5  # color stand-in for samples below the weight cutoff


def render_rays(
    scene: SceneModel,
    rays: RayBundle,
    *,
    n_samples=None,
    stratified=False,
    rng=None,
    color_source="appearance",
    cubemap=None,
    weight_cutoff=0.0,
    background=None,
    return_aux=False,
):
    """Render a ray batch; returns (pixel colors Tensor (R,3), RaySamples).

    ``color_source`` selects the reconstructed appearance ("appearance") or
    a style-pattern cubemap ("cubemap", differentiable w.r.t. its texels).
    ``weight_cutoff`` skips the color model for samples whose contribution
    is below the cutoff (their color falls back to a constant); 0 disables
    the shortcut and makes the result exact.  With ``return_aux`` a third
    element carries per-sample arrays for the training losses: flat sample
    points, the active sample indices, and their sphere points.
    """
    from . import stylepattern  # local import to avoid a cycle

    n = n_samples or DEFAULT_N_SAMPLES
    bg = np.asarray(
        background if background is not None else DEFAULT_BACKGROUND, dtype=np.float64
    )
    R = len(rays)
    t, delta = sample_depths(
        rays.near, rays.far, n, n_rays=R, stratified=stratified, rng=rng
    )
    pts = rays.origins[:, None, :] + rays.dirs[:, None, :] * t[:, :, None]
    flat_pts = pts.reshape(-1, 3)

    sigma = scene.query_density(flat_pts)
    sigma2d = ops.reshape(sigma, (R, n))

    # decide which samples get a real color evaluation
    from . import kernels

    dt = sigma.data.dtype
    _, w_probe, _, _ = kernels.composite_forward(
        sigma.data.reshape(R, n), delta.astype(dt), np.zeros((R, n, 3), dtype=dt),
        np.zeros(3, dtype=dt),
    )
    flat_w = w_probe.reshape(-1)
    if weight_cutoff > 0:
        active = np.nonzero(flat_w > weight_cutoff)[0]
    else:
        active = np.arange(flat_pts.shape[0])

    sample_dirs = np.broadcast_to(rays.dirs[:, None, :], pts.shape).reshape(-1, 3)
    degenerate = np.zeros(flat_pts.shape[0], dtype=bool)
    s = None
    if active.size:
        act_pts = np.clip(flat_pts[active], scene.bbox_min, scene.bbox_max)
        s, valid = scene.query_uv_batch(act_pts)
        if not valid.all():
            degenerate[active[~valid]] = True
            keep = np.nonzero(valid)[0]
            s = _take_rows(s, keep)
            active = active[valid]
        if color_source == "appearance":
            colors = scene.appearance_color(s, sample_dirs[active])
        elif color_source == "cubemap":
            if cubemap is None:
                raise DiffcoreError("render_rays: cubemap source selected but none given")
            colors = stylepattern.sample_cubemap(cubemap, s.data)
        else:
            raise DiffcoreError(f"render_rays: unknown color source {color_source!r}")
        c_full = ops.put_rows(flat_pts.shape[0], active, colors, fill=FILL_COLOR)
    else:
        c_full = Tensor(np.full((flat_pts.shape[0], 3), FILL_COLOR, dtype=sigma.data.dtype))

    # degenerate sphere-mapping samples contribute zero weight
    if degenerate.any():
        sigma2d = ops.mul(sigma2d, (~degenerate).reshape(R, n).astype(sigma.data.dtype))

    c3d = ops.reshape(c_full, (R, n, 3))
    pixel, w, trans, _ = composite(sigma2d, c3d, delta, bg)
    samples = RaySamples(
        t=t, delta=delta, sigma=sigma2d.data, color=c3d.data, w=w, trans=trans
    )
    if return_aux:
        aux = {"points": flat_pts, "active": active, "sphere": s, "dirs": sample_dirs}
        return pixel, samples, aux
    return pixel, samples


def _take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    c = x.shape[1]
    flat = (rows[:, None] * c + np.arange(c)[None, :]).reshape(-1)
    return ops.take_flat(x, flat, (rows.size, c))


def render_image(
    scene: SceneModel,
    cam: Camera,
    *,
    color_source="appearance",
    cubemap=None,
    n_samples=None,
    stratified=False,
    seed=0,
    chunk=16384,
    weight_cutoff=0.0,
    background=None,
):
    """Full-frame render (no gradients). Returns image, weight sums, depth."""
    H, W = cam.height, cam.width
    pixels = cam.pixel_grid()
    img = np.zeros((H * W, 3), dtype=np.float64)
    wsum = np.zeros(H * W, dtype=np.float64)
    depth = np.zeros(H * W, dtype=np.float64)
    valid = np.zeros(H * W, dtype=bool)
    rng = np.random.default_rng(seed)
    with no_grad():
        for start in range(0, H * W, chunk):
            sl = slice(start, min(start + chunk, H * W))
            rays = generate_rays(cam, pixels[sl])
            pix, samples = render_rays(
                scene,
                rays,
                n_samples=n_samples,
                stratified=stratified,
                rng=rng,
                color_source=color_source,
                cubemap=cubemap,
                weight_cutoff=weight_cutoff,
                background=background,
            )
            img[sl] = pix.data
            wsum[sl] = samples.w.sum(axis=1)
            d, v = expected_depth(samples.w, samples.t)
            depth[sl] = d
            valid[sl] = v
    return {
        "image": img.reshape(H, W, 3),
        "weight_sum": wsum.reshape(H, W),
        "depth": depth.reshape(H, W),
        "depth_valid": valid.reshape(H, W),
    }
