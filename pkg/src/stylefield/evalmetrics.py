"""Multi-view consistency scoring with analytic flow, PSNR, style distance.

Flow is exact on synthetic scenes: the destination view's pixels are
unprojected at their known depth, reprojected into the source view, and
masked where the source's depth disagrees (occlusion) or the reprojection
leaves the frame.  ``warp`` then gathers the source image at the displaced
positions, aligning it with the destination so the two can be compared
under the shared mask.

The feature distance uses the in-package feature bank; absolute values are
comparable only within this artifact, never against externally published
consistency numbers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .diffcore.tensor import no_grad
from .kernels import bilinear_forward
from .renderer import Camera, generate_rays
from .stylizer2d import FeatureBank


class MetricError(Exception):
    pass


@dataclass
class ViewGeometry:
    """A camera with its per-pixel along-ray depth (0 marks invalid pixels)."""

    cam: Camera
    depth: np.ndarray


@dataclass
class FlowField:
    """Pixel displacements defined on the destination view's grid."""

    flow: np.ndarray  # (H,W,2) dx,dy
    mask: np.ndarray  # (H,W) bool


def exact_flow(src: ViewGeometry, dst: ViewGeometry, occlusion_eps: float) -> FlowField:
    """Flow that carries the source image onto the destination's grid.

    For each destination pixel: unproject at the destination depth,
    reproject into the source camera, and validate against the source depth
    map (bilinear, all four neighbors must be valid) within
    ``occlusion_eps`` world units.
    """
    H, W = dst.cam.height, dst.cam.width
    pixels = dst.cam.pixel_grid()
    rays = generate_rays(dst.cam, pixels)
    d = dst.depth.reshape(-1)
    valid = d > 0
    pts = rays.origins + rays.dirs * d[:, None]

    rel = (pts - src.cam.origin) @ src.cam.rotation
    z = rel[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = src.cam.fx * rel[:, 0] / z + src.cam.cx
        py = src.cam.fy * rel[:, 1] / z + src.cam.cy
    in_front = z > 1e-9
    edge = 0.5 - 1e-6  # half-pixel border, with roundoff slack
    in_bounds = (
        (px >= edge) & (px <= src.cam.width - edge) & (py >= edge) & (py <= src.cam.height - edge)
    )
    ok = valid & in_front & in_bounds
    px = np.where(ok, px, 0.0)
    py = np.where(ok, py, 0.0)

    # occlusion: the source depth at the reprojection must match the
    # point's actual distance from the source camera
    src_d = src.depth
    ys = py - 0.5
    xs = px - 0.5
    sampled = bilinear_forward(
        np.ascontiguousarray(src_d[:, :, None], dtype=np.float64), ys, xs
    )[:, 0]
    y0 = np.clip(ys.astype(np.int64), 0, src.cam.height - 2)
    x0 = np.clip(xs.astype(np.int64), 0, src.cam.width - 2)
    neigh_valid = (
        (src_d[y0, x0] > 0)
        & (src_d[y0, x0 + 1] > 0)
        & (src_d[y0 + 1, x0] > 0)
        & (src_d[y0 + 1, x0 + 1] > 0)
    )
    dist_to_src = np.linalg.norm(pts - src.cam.origin, axis=1)
    ok &= neigh_valid & (np.abs(dist_to_src - sampled) <= occlusion_eps)

    flow = np.zeros((H * W, 2))
    flow[:, 0] = px - pixels[:, 0]
    flow[:, 1] = py - pixels[:, 1]
    flow[~ok] = 0.0
    return FlowField(flow=flow.reshape(H, W, 2), mask=ok.reshape(H, W))


def warp(image: np.ndarray, flow: FlowField) -> np.ndarray:
    """Bilinear gather of ``image`` at the displaced positions; masked -> 0."""
    H, W = flow.mask.shape
    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] != (H, W):
        raise MetricError(f"warp: image {img.shape} does not match flow ({H}, {W})")
    pix = np.stack(np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5), axis=-1)
    pos = pix + flow.flow
    ys = (pos[..., 1] - 0.5).reshape(-1)
    xs = (pos[..., 0] - 0.5).reshape(-1)
    out = bilinear_forward(np.ascontiguousarray(img), ys, xs).reshape(img.shape)
    out[~flow.mask] = 0.0
    return out


def consistency_score(img_x, img_y, flow: FlowField, bank: FeatureBank | None = None) -> dict:
    """Masked feature + RGB distance between warp(img_x) and img_y.

    Both sides are masked before feature extraction, so content outside the
    mask cannot influence the score.
    """
    if not flow.mask.any():
        raise MetricError("consistency_score: empty mask, score undefined")
    bank = bank or FeatureBank(seed=0)
    warped = warp(img_x, flow)
    m = flow.mask[..., None].astype(np.float64)
    a = warped * m
    b = np.asarray(img_y, dtype=np.float64) * m
    with no_grad():
        fa = bank.extract_features(a)
        fb = bank.extract_features(b)
        e_feat = float(
            np.mean([np.mean((qa.data - qb.data) ** 2) for qa, qb in zip(fa, fb)])
        )
    n_valid = float(flow.mask.sum())
    e_rgb = float(((a - b) ** 2).sum() / (3.0 * n_valid))
    return {
        "e_feat": e_feat,
        "e_rgb": e_rgb,
        "coverage": n_valid / flow.mask.size,
    }


def pair_schedule(frame_count: int, seed: int, n_pairs: int = 20, long_offset: int = 7):
    """Seeded (t, t+1) and (t, t+offset) frame pairs, ``n_pairs`` of each.

    Sampling is without replacement while enough distinct starts exist;
    otherwise duplicates are allowed and flagged in the result.
    """
    if frame_count < long_offset + 1:
        raise MetricError(
            f"pair_schedule: need at least {long_offset + 1} frames, got {frame_count}"
        )
    rng = np.random.default_rng(seed)
    out = []

    def pick(max_start, offset, tag):
        starts = np.arange(max_start)
        if starts.size >= n_pairs:
            chosen = rng.choice(starts, n_pairs, replace=False)
            dup = False
        else:
            chosen = rng.choice(starts, n_pairs, replace=True)
            dup = True
        for t in np.sort(chosen):
            out.append({"x": int(t), "y": int(t + offset), "tag": tag, "duplicates_allowed": dup})

    pick(frame_count - 1, 1, "short")
    pick(frame_count - long_offset, long_offset, "long")
    return out


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0,1]; +inf when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def style_distance(image, style, bank: FeatureBank | None = None) -> float:
    """Sum over bank stages of channel mean/std distances to the style."""
    bank = bank or FeatureBank(seed=0)
    sa = bank.stats(image)
    sb = bank.stats(style)
    total = 0.0
    for (mu_a, sd_a), (mu_b, sd_b) in zip(sa, sb):
        total += float(np.linalg.norm(mu_a - mu_b) + np.linalg.norm(sd_a - sd_b))
    return total


def write_report(path: str, rows: list[dict], note: str | None = None) -> None:
    """Pair-level consistency CSV plus short/long summary rows."""
    with open(path, "w", newline="") as f:
        f.write(
            "# feature-bank consistency metric; values are comparable only "
            "within this artifact\n"
        )
        if note:
            f.write(f"# {note}\n")
        writer = csv.writer(f)
        writer.writerow(["x", "y", "range", "e_feat", "e_rgb", "coverage"])
        for r in rows:
            writer.writerow(
                [r["x"], r["y"], r["tag"], f"{r['e_feat']:.8f}", f"{r['e_rgb']:.8f}", f"{r['coverage']:.4f}"]
            )
        for tag in ("short", "long"):
            sel = [r for r in rows if r["tag"] == tag]
            if sel:
                writer.writerow(
                    [
                        "mean",
                        "-",
                        tag,
                        f"{np.mean([r['e_feat'] for r in sel]):.8f}",
                        f"{np.mean([r['e_rgb'] for r in sel]):.8f}",
                        f"{np.mean([r['coverage'] for r in sel]):.4f}",
                    ]
                )
