"""Synthetic scenes with an analytic oracle renderer, style textures, manifests.

Oracle scenes are signed-distance primitives (sphere, box, smooth blend)
carrying a procedural surface albedo and no shading, so appearance is
view-independent by construction.  The generator writes, per frame: a PNG
for inspection, an exact ``.f32t`` image, and an ``.f32t`` depth map
(along-ray distance; 0 marks a miss) that later feeds the analytic flow.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .diffcore.tensorfile import load_f32t, save_f32t
from .renderer import Camera, generate_rays


class ManifestError(Exception):
    pass


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def save_png(path, img) -> None:
    arr = np.asarray(img, dtype=np.float64)
    data = np.round(255.0 * np.clip(arr, 0.0, 1.0)).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64)[..., :3] / 255.0


# ---------------------------------------------------------------------------
# scene manifest
# ---------------------------------------------------------------------------


@dataclass
class Frame:
    image: str
    cam_to_world: np.ndarray
    split: str  # "train" | "test"
    depth: str | None = None


@dataclass
class SceneManifest:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    near: float
    far: float
    frames: list[Frame]
    aabb: tuple = ((-1.1, -1.1, -1.1), (1.1, 1.1, 1.1))
    root: str = "."

    def camera(self, i: int) -> Camera:
        return Camera(
            fx=self.fx,
            fy=self.fy,
            cx=self.cx,
            cy=self.cy,
            width=self.width,
            height=self.height,
            cam_to_world=self.frames[i].cam_to_world,
            near=self.near,
            far=self.far,
        )

    def split_indices(self, split: str) -> list[int]:
        return [i for i, f in enumerate(self.frames) if f.split == split]

    def load_image(self, i: int) -> np.ndarray:
        return load_f32t(os.path.join(self.root, self.frames[i].image))

    def load_depth(self, i: int) -> np.ndarray:
        if self.frames[i].depth is None:
            raise ManifestError(f"frame {i} carries no depth map")
        return load_f32t(os.path.join(self.root, self.frames[i].depth))


def save_manifest(path: str, m: SceneManifest) -> None:
    doc = {
        "width": m.width,
        "height": m.height,
        "fx": m.fx,
        "fy": m.fy,
        "cx": m.cx,
        "cy": m.cy,
        "near": m.near,
        "far": m.far,
        "aabb": [list(m.aabb[0]), list(m.aabb[1])],
        "frames": [
            {
                "image": f.image,
                "cam_to_world": np.asarray(f.cam_to_world).tolist(),
                "split": f.split,
                **({"depth": f.depth} if f.depth else {}),
            }
            for f in m.frames
        ],
    }
    with open(path, "w") as fp:
        json.dump(doc, fp, indent=1)


def load_manifest(path: str) -> SceneManifest:
    with open(path) as fp:
        doc = json.load(fp)
    root = os.path.dirname(os.path.abspath(path))
    frames = []
    for k, fd in enumerate(doc["frames"]):
        mat = np.asarray(fd["cam_to_world"], dtype=np.float64)
        if mat.shape != (4, 4):
            raise ManifestError(f"frame {k}: cam_to_world is not 4x4")
        R = mat[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-5 or abs(np.linalg.det(R) - 1.0) > 1e-5:
            raise ManifestError(f"frame {k}: non-rigid cam_to_world matrix")
        frames.append(
            Frame(
                image=fd["image"],
                cam_to_world=mat,
                split=fd["split"],
                depth=fd.get("depth"),
            )
        )
    if sum(1 for f in frames if f.split == "train") < 2:
        raise ManifestError("manifest needs at least 2 train frames")
    m = SceneManifest(
        width=int(doc["width"]),
        height=int(doc["height"]),
        fx=float(doc["fx"]),
        fy=float(doc["fy"]),
        cx=float(doc["cx"]),
        cy=float(doc["cy"]),
        near=float(doc["near"]),
        far=float(doc["far"]),
        frames=frames,
        aabb=(tuple(doc["aabb"][0]), tuple(doc["aabb"][1])),
        root=root,
    )
    for k, f in enumerate(frames):
        img_path = os.path.join(root, f.image)
        if not os.path.exists(img_path):
            raise ManifestError(f"frame {k}: missing image file {f.image}")
        arr = load_f32t(img_path)
        if arr.shape != (m.height, m.width, 3):
            raise ManifestError(
                f"frame {k}: image extents {arr.shape} != declared "
                f"({m.height}, {m.width}, 3)"
            )
    return m


# ---------------------------------------------------------------------------
# oracle geometry
# ---------------------------------------------------------------------------


@dataclass
class OracleScene:
    """Analytic SDF scene with procedural unlit albedo.

    ``invert`` flips the sign of the combined field, turning the union of
    primitives into a cavity whose inside faces the camera (a "room").
    """

    kind: str
    seed: int
    spheres: list = field(default_factory=list)  # (center, radius)
    boxes: list = field(default_factory=list)  # (center, half_extents)
    blend_k: float = 0.0
    invert: bool = False
    albedo_mode: str = "smooth"
    palette: np.ndarray | None = None
    stripe_dir: np.ndarray | None = None
    stripe_freq: float = 4.0
    mix_mat: np.ndarray | None = None

    def sdf(self, p: np.ndarray) -> np.ndarray:
        ds = []
        for c, r in self.spheres:
            ds.append(np.linalg.norm(p - c, axis=-1) - r)
        for c, h in self.boxes:
            q = np.abs(p - c) - h
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(np.max(q, axis=-1), 0.0)
            ds.append(outside + inside)
        d = ds[0]
        for other in ds[1:]:
            if self.blend_k > 0:
                h = np.clip(0.5 + 0.5 * (other - d) / self.blend_k, 0.0, 1.0)
                d = other + (d - other) * h - self.blend_k * h * (1.0 - h)
            else:
                d = np.minimum(d, other)
        return -d if self.invert else d

    def albedo(self, p: np.ndarray) -> np.ndarray:
        if self.albedo_mode == "smooth":
            u = p @ self.mix_mat  # (M,3) of low-frequency phases
            return 0.5 + 0.38 * np.sin(u)
        # crisp: hard color bands across a seeded direction
        t = np.sin(self.stripe_freq * (p @ self.stripe_dir))
        band = (t > 0).astype(np.int64)
        fine = (np.sin(2.7 * self.stripe_freq * (p @ self.stripe_dir[::-1])) > 0.6)
        idx = np.where(fine, 2, band)
        return self.palette[idx]


def make_oracle(kind: str, seed: int) -> OracleScene:
    rng = np.random.default_rng(seed)
    jitter = lambda s: rng.uniform(-s, s, 3)
    if kind == "sphere":
        sc = OracleScene(kind=kind, seed=seed, albedo_mode="smooth")
        sc.spheres = [(np.zeros(3), 0.8)]
        sc.mix_mat = rng.normal(0.0, 1.2, (3, 3))
        return sc
    if kind == "box":
        sc = OracleScene(kind=kind, seed=seed, albedo_mode="crisp")
        sc.boxes = [(jitter(0.08), np.array([0.62, 0.5, 0.68]) + jitter(0.05))]
        sc.palette = rng.uniform(0.1, 0.9, (3, 3))
        sc.stripe_dir = _unit(rng.normal(size=3))
        sc.stripe_freq = rng.uniform(3.0, 5.0)
        return sc
    if kind == "blend":
        sc = OracleScene(kind=kind, seed=seed, albedo_mode="crisp", blend_k=0.25)
        sc.spheres = [(np.array([0.3, 0.0, 0.05]) + jitter(0.08), 0.52 + rng.uniform(-0.05, 0.05))]
        sc.boxes = [(np.array([-0.3, 0.0, -0.05]) + jitter(0.08), np.array([0.42, 0.34, 0.5]) + jitter(0.04))]
        sc.palette = rng.uniform(0.08, 0.92, (3, 3))
        sc.stripe_dir = _unit(rng.normal(size=3))
        sc.stripe_freq = rng.uniform(3.0, 5.0)
        return sc
    if kind == "room":
        # camera sits inside a box cavity; every ray hits a wall, so frames
        # are full-content like forward-facing photo captures
        sc = OracleScene(kind=kind, seed=seed, albedo_mode="crisp", invert=True)
        sc.boxes = [(jitter(0.03), np.array([1.0, 1.0, 1.0]) + jitter(0.05))]
        sc.palette = rng.uniform(0.08, 0.92, (3, 3))
        sc.stripe_dir = _unit(rng.normal(size=3))
        sc.stripe_freq = rng.uniform(2.5, 4.0)
        return sc
    raise ManifestError(f"unknown oracle scene kind {kind!r}")


def _unit(v):
    return v / np.linalg.norm(v)


def sphere_trace(scene: OracleScene, origins, dirs, near, far, tol=1e-4, max_steps=96):
    """Vectorized sphere tracing; returns (t, hit mask)."""
    t = np.full(origins.shape[0], near, dtype=np.float64)
    hit = np.zeros(origins.shape[0], dtype=bool)
    alive = np.ones(origins.shape[0], dtype=bool)
    for _ in range(max_steps):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        p = origins[idx] + dirs[idx] * t[idx, None]
        d = scene.sdf(p)
        close = d < tol
        hit_idx = idx[close]
        hit[hit_idx] = True
        alive[hit_idx] = False
        move = np.maximum(d, tol)
        t[idx] += np.where(close, 0.0, move * 0.95)
        overshot = idx[t[idx] > far]
        alive[overshot] = False
    return t, hit


def orbit_camera(radius, elevation, angle, width, height, fx, near, far,
                 look_outward=False) -> Camera:
    """Camera on a circle around the origin, optical axis through the origin.

    ``look_outward`` flips the optical axis away from the center (used by
    cavity scenes where the camera films the surrounding walls).
    """
    eye = np.array(
        [radius * np.cos(angle), radius * np.sin(angle), elevation], dtype=np.float64
    )
    fwd = _unit(eye) if look_outward else _unit(-eye)
    up_w = np.array([0.0, 0.0, 1.0])
    right = _unit(np.cross(fwd, up_w))
    down = np.cross(fwd, right)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = down
    c2w[:3, 2] = fwd
    c2w[:3, 3] = eye
    return Camera(
        fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, width=width, height=height,
        cam_to_world=c2w, near=near, far=far,
    )


SCENE_PRESETS = {
    "sphere": {"radius": 3.0, "elevation": 0.9, "fx": 140.0, "near": 1.5, "far": 5.0},
    "box": {"radius": 3.0, "elevation": 0.9, "fx": 140.0, "near": 1.5, "far": 5.0},
    "blend": {"radius": 3.0, "elevation": 0.9, "fx": 140.0, "near": 1.5, "far": 5.0},
    "room": {
        "radius": 0.32, "elevation": 0.1, "fx": 88.0, "near": 0.12, "far": 3.4,
        "look_outward": True,
    },
}
AABB = ((-1.1, -1.1, -1.1), (1.1, 1.1, 1.1))
TEST_EVERY = 9  # every 9th frame is held out


def render_oracle_view(scene: OracleScene, cam: Camera, supersample=3, background=1.0):
    """Analytic render: albedo where rays hit, background elsewhere.

    Color is box-averaged over supersample^2 subpixel rays; the coverage
    map is the hit fraction of those rays; the depth map uses the center
    ray only (0 where the center ray misses).
    """
    H, W = cam.height, cam.width
    ss = supersample
    img = np.zeros((H * W, 3))
    coverage = np.zeros(H * W)
    offs = (np.arange(ss) + 0.5) / ss
    for oy in offs:
        for ox in offs:
            xs = np.arange(W)[None, :] + ox
            ys = np.arange(H)[:, None] + oy
            pix = np.stack(
                [np.broadcast_to(xs, (H, W)).ravel(), np.broadcast_to(ys, (H, W)).ravel()],
                axis=-1,
            )
            rays = generate_rays(cam, pix)
            t, hit = sphere_trace(scene, rays.origins, rays.dirs, cam.near, cam.far)
            col = np.full((H * W, 3), background, dtype=np.float64)
            p = rays.origins[hit] + rays.dirs[hit] * t[hit, None]
            col[hit] = np.clip(scene.albedo(p), 0.0, 1.0)
            img += col
            coverage += hit
    img /= ss * ss
    coverage /= ss * ss
    center = generate_rays(cam, cam.pixel_grid())
    t, hit = sphere_trace(scene, center.origins, center.dirs, cam.near, cam.far)
    depth = np.where(hit, t, 0.0).reshape(H, W)
    return img.reshape(H, W, 3), depth, coverage.reshape(H, W)


def synth_scene(kind: str, seed: int, views: int, out_dir: str, *, width=128, height=128,
                supersample=3) -> SceneManifest:
    """Generate a full synthetic dataset under ``out_dir``."""
    if views < 2:
        raise ManifestError("synth_scene: need at least 2 views")
    preset = SCENE_PRESETS[kind]
    oracle = make_oracle(kind, seed)
    os.makedirs(out_dir, exist_ok=True)
    fx = preset["fx"] * width / 128.0  # presets are tuned for 128-wide frames
    frames = []
    for v in range(views):
        angle = 2.0 * np.pi * v / views
        cam = orbit_camera(
            preset["radius"], preset["elevation"], angle, width, height,
            fx, preset["near"], preset["far"],
            look_outward=preset.get("look_outward", False),
        )
        img, depth, coverage = render_oracle_view(oracle, cam, supersample=supersample)
        stem = f"frame_{v:03d}"
        save_f32t(os.path.join(out_dir, stem + ".f32t"), img)
        save_png(os.path.join(out_dir, stem + ".png"), img)
        save_f32t(os.path.join(out_dir, stem + "_depth.f32t"), depth)
        save_f32t(os.path.join(out_dir, stem + "_alpha.f32t"), coverage)
        split = "test" if (v % TEST_EVERY) == TEST_EVERY - 1 else "train"
        frames.append(
            Frame(
                image=stem + ".f32t",
                cam_to_world=cam.cam_to_world,
                split=split,
                depth=stem + "_depth.f32t",
            )
        )
    manifest = SceneManifest(
        width=width, height=height, fx=fx, fy=fx,
        cx=width / 2.0, cy=height / 2.0, near=preset["near"], far=preset["far"],
        frames=frames, aabb=AABB, root=out_dir,
    )
    save_manifest(os.path.join(out_dir, "manifest.json"), manifest)
    with open(os.path.join(out_dir, "oracle.json"), "w") as f:
        json.dump({"kind": kind, "seed": seed, "supersample": supersample}, f)
    return load_manifest(os.path.join(out_dir, "manifest.json"))


def load_oracle(scene_dir: str) -> OracleScene:
    with open(os.path.join(scene_dir, "oracle.json")) as f:
        doc = json.load(f)
    return make_oracle(doc["kind"], doc["seed"])


# ---------------------------------------------------------------------------
# procedural style textures
# ---------------------------------------------------------------------------


def synth_styles(count: int, seed: int, *, size=128, kind="mixed") -> list[np.ndarray]:
    """Procedural style images with diverse channel statistics, (size,size,3)."""
    if count < 1:
        raise ManifestError("synth_styles: count must be >= 1")
    if size % 16:
        raise ManifestError("synth_styles: size must be divisible by 16")
    gens = [_style_stripes, _style_blobs, _style_field, _style_checker]
    out = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        if kind == "constant":
            img = np.broadcast_to(rng.uniform(0.1, 0.9, 3), (size, size, 3)).copy()
        else:
            img = gens[i % len(gens)](size, rng)
        out.append(np.clip(img, 0.0, 1.0))
    return out


def _coords(size):
    v = (np.arange(size) + 0.5) / size
    return np.meshgrid(v, v, indexing="ij")


def _style_stripes(size, rng):
    y, x = _coords(size)
    ang = rng.uniform(0, np.pi)
    freq = rng.uniform(6, 14)
    t = np.sin(2 * np.pi * freq * (np.cos(ang) * x + np.sin(ang) * y))
    pal = rng.uniform(0.05, 0.95, (2, 3))
    img = np.where((t > 0)[..., None], pal[0], pal[1])
    soft = rng.uniform(0.0, 0.15)
    return img + soft * np.sin(9 * np.pi * x)[..., None]

def _style_blobs(size, rng):
    y, x = _coords(size)
    img = np.broadcast_to(rng.uniform(0.2, 0.8, 3), (size, size, 3)).copy()
    for _ in range(rng.integers(5, 10)):
        c = rng.uniform(0, 1, 2)
        r = rng.uniform(0.05, 0.2)
        m = np.exp(-(((x - c[0]) ** 2 + (y - c[1]) ** 2) / (2 * r * r)))
        img = img * (1 - m[..., None]) + m[..., None] * rng.uniform(0, 1, 3)
    return img


def _style_field(size, rng):
    y, x = _coords(size)
    img = np.zeros((size, size, 3))
    for c in range(3):
        a, b = rng.uniform(1, 4, 2)
        ph = rng.uniform(0, 2 * np.pi, 2)
        img[..., c] = 0.5 + 0.4 * np.sin(2 * np.pi * a * x + ph[0]) * np.cos(
            2 * np.pi * b * y + ph[1]
        )
    return img


def _style_checker(size, rng):
    y, x = _coords(size)
    n = int(rng.integers(4, 9))
    cells = ((np.floor(x * n) + np.floor(y * n)) % 2).astype(bool)
    pal = rng.uniform(0.05, 0.95, (2, 3))
    return np.where(cells[..., None], pal[0], pal[1])
