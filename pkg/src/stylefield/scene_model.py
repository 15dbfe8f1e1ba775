"""The disentangled scene: density grid, sphere-mapping grid, color networks.

Geometry lives in a voxel density grid.  Appearance is factored through the
unit sphere: a second voxel grid maps world points to sphere points, a small
MLP turns (sphere point, view direction) into the reconstructed color, and an
inverse MLP maps sphere points back to world space so a cycle penalty can
keep the mapping near-bijective.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .diffcore import ops
from .diffcore.tensor import DiffcoreError, ParamSet, Tensor, no_grad
from .diffcore.tensorfile import load_f32t, save_f32t


class DegenerateUVError(DiffcoreError):
    """Interpolated sphere-mapping vector too short to normalize."""


DEGENERATE_NORM = 1e-8


@dataclass
class SceneModelConfig:
    density_extents: tuple = (64, 64, 64)
    uv_extents: tuple = (64, 64, 64)
    bbox_min: tuple = (-1.1, -1.1, -1.1)
    bbox_max: tuple = (1.1, 1.1, 1.1)
    density_bias: float = -4.0
    sphere_bands: int = 4
    dir_bands: int = 2
    hidden: int = 64
    seed: int = 0

    def voxel_edge(self) -> float:
        ext = np.asarray(self.density_extents, dtype=np.float64)
        span = np.asarray(self.bbox_max) - np.asarray(self.bbox_min)
        return float((span / (ext - 1)).max())


def positional_encoding_np(x: np.ndarray, bands: int) -> np.ndarray:
    feats = [x]
    for k in range(bands):
        f = float(2**k)
        feats.append(np.sin(f * x))
        feats.append(np.cos(f * x))
    return np.concatenate(feats, axis=-1)


def positional_encoding(x: Tensor, bands: int) -> Tensor:
    feats = [x]
    for k in range(bands):
        fx = ops.mul(x, float(2**k))
        feats.append(ops.sin(fx))
        feats.append(ops.cos(fx))
    return ops.concat(feats, axis=1)


def encoded_dim(bands: int) -> int:
    return 3 * (1 + 2 * bands)


def _mlp_init(rng, params: ParamSet, prefix: str, widths, dtype, out_bias=None):
    for li in range(len(widths) - 1):
        fan_in = widths[li]
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (widths[li], widths[li + 1]))
        b = np.zeros(widths[li + 1])
        if out_bias is not None and li == len(widths) - 2:
            b = np.asarray(out_bias, dtype=np.float64)
        params.add(f"{prefix}_w{li}", w.astype(dtype), dtype=dtype)
        params.add(f"{prefix}_b{li}", b.astype(dtype), dtype=dtype)


def _mlp_forward(params: ParamSet, prefix: str, x: Tensor, n_layers: int, final):
    h = x
    for li in range(n_layers):
        h = ops.add(ops.matmul(h, params[f"{prefix}_w{li}"]), params[f"{prefix}_b{li}"])
        if li < n_layers - 1:
            h = ops.relu(h)
    return final(h)


class SceneModel:
    """Density + sphere mapping + appearance + inverse mapper in one ParamSet."""

    def __init__(self, cfg: SceneModelConfig | None = None, dtype=np.float32):
        self.cfg = cfg or SceneModelConfig()
        self.dtype = np.dtype(dtype).type
        self.params = ParamSet()
        c = self.cfg
        rng = np.random.default_rng(c.seed)

        self.bbox_min = np.asarray(c.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(c.bbox_max, dtype=np.float64)
        if not np.all(self.bbox_min < self.bbox_max):
            raise DiffcoreError("SceneModel: bbox min must be < max per axis")
        for e in tuple(c.density_extents) + tuple(c.uv_extents):
            if e < 2:
                raise DiffcoreError("SceneModel: grid extents must be >= 2")

        self.params.add(
            "density_raw", np.zeros(tuple(c.density_extents) + (1,), dtype=self.dtype)
        )
        self.params.add("uv_raw", self._radial_init(c.uv_extents).astype(self.dtype))

        app_in = encoded_dim(c.sphere_bands) + encoded_dim(c.dir_bands)
        _mlp_init(rng, self.params, "app", [app_in, c.hidden, c.hidden, 3], self.dtype)
        inv_in = encoded_dim(c.sphere_bands)
        center = 0.5 * (self.bbox_min + self.bbox_max)
        _mlp_init(
            rng, self.params, "inv", [inv_in, c.hidden, c.hidden, 3], self.dtype,
            out_bias=center,
        )

    def _radial_init(self, extents) -> np.ndarray:
        # start the sphere mapping as the radial projection from the box center
        axes = [
            np.linspace(self.bbox_min[a], self.bbox_max[a], extents[a])
            for a in range(3)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        center = 0.5 * (self.bbox_min + self.bbox_max)
        vec = np.stack([gx - center[0], gy - center[1], gz - center[2]], axis=-1)
        n = np.linalg.norm(vec, axis=-1, keepdims=True)
        vec = np.where(n < DEGENERATE_NORM, np.array([0.0, 0.0, 1.0]), vec / np.maximum(n, DEGENERATE_NORM))
        return vec

    # -- coordinate helpers ----------------------------------------------

    def world_to_grid(self, pts: np.ndarray, extents) -> np.ndarray:
        ext = np.asarray(extents, dtype=np.float64)
        g = (pts - self.bbox_min) / (self.bbox_max - self.bbox_min) * (ext - 1.0)
        return np.clip(g, 0.0, ext - 1.0).astype(self.dtype)

    def inside_mask(self, pts: np.ndarray) -> np.ndarray:
        return np.all((pts >= self.bbox_min) & (pts <= self.bbox_max), axis=-1)

    # -- queries (batched, differentiable w.r.t. parameters) --------------

    def query_density(self, pts: np.ndarray) -> Tensor:
        """Density at world points: softplus(raw + bias), zero outside the box."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        coords = self.world_to_grid(pts, self.cfg.density_extents)
        raw = ops.trilinear(self.params["density_raw"], coords)
        sig = ops.softplus(ops.add(raw, self.cfg.density_bias))
        mask = self.inside_mask(pts).astype(self.dtype)[:, None]
        sig = ops.mul(sig, mask)
        return ops.reshape(sig, (pts.shape[0],))

    def query_uv_raw(self, pts: np.ndarray) -> Tensor:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        coords = self.world_to_grid(pts, self.cfg.uv_extents)
        return ops.trilinear(self.params["uv_raw"], coords)

    def query_uv_batch(self, pts: np.ndarray):
        """Sphere points for a batch; returns (unit vectors (M,3), valid mask).

        Rows whose interpolated mapping vector is shorter than the
        degeneracy floor are reported invalid; the returned tensor still has
        M rows (invalid ones are unusable and must be masked by the caller).
        """
        raw = self.query_uv_raw(pts)
        norms = np.linalg.norm(raw.data, axis=-1)
        valid = norms >= DEGENERATE_NORM
        if not valid.all():
            # lift degenerate rows away from zero so normalize stays finite;
            # callers drop these rows via the mask
            safe = np.where(valid[:, None], np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]))
            raw = ops.add(raw, safe.astype(raw.data.dtype))
        s = ops.normalize_rows(raw)
        return s, valid

    def query_uv(self, p: np.ndarray) -> np.ndarray:
        """Single-point sphere mapping; raises on a degenerate query."""
        s, valid = self.query_uv_batch(np.asarray(p, dtype=np.float64)[None, :])
        if not valid[0]:
            raise DegenerateUVError(f"degenerate sphere mapping at point {p}")
        return s.data[0]

    def appearance_color(self, s, d) -> Tensor:
        """Color of a sphere point seen from a unit direction, in [0,1]^3."""
        s_t = s if isinstance(s, Tensor) else Tensor(np.atleast_2d(np.asarray(s, dtype=self.dtype)))
        d = np.atleast_2d(np.asarray(d, dtype=np.float64))
        for name, arr in (("sphere point", s_t.data), ("view direction", d)):
            n = np.linalg.norm(arr, axis=-1)
            if np.any(np.abs(n - 1.0) > 1e-4):
                raise DiffcoreError(
                    f"appearance_color: non-unit {name} (|norm-1| up to "
                    f"{np.abs(n - 1.0).max():.2e})"
                )
        enc_s = positional_encoding(s_t, self.cfg.sphere_bands)
        enc_d = Tensor(positional_encoding_np(d, self.cfg.dir_bands).astype(self.dtype))
        x = ops.concat([enc_s, enc_d], axis=1)
        return _mlp_forward(self.params, "app", x, 3, ops.sigmoid)

    def inverse_map(self, s) -> Tensor:
        """Sphere point back to world space, clamped to the doubled box."""
        s_t = s if isinstance(s, Tensor) else Tensor(np.atleast_2d(np.asarray(s, dtype=self.dtype)))
        enc = positional_encoding(s_t, self.cfg.sphere_bands)
        out = _mlp_forward(self.params, "inv", enc, 3, lambda h: h)
        center = 0.5 * (self.bbox_min + self.bbox_max)
        half = self.bbox_max - center  # doubled box: center +/- 2 * half
        lo = center - 2.0 * half
        hi = center + 2.0 * half
        cols = []
        for a in range(3):
            col = ops.take_flat(out, np.arange(a, out.data.size, 3), (out.shape[0], 1))
            cols.append(ops.clip(col, float(lo[a]), float(hi[a])))
        return ops.concat(cols, axis=1)

    # -- persistence -------------------------------------------------------

    def save(self, ckpt_dir: str) -> None:
        os.makedirs(ckpt_dir, exist_ok=True)
        meta = {
            "config": asdict(self.cfg),
            "params": self.params.names(),
        }
        with open(os.path.join(ckpt_dir, "model.json"), "w") as f:
            json.dump(meta, f, indent=1)
        for name, t in self.params.items():
            save_f32t(os.path.join(ckpt_dir, f"{name}.f32t"), t.data)

    @classmethod
    def load(cls, ckpt_dir: str, dtype=np.float32) -> "SceneModel":
        with open(os.path.join(ckpt_dir, "model.json")) as f:
            meta = json.load(f)
        raw_cfg = meta["config"]
        cfg = SceneModelConfig(
            **{
                k: tuple(v) if isinstance(v, list) else v
                for k, v in raw_cfg.items()
            }
        )
        model = cls(cfg, dtype=dtype)
        for name in meta["params"]:
            arr = load_f32t(os.path.join(ckpt_dir, f"{name}.f32t"))
            t = model.params[name]
            if arr.shape != t.data.shape:
                raise DiffcoreError(
                    f"checkpoint {ckpt_dir}: shape {arr.shape} for {name!r}, "
                    f"expected {t.data.shape}"
                )
            t.data = arr.astype(model.dtype)
        return model

    def zero_appearance(self) -> None:
        """Zero all appearance-MLP weights and biases (test hook)."""
        for li in range(3):
            self.params[f"app_w{li}"].data[...] = 0.0
            self.params[f"app_b{li}"].data[...] = 0.0

    def surface_albedo_probe(self, pts, dirs) -> np.ndarray:
        with no_grad():
            s, valid = self.query_uv_batch(pts)
            col = self.appearance_color(s, dirs)
        return np.where(valid[:, None], col.data, np.nan)
