"""The 2D style-pattern space: a cubemap addressed from the unit sphere.

Face convention (fixed so tests can be bit-exact).  Faces are ordered
(+X, -X, +Y, -Y, +Z, -Z).  Each face is spanned by a "right" axis r and an
"up" axis u with r x u = forward, i.e. a right-handed frame per face:

    face   forward        right          up
    +X     ( 1, 0, 0)   ( 0, 0,-1)    ( 0, 1, 0)
    -X     (-1, 0, 0)   ( 0, 0, 1)    ( 0, 1, 0)
    +Y     ( 0, 1, 0)   ( 1, 0, 0)    ( 0, 0,-1)
    -Y     ( 0,-1, 0)   ( 1, 0, 0)    ( 0, 0, 1)
    +Z     ( 0, 0, 1)   ( 1, 0, 0)    ( 0, 1, 0)
    -Z     ( 0, 0,-1)   (-1, 0, 0)    ( 0, 1, 0)

Within a face, (a, b) in [0,1]^2 run along right/up; texel (row i, col j)
of an F x F face has a = (j+0.5)/F and b = 1 - (i+0.5)/F (rows grow
downward, b grows upward).  Direction-to-face ties break by axis order
X, Y, Z, then the positive face.  Filtering clamps within the face; seam
mismatch across faces is measured, not hidden.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .diffcore import ops
from .diffcore.tensor import DiffcoreError, Tensor, no_grad
from .diffcore.tensorfile import load_f32t, save_f32t

FACE_FORWARD = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
    dtype=np.float64,
)
FACE_RIGHT = np.array(
    [[0, 0, -1], [0, 0, 1], [1, 0, 0], [1, 0, 0], [1, 0, 0], [-1, 0, 0]],
    dtype=np.float64,
)
FACE_UP = np.array(
    [[0, 1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1], [0, 1, 0], [0, 1, 0]],
    dtype=np.float64,
)

# horizontal-cross cells (block row, block col) in a 3F x 4F layout:
#        [+Y]
#  [-X]  [+Z]  [+X]  [-Z]
#        [-Y]
CROSS_CELLS = {0: (1, 2), 1: (1, 0), 2: (0, 1), 3: (2, 1), 4: (1, 1), 5: (1, 3)}


@dataclass
class FaceUV:
    face: int
    a: float
    b: float


def sphere_to_face(s: np.ndarray):
    """Unit directions to (face index, a, b); batched, total, deterministic."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    comp = np.abs(s)
    axis = np.argmax(comp, axis=1)  # argmax takes the first max: X before Y before Z
    major = s[np.arange(s.shape[0]), axis]
    face = axis * 2 + (major < 0)
    denom = np.abs(major)
    r = FACE_RIGHT[face]
    u = FACE_UP[face]
    a = ((s * r).sum(axis=1) / denom + 1.0) * 0.5
    b = ((s * u).sum(axis=1) / denom + 1.0) * 0.5
    return face, a, b


def face_to_sphere(face, a, b) -> np.ndarray:
    """Inverse of sphere_to_face away from face edges; returns unit vectors."""
    face = np.atleast_1d(np.asarray(face, dtype=np.int64))
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    v = (
        FACE_FORWARD[face]
        + (2.0 * a - 1.0)[:, None] * FACE_RIGHT[face]
        + (2.0 * b - 1.0)[:, None] * FACE_UP[face]
    )
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sphere_to_face_single(s) -> FaceUV:
    f, a, b = sphere_to_face(np.asarray(s)[None, :])
    return FaceUV(int(f[0]), float(a[0]), float(b[0]))


def ab_to_texel(a, b, F):
    """(a, b) to continuous face-local (row, col) texel coordinates."""
    col = a * F - 0.5
    row = (1.0 - b) * F - 0.5
    return row, col


def texel_centers(F):
    """Directions of all texel centers of every face, shape (6, F, F, 3)."""
    idx = (np.arange(F) + 0.5) / F
    a = np.tile(idx[None, :], (F, 1))
    b = np.tile(1.0 - idx[:, None], (1, F))
    out = np.zeros((6, F, F, 3))
    for f in range(6):
        out[f] = face_to_sphere(
            np.full(F * F, f), a.ravel(), b.ravel()
        ).reshape(F, F, 3)
    return out


class Cubemap:
    """Six square color faces, ordered (+X,-X,+Y,-Y,+Z,-Z), values finite."""

    def __init__(self, faces: np.ndarray):
        faces = np.asarray(faces)
        if faces.ndim != 4 or faces.shape[0] != 6 or faces.shape[1] != faces.shape[2]:
            raise DiffcoreError(f"Cubemap: expected (6,F,F,3), got {faces.shape}")
        if faces.shape[1] < 2:
            raise DiffcoreError("Cubemap: face resolution must be >= 2")
        if not np.all(np.isfinite(faces)):
            raise DiffcoreError("Cubemap: non-finite texel values")
        self.faces = faces

    @property
    def face_res(self) -> int:
        return self.faces.shape[1]

    @classmethod
    def constant(cls, F: int, color) -> "Cubemap":
        return cls(np.broadcast_to(np.asarray(color, dtype=np.float32), (6, F, F, 3)).copy())

    def save(self, path: str) -> None:
        save_f32t(path, self.faces)

    @classmethod
    def load(cls, path: str) -> "Cubemap":
        return cls(load_f32t(path))

    def to_cross(self, fill=0.0) -> np.ndarray:
        F = self.face_res
        img = np.full((3 * F, 4 * F, 3), fill, dtype=self.faces.dtype)
        for f, (bi, bj) in CROSS_CELLS.items():
            img[bi * F : (bi + 1) * F, bj * F : (bj + 1) * F] = self.faces[f]
        return img


def sample_cubemap(cubemap, s: np.ndarray):
    """Colors of the cubemap at unit directions s.

    ``cubemap`` may be a Cubemap (returns an ndarray) or a Tensor of shape
    (6,F,F,3) (returns a Tensor differentiable w.r.t. the texels).
    """
    face, a, b = sphere_to_face(s)
    if isinstance(cubemap, Tensor):
        F = cubemap.shape[1]
        row, col = ab_to_texel(a, b, F)
        return ops.cubemap_sample_op(cubemap, face, row, col)
    faces = cubemap.faces if isinstance(cubemap, Cubemap) else np.asarray(cubemap)
    F = faces.shape[1]
    row, col = ab_to_texel(a, b, F)
    return kernels.cubemap_sample_forward(
        np.ascontiguousarray(faces, dtype=np.float64),
        face.astype(np.int64),
        row,
        col,
    )


def cross_to_faces_index(F: int) -> np.ndarray:
    """Flat gather map from a (3, 3F, 4F) CHW cross image to (6,F,F,3) faces."""
    H, W = 3 * F, 4 * F
    idx = np.zeros((6, F, F, 3), dtype=np.int64)
    ii, jj = np.meshgrid(np.arange(F), np.arange(F), indexing="ij")
    for f, (bi, bj) in CROSS_CELLS.items():
        rows = bi * F + ii
        cols = bj * F + jj
        for c in range(3):
            idx[f, :, :, c] = c * (H * W) + rows * W + cols
    return idx.reshape(-1)


def faces_from_cross(img_chw: Tensor, F: int) -> Tensor:
    """Slice a stylized cross-layout image into the six faces (differentiable)."""
    if img_chw.shape != (3, 3 * F, 4 * F):
        raise DiffcoreError(
            f"faces_from_cross: expected (3,{3*F},{4*F}), got {tuple(img_chw.shape)}"
        )
    return ops.take_flat(img_chw, cross_to_faces_index(F), (6, F, F, 3))


def faces_to_cross_chw(faces: np.ndarray, fill=0.5) -> np.ndarray:
    """Assemble faces into a CHW cross image (content input for stylization)."""
    cm = faces.faces if isinstance(faces, Cubemap) else np.asarray(faces)
    F = cm.shape[1]
    img = np.full((3 * F, 4 * F, 3), fill, dtype=np.float64)
    for f, (bi, bj) in CROSS_CELLS.items():
        img[bi * F : (bi + 1) * F, bj * F : (bj + 1) * F] = cm[f]
    return img.transpose(2, 0, 1)


def bake_appearance_cubemap(scene, F: int, direction=(0.0, 0.0, 1.0), chunk=16384) -> Cubemap:
    """Bake the reconstructed appearance into a cubemap.

    Every texel's color is the appearance network evaluated at the texel
    center's sphere point under one fixed canonical view direction, which
    strips the (weak) view dependence.
    """
    dirs = texel_centers(F).reshape(-1, 3)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    out = np.zeros((dirs.shape[0], 3), dtype=np.float32)
    with no_grad():
        for start in range(0, dirs.shape[0], chunk):
            sl = slice(start, min(start + chunk, dirs.shape[0]))
            view = np.broadcast_to(d, (sl.stop - sl.start, 3))
            out[sl] = scene.appearance_color(dirs[sl], view).data
    return Cubemap(out.reshape(6, F, F, 3))


def seam_stats(cubemap: Cubemap, n_per_edge: int = 64, eps: float = 1e-3) -> dict:
    """Measure color mismatch across the 12 cube edges (reported, not asserted).

    For points on each geometric edge we sample the map nudged slightly into
    either adjacent face and record the color difference.
    """
    diffs = []
    pairs = []
    for fa in range(6):
        for fb in range(fa + 1, 6):
            if np.dot(FACE_FORWARD[fa], FACE_FORWARD[fb]) != 0:
                continue  # opposite faces share no edge
            pairs.append((fa, fb))
    ts = np.linspace(-0.9, 0.9, n_per_edge)
    for fa, fb in pairs:
        edge_axis = np.cross(FACE_FORWARD[fa], FACE_FORWARD[fb])
        base = FACE_FORWARD[fa] + FACE_FORWARD[fb]
        pts = base[None, :] + ts[:, None] * edge_axis[None, :]
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        sa = pts + eps * FACE_FORWARD[fa]
        sb = pts + eps * FACE_FORWARD[fb]
        sa /= np.linalg.norm(sa, axis=1, keepdims=True)
        sb /= np.linalg.norm(sb, axis=1, keepdims=True)
        ca = sample_cubemap(cubemap, sa)
        cb = sample_cubemap(cubemap, sb)
        diffs.append(np.abs(ca - cb).max(axis=1))
    diffs = np.concatenate(diffs)
    return {
        "max_seam_diff": float(diffs.max()),
        "mean_seam_diff": float(diffs.mean()),
        "n_edges": len(pairs),
    }


def occupancy_fraction(cubemap_res: int, sphere_points: np.ndarray) -> float:
    """Fraction of texels hit by at least one of the given sphere points."""
    face, a, b = sphere_to_face(sphere_points)
    F = cubemap_res
    col = np.clip((a * F).astype(np.int64), 0, F - 1)
    row = np.clip(((1.0 - b) * F).astype(np.int64), 0, F - 1)
    flat = face * F * F + row * F + col
    return float(np.unique(flat).size) / (6 * F * F)
