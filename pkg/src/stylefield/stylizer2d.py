"""Frozen 2D stylization stack and the trainable bottleneck prompt.

Three pieces:

* ``FeatureBank`` -- four fixed conv+relu+pool stages (3->8->16->32->64
  channels, bias-free, seeded Gaussian weights).  It is the measuring stick
  for every style statistic in the package and is never trained.
* ``StylizerNet`` -- a small encoder / statistic-alignment / decoder network.
  It is pretrained once on procedural textures (reconstruction + style
  statistics), then permanently frozen.
* the visual prompt -- a tensor shaped like the bottleneck feature map,
  added right after the alignment transform.  During restyling it is the
  only thing that trains.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .diffcore import ops
from .diffcore.adam import AdamState, adam_step, check_finite_loss
from .diffcore.tensor import (
    DiffcoreError,
    ParamSet,
    ShapeError,
    Tensor,
    backward,
    no_grad,
)
from .diffcore.tensorfile import load_f32t, save_f32t
from .stylepattern import Cubemap, faces_from_cross

BANK_CHANNELS = (3, 8, 16, 32, 64)
STYLIZER_SEED_DEFAULT = 2024


def _chw(img) -> np.ndarray:
    """Accept (3,H,W) or (H,W,3) ndarray and return (3,H,W) float."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"expected a 3-channel image, got shape {arr.shape}")
    if arr.shape[0] != 3 and arr.shape[2] == 3:
        arr = arr.transpose(2, 0, 1)
    if arr.shape[0] != 3:
        raise ShapeError(f"expected a 3-channel image, got shape {arr.shape}")
    return arr


class FeatureBank:
    """Fixed multi-scale feature extractor; stage i halves the extents i times."""

    def __init__(self, seed: int = 0, channels=BANK_CHANNELS):
        self.seed = seed
        self.channels = tuple(channels)
        rng = np.random.default_rng(seed)
        self.weights = []
        for cin, cout in zip(self.channels[:-1], self.channels[1:]):
            std = 1.0 / np.sqrt(cin * 9)
            self.weights.append(rng.normal(0.0, std, (cout, cin, 3, 3)))

    def extract_features(self, img) -> list[Tensor]:
        """[stage1..stage4] features of a 3-channel image (extents % 16 == 0)."""
        if isinstance(img, Tensor):
            x = img
            if x.data.ndim == 3:
                x = ops.reshape(x, (1,) + tuple(x.shape))
        else:
            arr = _chw(img)
            x = Tensor(arr[None])
        H, W = x.shape[2], x.shape[3]
        if H % 16 or W % 16:
            raise ShapeError(
                f"extract_features: extents ({H}, {W}) not divisible by 16"
            )
        feats = []
        for w in self.weights:
            x = ops.avgpool2(ops.relu(ops.conv2d(x, Tensor(w.astype(x.data.dtype)))))
            feats.append(x)
        return feats

    def stats(self, img) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-stage channel (mean, std) as plain arrays (evaluation helper)."""
        with no_grad():
            feats = self.extract_features(img)
            out = []
            for f in feats:
                mu, sd = ops.channel_stats(f)
                out.append((mu.data.reshape(-1), sd.data.reshape(-1)))
        return out


def channel_stats(feature):
    """Channel-wise mean and population std of a feature map (see ops)."""
    t = feature if isinstance(feature, Tensor) else Tensor(np.asarray(feature, dtype=np.float64))
    return ops.channel_stats(t)


def align_stats(content_feat, style_feat, floor: float = 1e-6):
    """Shift content statistics onto style statistics, channel-wise."""
    c = content_feat if isinstance(content_feat, Tensor) else Tensor(np.asarray(content_feat, dtype=np.float64))
    s = style_feat if isinstance(style_feat, Tensor) else Tensor(np.asarray(style_feat, dtype=np.float64))
    if c.shape[-3] != s.shape[-3]:
        raise ShapeError(
            f"align_stats: channel mismatch {c.shape[-3]} vs {s.shape[-3]}"
        )
    mu_c, sd_c = ops.channel_stats(c)
    mu_s, sd_s = ops.channel_stats(s)
    sd_c = ops.clip(sd_c, floor, np.inf)
    return ops.add(ops.mul(ops.div(ops.sub(c, mu_c), sd_c), sd_s), mu_s)


@dataclass
class NoiseContent:
    """Seeded uniform-noise content image in cross layout, (3, 3F, 4F)."""

    seed: int
    face_res: int

    def __post_init__(self):
        if self.face_res % 4:
            raise DiffcoreError("NoiseContent: face_res must be divisible by 4")
        rng = np.random.default_rng(self.seed)
        self.image = rng.uniform(0.0, 1.0, (3, 3 * self.face_res, 4 * self.face_res))


class StylizerNet:
    """Encoder (3->32->64, /4 spatial) + alignment + decoder (64->32->3)."""

    def __init__(self, seed: int = STYLIZER_SEED_DEFAULT, dtype=np.float32):
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        spec = [
            ("enc_w0", (32, 3, 3, 3)),
            ("enc_b0", (32,)),
            ("enc_w1", (64, 32, 3, 3)),
            ("enc_b1", (64,)),
            ("dec_w0", (32, 64, 3, 3)),
            ("dec_b0", (32,)),
            ("dec_w1", (3, 32, 3, 3)),
            ("dec_b1", (3,)),
        ]
        for name, shape in spec:
            if name.endswith(("b0", "b1")):
                arr = np.zeros(shape)
            else:
                fan_in = shape[1] * shape[2] * shape[3]
                arr = rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape)
            self.params.add(name, arr.astype(self.dtype))
        self.frozen = False

    def freeze(self) -> None:
        self.params.freeze_all()
        self.frozen = True

    def encode(self, x: Tensor) -> Tensor:
        p = self.params
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(
                f"StylizerNet.encode: extents {x.shape[2:]} not divisible by 4"
            )
        h = ops.avgpool2(ops.relu(ops.conv2d(x, p["enc_w0"], p["enc_b0"])))
        return ops.avgpool2(ops.relu(ops.conv2d(h, p["enc_w1"], p["enc_b1"])))

    def decode(self, z: Tensor) -> Tensor:
        p = self.params
        h = ops.relu(ops.conv2d(ops.upsample2(z), p["dec_w0"], p["dec_b0"]))
        return ops.sigmoid(ops.conv2d(ops.upsample2(h), p["dec_w1"], p["dec_b1"]))

    def bottleneck_shape(self, H: int, W: int) -> tuple:
        return (64, H // 4, W // 4)

    # -- persistence --------------------------------------------------------

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        meta = {
            "seed": self.seed,
            "frozen": self.frozen,
            "layers": self.params.names(),
            "encoder": "conv3x3(3->32)+relu+avgpool2, conv3x3(32->64)+relu+avgpool2",
            "decoder": "upsample2+conv3x3(64->32)+relu, upsample2+conv3x3(32->3)+sigmoid",
        }
        with open(os.path.join(out_dir, "stylizer.json"), "w") as f:
            json.dump(meta, f, indent=1)
        for name, t in self.params.items():
            save_f32t(os.path.join(out_dir, f"{name}.f32t"), t.data)

    @classmethod
    def load(cls, out_dir: str, dtype=np.float32) -> "StylizerNet":
        with open(os.path.join(out_dir, "stylizer.json")) as f:
            meta = json.load(f)
        net = cls(seed=meta["seed"], dtype=dtype)
        for name in meta["layers"]:
            net.params[name].data = load_f32t(os.path.join(out_dir, f"{name}.f32t")).astype(net.dtype)
        if meta.get("frozen"):
            net.freeze()
        return net


def stylize_image(net: StylizerNet, content, style, prompt=None) -> Tensor:
    """Restyle ``content`` toward ``style``; optionally add the prompt.

    A missing prompt and an all-zero prompt are bit-identical by
    construction (the prompt enters additively at the bottleneck).
    Returns a (3, H, W) tensor in [0, 1].
    """
    c = content if isinstance(content, Tensor) else Tensor(_chw(content))
    s = style if isinstance(style, Tensor) else Tensor(_chw(style))
    c4 = ops.reshape(c, (1,) + tuple(c.shape)) if c.data.ndim == 3 else c
    s4 = ops.reshape(s, (1,) + tuple(s.shape)) if s.data.ndim == 3 else s
    zc = net.encode(c4)
    zs = net.encode(s4)
    z = align_stats(zc, zs)
    if prompt is not None:
        p = prompt if isinstance(prompt, Tensor) else Tensor(np.asarray(prompt, dtype=z.data.dtype))
        expect = tuple(z.shape[1:])
        if tuple(p.shape) != expect:
            raise ShapeError(
                f"stylize_image: prompt shape {tuple(p.shape)} != bottleneck {expect}"
            )
        z = ops.add(z, ops.reshape(p, (1,) + expect))
    out = net.decode(z)
    return ops.reshape(out, tuple(out.shape[1:]))


def make_prompt(face_res: int, dtype=np.float32) -> ParamSet:
    """Zero-initialized prompt for cross-layout noise content at this face res."""
    if face_res % 4:
        raise DiffcoreError("make_prompt: face_res must be divisible by 4")
    ps = ParamSet()
    ps.add("prompt", np.zeros((64, 3 * face_res // 4, face_res), dtype=dtype))
    return ps


def generate_style_pattern(net: StylizerNet, style, z: NoiseContent, prompt=None) -> Tensor:
    """Stylize the noise cross-image and slice it into a (6,F,F,3) pattern."""
    out = stylize_image(net, z.image, style, prompt=prompt)
    return faces_from_cross(out, z.face_res)


def pattern_to_cubemap(pattern) -> Cubemap:
    data = pattern.data if isinstance(pattern, Tensor) else np.asarray(pattern)
    return Cubemap(np.clip(data, 0.0, 1.0).astype(np.float32))


def pretrain_stylizer(
    textures,
    iterations: int,
    seed: int,
    *,
    bank: FeatureBank | None = None,
    lr: float = 1e-3,
    batch: int = 2,
    crop: int = 64,
    style_weight: float = 0.02,
    log_every: int = 0,
) -> StylizerNet:
    """Train the encoder/decoder once on procedural textures, then freeze.

    Each iteration optimizes reconstruction (style == content must round-trip)
    plus a channel-statistics style term on mismatched content/style pairs.
    """
    if len(textures) < 16:
        raise DiffcoreError(
            f"pretrain_stylizer: need at least 16 textures, got {len(textures)}"
        )
    bank = bank or FeatureBank(seed=0)
    net = StylizerNet(seed=seed)
    rng = np.random.default_rng(seed)
    imgs = [_chw(t) for t in textures]
    smallest = min(min(im.shape[1], im.shape[2]) for im in imgs)
    crop = min(crop, smallest) // 16 * 16
    if crop < 16:
        raise DiffcoreError("pretrain_stylizer: textures smaller than 16x16")
    opt = AdamState(lr=lr)
    history = []
    for it in range(iterations):
        xs, ys = [], []
        for _ in range(batch):
            ti = rng.integers(0, len(imgs))
            si = rng.integers(0, len(imgs))
            xs.append(_random_crop(imgs[ti], crop, rng))
            ys.append(_random_crop(imgs[si], crop, rng))
        x = Tensor(np.stack(xs).astype(np.float32))
        y = Tensor(np.stack(ys).astype(np.float32))
        # reconstruction arm: style == content, alignment is the identity
        zx = net.encode(x)
        rec = net.decode(align_stats(zx, zx))
        diff = ops.sub(rec, x)
        loss = ops.mean(ops.mul(diff, diff))
        # stylization arm: push decoded stats toward the style crop's stats
        zs = net.encode(y)
        out = net.decode(align_stats(zx, zs))
        sterm = _bank_stat_distance(bank, out, y)
        loss = ops.add(loss, ops.mul(sterm, style_weight))
        check_finite_loss(loss.item())
        grads = backward(loss, net.params)
        adam_step(net.params, grads, opt)
        history.append(loss.item())
        if log_every and it % log_every == 0:
            print(f"pretrain iter {it}: loss {history[-1]:.4f}")
    net.freeze()
    net.history = history
    return net


def _random_crop(img_chw: np.ndarray, crop: int, rng) -> np.ndarray:
    _, H, W = img_chw.shape
    i = int(rng.integers(0, H - crop + 1))
    j = int(rng.integers(0, W - crop + 1))
    return img_chw[:, i : i + crop, j : j + crop]


def _bank_stat_distance(bank: FeatureBank, a, b) -> Tensor:
    """Sum over stages of ||d mean||_2 + ||d std||_2 between two images."""
    fa = bank.extract_features(a)
    fb = bank.extract_features(b)
    total = None
    for qa, qb in zip(fa, fb):
        mu_a, sd_a = ops.channel_stats(qa)
        mu_b, sd_b = ops.channel_stats(qb)
        term = ops.add(ops.l2norm(ops.sub(mu_a, mu_b)), ops.l2norm(ops.sub(sd_a, sd_b)))
        total = term if total is None else ops.add(total, term)
    return total
