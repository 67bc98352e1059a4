"""Geometry-aware 2D/3D feature recovery and fusion.

Point tokens are spread back onto a voxel grid and turned into a multi-scale
sparse pyramid; image tokens are reshaped into multi-scale 2D maps. Each
voxel level is projected into every camera, samples its matching 2D level,
and the two feature sets are fused by a pooled sigmoid gate (APIF). A
top-down neck merges the levels and prunes weak voxels.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import functional as F
from .autodiff.nn import BatchNorm, Linear, Module, Parameter, _alloc
from .autodiff.tensor import (Tensor, concat, max_, mean, relu, reshape, scatter_rows, sigmoid, sqrt, sum_,
                              take_rows, transpose)
from .geometry import CameraView, PointCloud, project

OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)
_KEY_OFF = 1 << 20


@dataclass
class GarfConfig:
    voxel_size: float = 0.1
    raw_channels: int = 4
    stem_channels: int = 16
    prop_channels: int = 16
    channels: int = 32
    levels: int = 3
    apif_reduction: int = 4
    prune_ratio: float = 0.75

    @classmethod
    def from_dict(cls, d: dict) -> "GarfConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class SparseTensor3D:
    """Occupied voxels at integer ``coords`` (in units of ``stride * voxel_size``)."""

    coords: np.ndarray
    feats: Tensor
    voxel_size: float
    stride: int = 1

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if len(self.coords) != self.feats.shape[0]:
            raise ValueError(f"{len(self.coords)} coords but {self.feats.shape[0]} feature rows")

    def __len__(self):
        return len(self.coords)

    @property
    def centers(self) -> np.ndarray:
        return (self.coords + 0.5) * (self.stride * self.voxel_size)


@dataclass
class FusedScene:
    """Final fused 3D features with the world position of every row."""

    feats: Tensor
    centers: np.ndarray
    coords: Optional[np.ndarray] = None


@dataclass
class FusionBundle:
    sparse: List[SparseTensor3D]
    projected: List[Tensor]
    visibility: List[np.ndarray]
    joined: List[Tensor] = field(default_factory=list)
    fused: List[Tensor] = field(default_factory=list)


def coord_keys(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64) + _KEY_OFF
    return (c[..., 0] << 42) | (c[..., 1] << 21) | c[..., 2]


def lookup(table: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row index of each query coordinate in ``table`` (unique coords), or -1."""
    q = coord_keys(query)
    if len(table) == 0:
        return np.full(q.shape, -1, dtype=np.int64)
    keys = coord_keys(table)
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    pos = np.minimum(np.searchsorted(sk, q), len(sk) - 1)
    return np.where(sk[pos] == q, order[pos], -1)


def downsample_coords(coords: np.ndarray) -> np.ndarray:
    """Unique ``floor(coords / 2)``, sorted lexicographically."""
    return np.unique(np.floor_divide(coords, 2), axis=0)


@functools.lru_cache(maxsize=256)
def _kernel_map_cached(in_bytes: bytes, out_bytes: bytes, stride: int) -> np.ndarray:
    cin = np.frombuffer(in_bytes, dtype=np.int64).reshape(-1, 3)
    cout = np.frombuffer(out_bytes, dtype=np.int64).reshape(-1, 3)
    query = cout[:, None, :] * stride + OFFSETS[None, :, :]
    idx = lookup(cin, query.reshape(-1, 3)).reshape(len(cout), len(OFFSETS))
    idx[idx < 0] = len(cin)
    idx.setflags(write=False)
    return idx


def kernel_map(in_coords: np.ndarray, out_coords: np.ndarray, stride: int) -> np.ndarray:
    """(N_out, 27) input rows read by each output voxel; missing neighbors -> N_in."""
    return _kernel_map_cached(np.ascontiguousarray(in_coords, dtype=np.int64).tobytes(),
                              np.ascontiguousarray(out_coords, dtype=np.int64).tobytes(), stride)


def sparse_conv3d(st: SparseTensor3D, weight: Tensor, stride: int = 1) -> SparseTensor3D:
    """3x3x3 sparse convolution. Stride 1 keeps the coordinate set (submanifold);
    stride 2 writes to the unique parent voxels. ``weight``: (27, Cin, Cout) with
    kernel offsets ordered as ``OFFSETS``."""
    out_coords = st.coords if stride == 1 else downsample_coords(st.coords)
    nmap = kernel_map(st.coords, out_coords, stride)
    cin = st.feats.shape[1]
    padded = concat([st.feats, Tensor(np.zeros((1, cin), dtype=st.feats.dtype))], axis=0)
    cols = reshape(take_rows(padded, nmap), (len(out_coords), 27 * cin))
    out = cols @ reshape(weight, (27 * cin, weight.shape[2]))
    return SparseTensor3D(out_coords, out, st.voxel_size, st.stride * stride)


class SparseConvBlock(Module):
    """Sparse 3x3x3 conv + batch norm + ReLU."""

    def __init__(self, cin: int, cout: int, stride: int, rng):
        self.weight = Parameter(_alloc((27, cin, cout), rng, 1.0 / math.sqrt(27 * cin)))
        self.bn = BatchNorm(cout)
        self.stride = stride

    def forward(self, st: SparseTensor3D) -> SparseTensor3D:
        out = sparse_conv3d(st, self.weight, self.stride)
        out.feats = relu(self.bn(out.feats))
        return out


def voxelize(pc: PointCloud, voxel_size: float, features: Optional[np.ndarray] = None,
             dtype=np.float32) -> SparseTensor3D:
    """Floor-quantize points; points sharing a voxel have their features averaged.

    Without explicit ``features`` each point carries its color (if any) plus a
    constant 1 channel.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if len(pc) == 0:
        raise ValueError("cannot voxelize an empty point cloud")
    if features is None:
        ones = np.ones((len(pc), 1))
        features = np.concatenate([pc.colors, ones], axis=1) if pc.colors is not None else ones
    q = np.floor(pc.positions / voxel_size).astype(np.int64)
    coords, inverse, counts = np.unique(q, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(coords), features.shape[1]))
    np.add.at(sums, inverse, features)
    return SparseTensor3D(coords, Tensor((sums / counts[:, None]).astype(dtype)), voxel_size, 1)


def idw_weights(src: np.ndarray, dst: np.ndarray, k: int = 3):
    """k-nearest inverse-distance weights from ``src`` points onto ``dst`` points."""
    d = np.sqrt(((dst[:, None, :] - src[None, :, :]) ** 2).sum(-1))
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    dk = np.maximum(np.take_along_axis(d, idx, axis=1), 1e-8)
    w = 1.0 / dk
    return idx, w / w.sum(axis=1, keepdims=True)


def interpolate(feats: Tensor, centers: np.ndarray, targets: np.ndarray) -> Tensor:
    """3-NN inverse-distance interpolation of ``feats`` (M x D) at ``targets``."""
    idx, w = idw_weights(centers, targets)
    gathered = take_rows(feats, idx)
    return sum_(gathered * w[:, :, None].astype(feats.dtype), axis=1)


class Propagate3D(Module):
    """Up (3-NN IDW) -> 1x1 conv -> BN -> ReLU onto the stem voxels."""

    def __init__(self, d_in: int, d_out: int, rng):
        self.conv = Linear(d_in, d_out, rng, bias=False)  # BN absorbs a bias
        self.bn = BatchNorm(d_out)

    def forward(self, point_feats: Tensor, centers: np.ndarray, s1: SparseTensor3D) -> Tensor:
        if point_feats.shape[0] < 3:
            raise ValueError("feature propagation needs at least 3 token centers")
        up = interpolate(point_feats, centers, s1.centers)
        return relu(self.bn(self.conv(up)))


class Recover2D(Module):
    """Per tap: drop the class token, reshape to the patch grid, 1x1 conv + BN + ReLU,
    then average-pool level ``i`` (0-based) by ``2**i``."""

    def __init__(self, d_in: int, channels: int, levels: int, rng):
        self.convs = [Linear(d_in, channels, rng, bias=False) for _ in range(levels)]
        self.bns = [BatchNorm(channels) for _ in range(levels)]
        self.levels = levels

    def forward(self, taps: Sequence[Tensor]) -> List[Tensor]:
        if len(taps) != self.levels:
            raise ValueError(f"got {len(taps)} taps for {self.levels} pyramid levels")
        out = []
        for i, (tap, conv, bn) in enumerate(zip(taps, self.convs, self.bns)):
            out.append(F.avg_pool2d(recover_grid(tap, conv, bn), 2 ** i))
        return out


def tokens_to_grid(tokens: Tensor) -> Tensor:
    """(BV, 1 + h*w, D) -> (BV, D, h, w); token j lands at row j // w, column j % w."""
    bv, l, d = tokens.shape
    g = int(round(math.sqrt(l - 1)))
    if g * g != l - 1:
        raise ValueError(f"{l - 1} patch tokens do not form a square grid")
    body = tokens[:, 1:, :]
    return transpose(reshape(body, (bv, g, g, d)), (0, 3, 1, 2))


def recover_grid(tap: Tensor, conv: Linear, bn: BatchNorm) -> Tensor:
    grid = tokens_to_grid(tap)
    bv, d, h, w = grid.shape
    x = transpose(grid, (0, 2, 3, 1))
    x = conv(x)
    x = transpose(x, (0, 3, 1, 2))
    return relu(bn(x))


def projection_sampler(centers: np.ndarray, views: Sequence[CameraView], level_hw, dtype=np.float32):
    """Bilinear sampling plan of voxel centers into a (V, H_i, W_i) map stack.

    Returns (rows, weights, targets, n_visible) such that
    ``projected = scatter(take(flat_map, rows) * weights, targets)`` averages the
    bilinear samples over the views in which each voxel is visible.
    """
    hi, wi = level_hw
    n = len(centers)
    rows, wts, tgts = [], [], []
    n_vis = np.zeros(n, dtype=np.int64)
    for vi, view in enumerate(views):
        p = project(centers, view)
        vis = np.flatnonzero(p.visible)
        n_vis[vis] += 1
        x = (p.u[vis] + 0.5) * (wi / view.width) - 0.5
        y = (p.v[vis] + 0.5) * (hi / view.height) - 0.5
        x0, y0 = np.floor(x), np.floor(y)
        fx, fy = x - x0, y - y0
        for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                          (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
            xi = np.clip(x0 + dx, 0, wi - 1).astype(np.int64)
            yi = np.clip(y0 + dy, 0, hi - 1).astype(np.int64)
            rows.append((vi * hi + yi) * wi + xi)
            wts.append(w)
            tgts.append(vis)
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    wts = np.concatenate(wts) if wts else np.zeros(0)
    tgts = np.concatenate(tgts) if tgts else np.zeros(0, dtype=np.int64)
    if len(tgts):
        wts = wts / n_vis[tgts]
    return rows, wts.astype(dtype), tgts, n_vis


def project_sample(st: SparseTensor3D, fmap: Tensor, views: Sequence[CameraView]) -> tuple:
    """Sample the (V, C, H_i, W_i) ``fmap`` at every voxel's projection, averaged over
    visible views. Voxels visible nowhere get zero rows. Returns (projected, n_visible)."""
    v, c, h, w = fmap.shape
    rows, wts, tgts, n_vis = projection_sampler(st.centers, views, (h, w), fmap.dtype)
    flat = reshape(transpose(fmap, (0, 2, 3, 1)), (v * h * w, c))
    sampled = take_rows(flat, rows) * wts[:, None]
    return scatter_rows(sampled, tgts, len(st)), n_vis


class APIF(Module):
    """Pooled-descriptor gate over the concatenated point/projected features.

    A shared MLP (2C -> 2C/r -> C) maps the max- and mean-pooled descriptors; the
    two C-dim outputs concatenate into 2C gate logits applied to every voxel.
    """

    def __init__(self, channels: int, reduction: int, rng):
        hidden = max(1, 2 * channels // reduction)
        self.fc1 = Linear(2 * channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def mlp(self, x):
        return self.fc2(relu(self.fc1(x)))

    def forward(self, sparse_feats: Tensor, proj_feats: Tensor) -> tuple:
        joined_feats = concat([sparse_feats, proj_feats], axis=1)
        if joined_feats.shape[0] == 0:
            return joined_feats, joined_feats
        pooled_max = max_(joined_feats, axis=0, keepdims=True)
        pooled_avg = mean(joined_feats, axis=0, keepdims=True)
        gate = concat([self.mlp(pooled_max), self.mlp(pooled_avg)], axis=1)
        return joined_feats * sigmoid(gate), joined_feats


def prune_by_norm(feats: Tensor, ratio: float) -> np.ndarray:
    """Indices (ascending) of the top ``ceil(ratio * N)`` rows by L2 norm."""
    n = feats.shape[0]
    keep = max(1, math.ceil(ratio * n)) if n else 0
    norms = np.sqrt((feats.data.astype(np.float64) ** 2).sum(axis=1))
    order = np.argsort(-norms, kind="stable")[:keep]
    return np.sort(order)


class Neck(Module):
    """Top-down merge. The coarsest level is out(lateral(x)); every finer voxel
    adds its parent's merged feature before its own output layer."""

    def __init__(self, channels: int, levels: int, rng, d_in: Optional[int] = None):
        d_in = 2 * channels if d_in is None else d_in
        self.lateral = [Linear(d_in, channels, rng) for _ in range(levels)]
        self.out = [Linear(channels, channels, rng) for _ in range(levels)]

    def forward(self, fused: Sequence[Tensor], coords: Sequence[np.ndarray], prune_ratio: float = 0.75):
        if not fused:
            raise ValueError("neck needs at least one level")
        p = None
        for i in reversed(range(len(fused))):
            x = self.lateral[i](fused[i])
            if p is not None:
                parent = lookup(coords[i + 1], np.floor_divide(coords[i], 2))
                x = x + take_rows(p, parent)
            p = self.out[i](x)
        keep = prune_by_norm(p, prune_ratio)
        return take_rows(p, keep), keep


class Garf(Module):
    def __init__(self, cfg: GarfConfig, d_token: int, rng):
        c = cfg.channels
        self.cfg = cfg
        self.stem = SparseConvBlock(cfg.raw_channels, cfg.stem_channels, 1, rng)
        self.propagate = Propagate3D(d_token, cfg.prop_channels, rng)
        self.reduce = Linear(cfg.stem_channels + cfg.prop_channels, c, rng)
        self.down = [SparseConvBlock(c, c, 2, rng) for _ in range(cfg.levels)]
        self.recover = Recover2D(d_token, c, cfg.levels, rng)
        self.apif = [APIF(c, cfg.apif_reduction, rng) for _ in range(cfg.levels)]
        self.neck = Neck(c, cfg.levels, rng)

    def pyramid(self, s1: SparseTensor3D, point_sparse: Tensor) -> List[SparseTensor3D]:
        s2 = SparseTensor3D(s1.coords, self.reduce(concat([s1.feats, point_sparse], axis=1)), s1.voxel_size, s1.stride)
        levels, cur = [], s2
        for block in self.down:
            cur = block(cur)
            levels.append(cur)
        return levels

    def forward(self, raw: SparseTensor3D, point_feats: Tensor, centers: np.ndarray, taps: Sequence[Tensor],
                views: Sequence[CameraView], return_bundle: bool = False):
        """``raw``: voxelized cloud; ``point_feats``: (M, D) point tokens at ``centers``;
        ``taps``: per-level (V, L, D) image token sequences. Returns a FusedScene
        (plus the finest 2D level, and optionally the intermediate bundle)."""
        s1 = self.stem(raw)
        point_sparse = self.propagate(point_feats, centers, s1)
        levels = self.pyramid(s1, point_sparse)
        maps = self.recover(taps)
        bundle = FusionBundle(levels, [], [])
        fused = []
        for st, fmap, apif in zip(levels, maps, self.apif):
            proj_feats, n_vis = project_sample(st, fmap, views)
            fused_feats, joined_feats = apif(st.feats, proj_feats)
            bundle.projected.append(proj_feats)
            bundle.visibility.append(n_vis)
            bundle.joined.append(joined_feats)
            bundle.fused.append(fused_feats)
            fused.append(fused_feats)
        feats, keep = self.neck(fused, [st.coords for st in levels], self.cfg.prune_ratio)
        finest = levels[0]
        out = FusedScene(feats, finest.centers[keep], finest.coords[keep])
        if return_bundle:
            return out, maps[0], bundle
        return out, maps[0]


class TokenFusion(Module):
    """Fallback without geometric recovery: each point token is concatenated with
    the mean image token and linearly mapped; anchors are the token centers."""

    def __init__(self, d_token: int, channels: int, rng):
        self.fuse = Linear(2 * d_token, channels, rng)
        self.image = Linear(d_token, channels, rng)

    def forward(self, point_feats: Tensor, centers: np.ndarray, image_tokens: Tensor):
        body = image_tokens[:, 1:, :]
        v, l, d = body.shape
        pooled = mean(reshape(body, (v * l, d)), axis=0, keepdims=True)
        ones = np.ones((point_feats.shape[0], 1), dtype=point_feats.dtype)
        feats = relu(self.fuse(concat([point_feats, pooled * ones], axis=1)))
        img = self.image(reshape(body, (v * l, d)))
        return FusedScene(feats, centers), img


def flatten_map(fmap: Tensor) -> Tensor:
    """(V, C, H, W) -> (V*H*W, C) tokens."""
    v, c, h, w = fmap.shape
    return reshape(transpose(fmap, (0, 2, 3, 1)), (v * h * w, c))


def l2norm(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return x / sqrt(sum_(x * x, axis=axis, keepdims=True) + eps)
