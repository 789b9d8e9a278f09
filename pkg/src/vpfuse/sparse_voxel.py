"""Sparse voxel grids: voxelization, sparse 3D convolution, voxel query and
RoI pooling of voxel features onto query points.

Integer voxel coordinates are ``floor((p - origin) / voxel_size)`` per axis,
so a voxel owns the half-open interval [lo, lo + size) on every axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import FormatError, MissingWeight, ShapeError, TruncatedInput
from .geometry import Box3D, rotation_z
from .kitti_io import PointCloud, WeightBundle
from .virtual_points import VirtualPointSet, grid_offsets

GRID_MAGIC = b"VPFG1\n"
_KEY_BITS = 21
_KEY_BIAS = 1 << (_KEY_BITS - 1)
_DENSE_BLOCK_LIMIT = 4_000_000


@dataclass(frozen=True)
class VoxelizationConfig:
    voxel_size: tuple = (0.05, 0.05, 0.1)
    range: tuple = ((0.0, 70.0), (-40.0, 40.0), (-3.0, 1.0))
    origin: tuple | None = None
    max_points_per_voxel: int = 5
    max_voxels: int = 40000

    def __post_init__(self):
        vs = tuple(float(v) for v in self.voxel_size)
        rng = tuple((float(lo), float(hi)) for lo, hi in self.range)
        if len(vs) != 3 or min(vs) <= 0:
            raise ValueError(f"voxel_size must be three positive values, got {self.voxel_size}")
        if len(rng) != 3 or any(lo >= hi for lo, hi in rng):
            raise ValueError(f"invalid range {self.range}")
        if self.max_points_per_voxel < 1 or self.max_voxels < 1:
            raise ValueError("voxel caps must be >= 1")
        origin = tuple(lo for lo, _ in rng) if self.origin is None else tuple(float(v) for v in self.origin)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "range", rng)
        object.__setattr__(self, "origin", origin)


@dataclass(frozen=True)
class QueryConfig:
    """Per-scale half-widths (in cells) of the query box and neighbor caps."""

    ranges: tuple = ((2, 2, 2), (4, 4, 4))
    K: tuple | int = (16, 16)

    def __post_init__(self):
        ranges = tuple(tuple(int(r) for r in rr) for rr in self.ranges)
        K = self.K
        K = (int(K),) * len(ranges) if np.isscalar(K) else tuple(int(k) for k in K)
        if len(K) != len(ranges):
            raise ValueError("need one K per query scale")
        if min(K) < 1:
            raise ValueError("K must be >= 1")
        if any(r < 0 for rr in ranges for r in rr):
            raise ValueError("query ranges must be non-negative")
        object.__setattr__(self, "ranges", ranges)
        object.__setattr__(self, "K", K)


class Neighbor(NamedTuple):
    coord: tuple
    feature: np.ndarray
    location: np.ndarray


def _keys(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64) + _KEY_BIAS
    return (c[..., 0] << (2 * _KEY_BITS)) | (c[..., 1] << _KEY_BITS) | c[..., 2]


class SparseVoxelGrid:
    """Immutable map from integer voxel coordinates to C-dim features."""

    def __init__(self, coords, features, voxel_size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), counts=None):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or len(features) != len(coords):
            if len(coords) == 0 and features.size == 0:
                features = features.reshape(0, features.shape[-1] if features.ndim == 2 else 0)
            else:
                raise ShapeError(f"features {features.shape} do not match {len(coords)} coordinates")
        if np.abs(coords).max(initial=0) >= _KEY_BIAS:
            raise ShapeError("voxel coordinates out of supported range")
        keys = _keys(coords)
        order = np.argsort(keys, kind="stable")
        sk = keys[order]
        if len(sk) > 1 and np.any(sk[1:] == sk[:-1]):
            raise ShapeError("duplicate voxel coordinates")
        for a in (coords, features, keys, order, sk):
            a.setflags(write=False)
        self.coords = coords
        self.features = features
        self.voxel_size = np.array(voxel_size, dtype=np.float64).reshape(3)
        self.origin = np.array(origin, dtype=np.float64).reshape(3)
        self.counts = None if counts is None else np.asarray(counts, dtype=np.int64)
        self._sorted_keys = sk
        self._order = order

    @classmethod
    def empty(cls, channels: int, voxel_size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> "SparseVoxelGrid":
        return cls(np.zeros((0, 3), np.int64), np.zeros((0, channels)), voxel_size, origin)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return len(self.coords)

    def __contains__(self, coord):
        return self.lookup(np.asarray(coord).reshape(1, 3))[0] >= 0

    def feature_at(self, coord) -> np.ndarray | None:
        i = self.lookup(np.asarray(coord).reshape(1, 3))[0]
        return None if i < 0 else self.features[i]

    def as_dict(self) -> dict:
        return {tuple(c): f for c, f in zip(self.coords.tolist(), self.features)}

    def with_features(self, features) -> "SparseVoxelGrid":
        return SparseVoxelGrid(self.coords, features, self.voxel_size, self.origin)

    def cell_of(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.floor((p - self.origin) / self.voxel_size).astype(np.int64)

    def centers(self, coords=None) -> np.ndarray:
        c = self.coords if coords is None else np.asarray(coords)
        return self.origin + (c + 0.5) * self.voxel_size

    def lookup(self, coords) -> np.ndarray:
        """Row index of each coordinate, -1 where the voxel is inactive."""
        coords = np.asarray(coords, dtype=np.int64)
        shape = coords.shape[:-1]
        flat = coords.reshape(-1, 3)
        out = np.full(len(flat), -1, dtype=np.int64)
        if len(self) == 0 or len(flat) == 0:
            return out.reshape(shape)
        inside = np.all(np.abs(flat) < _KEY_BIAS, axis=1)
        k = _keys(flat[inside])
        pos = np.searchsorted(self._sorted_keys, k)
        pos = np.minimum(pos, len(self._sorted_keys) - 1)
        hit = self._sorted_keys[pos] == k
        res = np.full(len(k), -1, dtype=np.int64)
        res[hit] = self._order[pos[hit]]
        out[inside] = res
        return out.reshape(shape)

    def dense_index(self, lo, hi) -> np.ndarray:
        """Dense block of row indices covering cells lo..hi inclusive (-1 = empty)."""
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        shape = tuple((hi - lo + 1).tolist())
        block = np.full(shape, -1, dtype=np.int64)
        # keys are x-major, so the x slab is one contiguous run of the sorted keys
        a, b = np.searchsorted(self._sorted_keys, _keys(np.array([[lo[0], -_KEY_BIAS, -_KEY_BIAS],
                                                                   [hi[0] + 1, -_KEY_BIAS, -_KEY_BIAS]])))
        rows = self._order[a:b]
        c = self.coords[rows] - lo
        sel = np.all((c >= 0) & (c < np.asarray(shape)), axis=1)
        c = c[sel]
        block[c[:, 0], c[:, 1], c[:, 2]] = rows[sel]
        return block

    def lookup_block(self, coords) -> np.ndarray:
        """Same result as :meth:`lookup`, via a dense block when it is small."""
        coords = np.asarray(coords, dtype=np.int64)
        flat = coords.reshape(-1, 3)
        if len(flat) == 0 or len(self) == 0:
            return np.full(coords.shape[:-1], -1, dtype=np.int64)
        lo, hi = flat.min(axis=0), flat.max(axis=0)
        if np.prod((hi - lo + 1).astype(np.float64)) > _DENSE_BLOCK_LIMIT:
            return self.lookup(coords)
        block = self.dense_index(lo, hi)
        c = flat - lo
        return block[c[:, 0], c[:, 1], c[:, 2]].reshape(coords.shape[:-1])

    def to_dense(self, lo, shape) -> np.ndarray:
        lo = np.asarray(lo, dtype=np.int64)
        dense = np.zeros(tuple(shape) + (self.channels,))
        c = self.coords - lo
        ok = np.all((c >= 0) & (c < np.asarray(shape)), axis=1)
        dense[c[ok, 0], c[ok, 1], c[ok, 2]] = self.features[ok]
        return dense


# ------------------------------------------------------------- voxelization


def _voxelize(xyz: np.ndarray, feats: np.ndarray, cfg: VoxelizationConfig) -> SparseVoxelGrid:
    lo = np.array([r[0] for r in cfg.range])
    hi = np.array([r[1] for r in cfg.range])
    keep = np.all((xyz >= lo) & (xyz < hi), axis=1)
    xyz, feats = xyz[keep], feats[keep]
    C = feats.shape[1]
    if len(xyz) == 0:
        return SparseVoxelGrid.empty(C, cfg.voxel_size, cfg.origin)
    cells = np.floor((xyz - np.array(cfg.origin)) / np.array(cfg.voxel_size)).astype(np.int64)
    keys = _keys(cells)
    uniq, first, inverse, counts = np.unique(keys, return_index=True, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    # voxel ids in first-seen order
    seen_order = np.argsort(first, kind="stable")
    rank_of = np.empty_like(seen_order)
    rank_of[seen_order] = np.arange(len(seen_order))
    vid = rank_of[inverse]
    # position of each point among the points of its voxel, in input order
    by_voxel = np.argsort(vid, kind="stable")
    group_start = np.zeros(len(uniq), dtype=np.int64)
    group_start[1:] = np.cumsum(np.bincount(vid, minlength=len(uniq)))[:-1]
    within = np.empty(len(vid), dtype=np.int64)
    within[by_voxel] = np.arange(len(vid)) - group_start[vid[by_voxel]]
    take = (within < cfg.max_points_per_voxel) & (vid < cfg.max_voxels)
    n_vox = min(len(uniq), cfg.max_voxels)
    sums = np.zeros((n_vox, C))
    np.add.at(sums, vid[take], feats[take])
    n = np.bincount(vid[take], minlength=n_vox).astype(np.float64)
    coords = cells[first[seen_order[:n_vox]]]
    return SparseVoxelGrid(coords, sums / n[:, None], cfg.voxel_size, cfg.origin,
                           counts=counts[seen_order[:n_vox]])


def voxelize(pc: PointCloud, cfg: VoxelizationConfig) -> SparseVoxelGrid:
    """Mean (x, y, z, intensity) of the first ``max_points_per_voxel`` points per voxel.

    Voxels are kept in first-seen order up to ``max_voxels``.  ``counts`` on
    the result holds each voxel's point count before the per-voxel cap.
    """
    pts = np.asarray(getattr(pc, "points", pc), dtype=np.float64).reshape(-1, 4)
    return _voxelize(pts[:, :3], pts, cfg)


def voxelize_virtual(vps: VirtualPointSet | Sequence[VirtualPointSet], cfg: VoxelizationConfig) -> SparseVoxelGrid:
    """Voxelize assembled virtual-point features; collisions are averaged."""
    sets = [vps] if isinstance(vps, VirtualPointSet) else list(vps)
    if not sets:
        raise ValueError("no virtual point sets")
    for s in sets:
        if s.features is None:
            raise ValueError("virtual points have no features; run assemble_features first")
    xyz = np.concatenate([s.positions for s in sets])
    feats = np.concatenate([s.features for s in sets])
    return _voxelize(xyz, feats, cfg)


# ------------------------------------------------------------- sparse conv

_OFFSETS = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)], dtype=np.int64)


def _output_sites(coords: np.ndarray, submanifold: bool, stride: int) -> np.ndarray:
    if submanifold:
        return coords
    cand = (coords[:, None, :] - _OFFSETS[None, :, :]).reshape(-1, 3)
    if stride > 1:
        cand = cand[np.all(cand % stride == 0, axis=1)] // stride
    keys = _keys(cand)
    _, idx = np.unique(keys, return_index=True)
    return cand[idx]


def sparse_conv3d(grid: SparseVoxelGrid, kernel, submanifold: bool = False, activation: str = "relu",
                  bias=None, stride: int = 1) -> SparseVoxelGrid:
    """3x3x3 sparse convolution.

    ``kernel`` is (C_out, C_in, 3, 3, 3); entry ``[:, :, a, b, c]`` weighs the
    input at offset (a-1, b-1, c-1) from ``stride * y``.  Regular mode emits
    every site with at least one active input in its stencil (sorted by
    coordinate); submanifold mode keeps the input sites and order.
    """
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 5 or k.shape[2:] != (3, 3, 3):
        raise ShapeError(f"kernel must be (C_out, C_in, 3, 3, 3), got {k.shape}")
    if k.shape[1] != grid.channels:
        raise ShapeError(f"kernel expects {k.shape[1]} channels, grid has {grid.channels}")
    if submanifold and stride != 1:
        raise ValueError("submanifold convolution requires stride 1")
    if activation not in ("relu", "none"):
        raise ValueError(f"unknown activation {activation!r}")
    vs = grid.voxel_size * stride
    origin = grid.origin - 0.5 * (stride - 1) * grid.voxel_size
    if len(grid) == 0:
        return SparseVoxelGrid.empty(k.shape[0], vs, origin)
    out_coords = _output_sites(grid.coords, submanifold, stride)
    out = np.zeros((len(out_coords), k.shape[0]))
    base = out_coords * stride
    for off in _OFFSETS:
        src = grid.lookup_block(base + off)
        ok = src >= 0
        if ok.any():
            a, b, c = off + 1
            out[ok] += grid.features[src[ok]] @ k[:, :, a, b, c].T
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(-1)
    if activation == "relu":
        np.maximum(out, 0.0, out=out)
    return SparseVoxelGrid(out_coords, out, vs, origin)


def spconv_stack(grid: SparseVoxelGrid, weights: WeightBundle, n_layers: int | None = None) -> SparseVoxelGrid:
    """Sparse convolution blocks ``spconv1`` ... ``spconv6`` with ReLU.

    The first block is a regular convolution, the others submanifold.  An
    optional one-element tensor ``spconvN.stride`` turns block N into a
    strided regular convolution.  ``n_layers`` truncates the stack.
    """
    n = 6 if n_layers is None else int(n_layers)
    for i in range(1, n + 1):
        name = f"spconv{i}"
        if f"{name}.weight" not in weights:
            raise MissingWeight(f"{name}.weight")
        stride = int(weights[f"{name}.stride"].ravel()[0]) if f"{name}.stride" in weights else 1
        bias = weights[f"{name}.bias"] if f"{name}.bias" in weights else None
        subm = i > 1 and stride == 1
        grid = sparse_conv3d(grid, weights[f"{name}.weight"], subm, "relu", bias, stride)
    return grid


# ------------------------------------------------------------------- query


def _sorted_offsets(r) -> np.ndarray:
    rx, ry, rz = r
    g = np.stack(np.meshgrid(np.arange(-rx, rx + 1), np.arange(-ry, ry + 1), np.arange(-rz, rz + 1),
                             indexing="ij"), axis=-1).reshape(-1, 3)
    l1 = np.abs(g).sum(axis=1)
    # lexsort: last key is primary
    order = np.lexsort((g[:, 2], g[:, 1], g[:, 0], l1))
    return g[order]


_OFFSET_CACHE: dict = {}


def query_offsets(r) -> np.ndarray:
    """Offsets in the box |d_i| <= r_i ordered by (L1 norm, dx, dy, dz)."""
    key = tuple(int(v) for v in r)
    if key not in _OFFSET_CACHE:
        arr = _sorted_offsets(key)
        arr.setflags(write=False)
        _OFFSET_CACHE[key] = arr
    return _OFFSET_CACHE[key]


def _query_indices(grid: SparseVoxelGrid, cells: np.ndarray, r, K: int) -> np.ndarray:
    """(Q, K) row indices of the first K active voxels per query cell, -1 padded."""
    offs = query_offsets(r)
    lo = cells.min(axis=0) - np.asarray(r)
    hi = cells.max(axis=0) + np.asarray(r)
    shape = hi - lo + 1
    if len(grid) and np.prod(shape.astype(np.float64)) <= _DENSE_BLOCK_LIMIT:
        block = grid.dense_index(lo, hi).ravel()
        strides = np.array([shape[1] * shape[2], shape[2], 1])
        cand = block[((cells - lo) @ strides)[:, None] + (offs @ strides)[None, :]]
    else:
        cand = grid.lookup(cells[:, None, :] + offs[None, :, :])
    hits = cand >= 0
    rank = np.cumsum(hits, axis=1)
    take = hits & (rank <= K)
    rows, cols = np.nonzero(take)
    nbr = np.full((len(cells), K), -1, dtype=np.int64)
    nbr[rows, rank[rows, cols] - 1] = cand[rows, cols]
    return nbr


def voxel_query(grid: SparseVoxelGrid, center, qcfg: QueryConfig, scale_idx: int = 0) -> list[Neighbor]:
    """Active voxels within the per-axis range box around ``center``'s cell.

    Ordered by Manhattan distance in cells, then i, j, k; at most K results.
    """
    if not 0 <= scale_idx < len(qcfg.ranges):
        raise IndexError(f"scale {scale_idx} not configured")
    cell = grid.cell_of(center)
    nbr = _query_indices(grid, cell, qcfg.ranges[scale_idx], qcfg.K[scale_idx])[0]
    nbr = nbr[nbr >= 0]
    return [Neighbor(tuple(grid.coords[i].tolist()), grid.features[i], grid.centers(grid.coords[i]))
            for i in nbr]


# ------------------------------------------------------------- aggregation


class MLP:
    """Stack of linear layers, each followed by ReLU."""

    def __init__(self, layers):
        self.layers = [(np.asarray(w, dtype=np.float64), None if b is None else np.asarray(b, dtype=np.float64))
                       for w, b in layers]
        if not self.layers:
            raise ShapeError("MLP needs at least one layer")
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if w1.shape[1] != w0.shape[0]:
                raise ShapeError(f"layer shapes {w0.shape} -> {w1.shape} do not chain")

    @classmethod
    def from_bundle(cls, bundle, prefix: str) -> "MLP":
        layers = []
        i = 0
        while f"{prefix}.{i}.weight" in bundle:
            b = bundle[f"{prefix}.{i}.bias"] if f"{prefix}.{i}.bias" in bundle else None
            layers.append((bundle[f"{prefix}.{i}.weight"], b))
            i += 1
        if not layers:
            raise MissingWeight(f"{prefix}.0.weight")
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"MLP expects {self.in_dim} inputs, got {x.shape[-1]}")
        for w, b in self.layers:
            x = x @ w.T
            if b is not None:
                x = x + b
            x = np.maximum(x, 0.0)
        return x


def _as_mlp(m) -> MLP:
    if isinstance(m, MLP):
        return m
    if isinstance(m, (list, tuple)):
        return MLP(m)
    return MLP([(m, None)])


def aggregate(neighbors: Sequence[Neighbor], query_point, psi1, psi2) -> np.ndarray:
    """max over neighbors of psi1(location - query) + psi2(feature); zeros if none."""
    psi1, psi2 = _as_mlp(psi1), _as_mlp(psi2)
    if psi1.in_dim != 3:
        raise ShapeError(f"psi1 must take 3 inputs, takes {psi1.in_dim}")
    if psi1.out_dim != psi2.out_dim:
        raise ShapeError(f"psi1/psi2 output dims differ: {psi1.out_dim} vs {psi2.out_dim}")
    if not neighbors:
        return np.zeros(psi1.out_dim)
    loc = np.stack([n.location for n in neighbors])
    feat = np.stack([n.feature for n in neighbors])
    vals = psi1(loc - np.asarray(query_point, dtype=np.float64)) + psi2(feat)
    return vals.max(axis=0)


def pool_mlps(weights: WeightBundle, n_maps: int, n_scales: int) -> list[list[tuple[MLP, MLP]]]:
    """``pool.m{map}.s{scale}.psi1`` / ``psi2`` MLPs from a bundle."""
    return [[(MLP.from_bundle(weights, f"pool.m{m}.s{s}.psi1"), MLP.from_bundle(weights, f"pool.m{m}.s{s}.psi2"))
             for s in range(n_scales)] for m in range(n_maps)]


def _pool_map(grid: SparseVoxelGrid, queries: np.ndarray, qcfg: QueryConfig, mlps, chunk: int) -> np.ndarray:
    outs = []
    cells = grid.cell_of(queries)
    for (r, K), (psi1, psi2) in zip(zip(qcfg.ranges, qcfg.K), mlps):
        if psi1.in_dim != 3:
            raise ShapeError(f"psi1 must take 3 inputs, takes {psi1.in_dim}")
        if psi2.in_dim != grid.channels:
            raise ShapeError(f"psi2 takes {psi2.in_dim} inputs, grid has {grid.channels} channels")
        if psi1.out_dim != psi2.out_dim:
            raise ShapeError("psi1/psi2 output dims differ")
        res = np.zeros((len(queries), psi1.out_dim))
        if len(grid):
            # one proposal per chunk keeps the dense lookup block local
            nbr = np.concatenate([_query_indices(grid, cells[i:i + chunk], r, K)
                                  for i in range(0, len(cells), chunk)])
            valid = nbr >= 0
            if valid.any():
                used, inv = np.unique(nbr[valid], return_inverse=True)
                f2 = psi2(grid.features[used])
                q_idx = np.nonzero(valid)[0]
                loc = grid.centers(grid.coords[used])[inv]
                vals = np.full(nbr.shape + (psi1.out_dim,), -np.inf)
                vals[valid] = psi1(loc - queries[q_idx]) + f2[inv]
                best = vals.max(axis=1)
                has = valid.any(axis=1)
                res[has] = best[has]
        outs.append(res)
    return np.concatenate(outs, axis=1)


def roi_pool_batch(proposals: Sequence[Box3D], maps: Sequence[SparseVoxelGrid], qcfg: QueryConfig,
                   grid_res=(6, 6, 6), weights: WeightBundle | None = None, mlps=None) -> np.ndarray:
    """Pooled features for many proposals: (P, Gx*Gy*Gz*sum(C_map))."""
    if mlps is None:
        mlps = pool_mlps(weights, len(maps), len(qcfg.ranges))
    dims = [sum(p1.out_dim for p1, _ in per_map) for per_map in mlps]
    if len(set(dims)) > 1:
        raise ShapeError(f"pooled channel counts differ across maps: {dims}")
    proposals = list(proposals)
    G = int(np.prod(grid_res))
    if not proposals:
        return np.zeros((0, G * sum(dims)))
    queries = np.concatenate([generate_query_points(b, grid_res) for b in proposals])
    chunk = G
    per_map = [_pool_map(grid, queries, qcfg, mlps[m], chunk) for m, grid in enumerate(maps)]
    pooled = np.concatenate(per_map, axis=1)
    return pooled.reshape(len(proposals), -1)


def roi_pool(proposal: Box3D, maps: Sequence[SparseVoxelGrid], qcfg: QueryConfig, grid_res=(6, 6, 6),
             weights: WeightBundle | None = None, mlps=None) -> np.ndarray:
    """Pooled tensor of one proposal, query-point-major, then map, then scale."""
    return roi_pool_batch([proposal], maps, qcfg, grid_res, weights, mlps)[0]


def generate_query_points(b: Box3D, grid_res) -> np.ndarray:
    return grid_offsets(b, grid_res) @ rotation_z(b.theta).T + b.center


# -------------------------------------------------------------------- files


def format_grid(grid: SparseVoxelGrid) -> bytes:
    head = GRID_MAGIC + struct.pack("<3d3dI", *grid.origin, *grid.voxel_size, grid.channels)
    head += struct.pack("<I", len(grid))
    rec = np.zeros(len(grid), dtype=[("c", "<i4", (3,)), ("f", "<f4", (grid.channels,))])
    rec["c"] = grid.coords
    rec["f"] = grid.features
    return head + rec.tobytes()


def load_grid(data: bytes) -> SparseVoxelGrid:
    if not data.startswith(GRID_MAGIC):
        raise FormatError("sparse grid must start with VPFG1 magic")
    pos = len(GRID_MAGIC)
    hdr = struct.calcsize("<3d3dII")
    if len(data) < pos + hdr:
        raise TruncatedInput("sparse grid header truncated")
    vals = struct.unpack_from("<3d3dII", data, pos)
    origin, vs, C, n = vals[:3], vals[3:6], vals[6], vals[7]
    pos += hdr
    dt = np.dtype([("c", "<i4", (3,)), ("f", "<f4", (C,))])
    if len(data) - pos != n * dt.itemsize:
        raise TruncatedInput(f"sparse grid body has {len(data) - pos} bytes, expected {n * dt.itemsize}")
    rec = np.frombuffer(data, dtype=dt, count=n, offset=pos)
    return SparseVoxelGrid(rec["c"].astype(np.int64), rec["f"].astype(np.float64).reshape(n, C), vs, origin)
