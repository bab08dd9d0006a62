"""Graph-based superpixel segmentation and plane-region extraction.

Implements the classic efficient graph segmentation: Gaussian pre-smooth,
8-connected grid graph with Euclidean RGB edge weights, Kruskal-order
union-find with merge threshold ``tau(C) = k / |C|``, then a second pass
merging components smaller than ``min_size``. Ties in the edge ordering
are broken by row-major endpoint indices so results are identical across
platforms.

Large surviving regions are treated as planar for the geometry losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "LabelMap",
    "PlaneRegion",
    "DegenerateRegion",
    "felzenszwalb",
    "extract_planes",
    "sample_plane_quad",
]


class DegenerateRegion(ValueError):
    """Region too small or too collinear to span a plane."""


@dataclass
class LabelMap:
    """Per-pixel region ids (contiguous, 0..R-1) with region pixel counts."""

    labels: np.ndarray  # (H, W) int
    region_sizes: np.ndarray  # (R,)

    @property
    def n_regions(self) -> int:
        return len(self.region_sizes)

    def validate(self, require_4connected: bool = True) -> None:
        labels = self.labels
        ids = np.unique(labels)
        if not np.array_equal(ids, np.arange(self.n_regions)):
            raise ValueError("region ids are not contiguous from 0")
        if int(self.region_sizes.sum()) != labels.size:
            raise ValueError("region sizes do not cover the image")
        if not np.array_equal(np.bincount(labels.ravel()), self.region_sizes):
            raise ValueError("region sizes inconsistent with labels")
        if require_4connected:
            for rid in ids:
                _, n = ndimage.label(labels == rid)
                if n != 1:
                    raise ValueError(f"region {rid} is not 4-connected")


@dataclass
class PlaneRegion:
    """A superpixel large enough to be treated as a plane."""

    region_id: int
    pixels: np.ndarray  # (n, 2) as (u, v)
    area: int


class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n)
        self.size = np.ones(n, dtype=np.int64)
        self.internal = np.zeros(n)  # max weight inside each component's MST

    def find(self, x: int) -> int:
        root = x
        parent = self.parent
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:  # path compression
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        return a


def _grid_edges(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """8-connectivity edge list as (a, b) row-major pixel indices."""
    idx = np.arange(h * w).reshape(h, w)
    pairs = [
        (idx[:, :-1], idx[:, 1:]),  # right
        (idx[:-1, :], idx[1:, :]),  # down
        (idx[:-1, :-1], idx[1:, 1:]),  # down-right
        (idx[1:, :-1], idx[:-1, 1:]),  # up-right
    ]
    a = np.concatenate([p.ravel() for p, _ in pairs])
    b = np.concatenate([q.ravel() for _, q in pairs])
    return a, b


def felzenszwalb(
    image: np.ndarray,
    k: float = 150.0,
    min_size: int = 50,
    sigma: float = 0.8,
    relabel_4connected: bool = True,
) -> LabelMap:
    """Segment an RGB (or grayscale) image in [0, 1].

    ``k`` follows the published 0..255 convention (it is divided by 255
    internally, as reference implementations do), so the usual defaults
    carry over. With ``relabel_4connected`` the union-find output (which
    may be only 8-connected) is split into 4-connected components and
    relabeled contiguously in row-major first-occurrence order.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValueError("image is empty")
    if img.ndim == 2:
        img = img[..., None]
    k = k / 255.0
    h, w = img.shape[:2]
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=[sigma, sigma, 0])

    a, b = _grid_edges(h, w)
    flat = img.reshape(-1, img.shape[2])
    costs = np.sqrt(np.sum((flat[a] - flat[b]) ** 2, axis=1))
    # deterministic Kruskal order: cost, then endpoint indices
    order = np.lexsort((b, a, costs))
    a, b, costs = a[order], b[order], costs[order]

    uf = _UnionFind(h * w)
    for cost, ea, eb in zip(costs, a, b):
        ra, rb = uf.find(ea), uf.find(eb)
        if ra == rb:
            continue
        if cost <= min(uf.internal[ra] + k / uf.size[ra], uf.internal[rb] + k / uf.size[rb]):
            root = uf.union(ra, rb)
            uf.internal[root] = cost

    # second pass: absorb components smaller than min_size
    for ea, eb in zip(a, b):
        ra, rb = uf.find(ea), uf.find(eb)
        if ra != rb and (uf.size[ra] < min_size or uf.size[rb] < min_size):
            uf.union(ra, rb)

    roots = np.array([uf.find(i) for i in range(h * w)])
    labels = _contiguous(roots).reshape(h, w)
    if relabel_4connected:
        labels = _split_4connected(labels)
    return LabelMap(labels, np.bincount(labels.ravel()))


def _contiguous(labels: np.ndarray) -> np.ndarray:
    """Relabel to 0..R-1 in order of first (row-major) occurrence."""
    _, first_index, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first_index))
    return rank[inverse]

def _split_4connected(labels: np.ndarray) -> np.ndarray:
    out = np.full(labels.shape, -1, dtype=np.int64)
    next_id = 0
    order: list[tuple[int, int]] = []  # (first row-major index, temp id)
    for rid in np.unique(labels):
        comp, n = ndimage.label(labels == rid)
        for c in range(1, n + 1):
            mask = comp == c
            out[mask] = next_id
            order.append((int(np.flatnonzero(mask.ravel())[0]), next_id))
            next_id += 1
    # renumber by first occurrence so ids scan row-major
    remap = np.empty(next_id, dtype=np.int64)
    for new_id, (_, tmp_id) in enumerate(sorted(order)):
        remap[tmp_id] = new_id
    return remap[out]


def extract_planes(label_map: LabelMap, area_threshold: int) -> list[PlaneRegion]:
    """Regions with area >= threshold, largest first (ties by region id)."""
    h, w = label_map.labels.shape
    flat = label_map.labels.ravel()
    order = np.argsort(flat, kind="stable")  # flat positions grouped by region
    bounds = np.searchsorted(flat[order], np.arange(label_map.n_regions + 1))
    regions = []
    for rid in range(label_map.n_regions):
        area = int(label_map.region_sizes[rid])
        if area < area_threshold:
            continue
        pos = order[bounds[rid] : bounds[rid + 1]]
        pixels = np.stack([pos % w, pos // w], axis=1)  # (u, v)
        regions.append(PlaneRegion(rid, pixels, area))
    regions.sort(key=lambda r: (-r.area, r.region_id))
    return regions


def sample_plane_quad(region: PlaneRegion, rng: np.random.Generator) -> np.ndarray:
    """Pick 4 distinct pixels whose first three are not collinear.

    Retries the draw up to 16 times; a region that cannot produce a
    non-degenerate triangle (for example a 1-pixel-wide strip) raises
    :class:`DegenerateRegion`.
    """
    if region.area < 4:
        raise DegenerateRegion(f"region {region.region_id} has fewer than 4 pixels")
    for _ in range(16):
        pick = rng.choice(region.area, size=4, replace=False)
        quad = region.pixels[pick].astype(np.float64)
        a, b, c = quad[0], quad[1], quad[2]
        area2 = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if area2 > 2e-6:  # twice the triangle area
            return quad
    raise DegenerateRegion(f"region {region.region_id} kept sampling collinear triples")
