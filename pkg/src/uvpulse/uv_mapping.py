"""Image-space to UV texture-space warping and orientation masking.

The warp is evaluated by inverse mapping: every texel centre of the UV grid
is located in its UV triangle, its barycentric coordinates are carried over
to the matching image-space triangle and the source frame is sampled
bilinearly there. Because the UV layout is fixed, the texel -> (triangle,
barycentric) table is computed once per ``(tessellation, uv, size)`` and
reused for every frame.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .mesh_geometry import CanonicalUV, Tessellation, VertexOrientation

DEFAULT_UV_SIZE = 128
ANGLE_SENTINEL = 180.0
# texel centres within this barycentric margin of an edge count as inside
EDGE_TOL = 1e-9


class UVMappingError(ValueError):
    pass


@dataclass
class UVFrame:
    texels: np.ndarray
    coverage: np.ndarray

    @property
    def size(self) -> int:
        return self.coverage.shape[0]


@dataclass
class AngleFrame:
    theta_uv: np.ndarray
    coverage: np.ndarray


@dataclass
class OrientationMask:
    keep: np.ndarray
    threshold_deg: float


def barycentric(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of ``points`` (N, 2) w.r.t. triangles ``tri`` (N, 3, 2)."""
    p0, p1, p2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1, e2, d = p1 - p0, p2 - p0, points - p0
    denom = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    l1 = (d[:, 0] * e2[:, 1] - d[:, 1] * e2[:, 0]) / denom
    l2 = (e1[:, 0] * d[:, 1] - e1[:, 1] * d[:, 0]) / denom
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def rasterize_triangles(vertices: np.ndarray, triangles: np.ndarray, shape, order=None):
    """Find, for every pixel centre of a ``shape`` grid, the triangle containing it.

    ``vertices`` are ``(x, y)`` pixel coordinates. Pixels covered by several
    triangles go to the one ranked first by ``order`` (a per-triangle sort key,
    lowest wins; default: triangle index). Triangles with zero area on the
    grid are skipped.

    Returns ``(tri_index, bary, n_hits)`` where ``tri_index`` is -1 for
    uncovered pixels, ``bary`` holds the barycentric weights and ``n_hits``
    counts how many triangles contained each pixel centre.
    """
    h, w = shape
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    tri_index = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    n_hits = np.zeros((h, w), dtype=np.int64)
    if len(triangles) == 0:
        return tri_index, bary, n_hits

    corners = vertices[triangles]
    cx, cy = corners[:, :, 0], corners[:, :, 1]
    ex1, ey1 = cx[:, 1] - cx[:, 0], cy[:, 1] - cy[:, 0]
    ex2, ey2 = cx[:, 2] - cx[:, 0], cy[:, 2] - cy[:, 0]
    area2 = ex1 * ey2 - ey1 * ex2

    x0 = np.maximum(np.floor(cx.min(axis=1)), 0).astype(np.int64)
    y0 = np.maximum(np.floor(cy.min(axis=1)), 0).astype(np.int64)
    x1 = np.minimum(np.ceil(cx.max(axis=1)), w - 1).astype(np.int64)
    y1 = np.minimum(np.ceil(cy.max(axis=1)), h - 1).astype(np.int64)
    usable = (np.abs(area2) > 1e-12) & (x1 >= x0) & (y1 >= y0)
    # candidate pairs are generated in priority order so the first hit per pixel wins
    rank = np.arange(len(triangles)) if order is None else np.argsort(np.asarray(order), kind="stable")
    idx = rank[usable[rank]]
    if idx.size == 0:
        return tri_index, bary, n_hits

    bw = x1[idx] - x0[idx] + 1
    counts = bw * (y1[idx] - y0[idx] + 1)
    total = int(counts.sum())
    pair = np.repeat(np.arange(idx.size), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    bw_r = bw[pair]
    owner = idx[pair]
    px = x0[owner] + local % bw_r
    py = y0[owner] + local // bw_r

    dx = px - cx[owner, 0]
    dy = py - cy[owner, 0]
    inv = 1.0 / area2[owner]
    l1 = (dx * ey2[owner] - dy * ex2[owner]) * inv
    l2 = (ex1[owner] * dy - ey1[owner] * dx) * inv
    l0 = 1.0 - l1 - l2
    inside = (l0 >= -EDGE_TOL) & (l1 >= -EDGE_TOL) & (l2 >= -EDGE_TOL)
    flat = (py * w + px)[inside]
    n_hits = np.bincount(flat, minlength=h * w).reshape(h, w)

    _, first = np.unique(flat, return_index=True)
    sel = np.flatnonzero(inside)[first]
    f = flat[first]
    lam = np.clip(np.column_stack([l0[sel], l1[sel], l2[sel]]), 0.0, 1.0)
    lam /= lam.sum(axis=1, keepdims=True)
    tri_index.ravel()[f] = owner[sel]
    bary.reshape(-1, 3)[f] = lam
    return tri_index, bary, n_hits


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``image`` (H, W[, C]) at float pixel positions, clamping to the edge."""
    h, w = image.shape[:2]
    x = np.clip(x, 0.0, w - 1)
    y = np.clip(y, 0.0, h - 1)
    xi = np.minimum(x.astype(np.int64), w - 1)
    yi = np.minimum(y.astype(np.int64), h - 1)
    fx = x - xi
    fy = y - yi
    dx = (xi < w - 1).astype(np.int64)
    dy = np.where(yi < h - 1, w, 0)
    flat = image.reshape(h * w, -1)
    i00 = yi * w + xi
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
        take = lambda ix: flat[ix].astype(np.float64, copy=False)  # noqa: E731
    else:
        take = lambda ix: flat[ix, 0].astype(np.float64, copy=False)  # noqa: E731
    top = take(i00) * (1 - fx) + take(i00 + dx) * fx
    bot = take(i00 + dy) * (1 - fx) + take(i00 + dy + dx) * fx
    return top * (1 - fy) + bot * fy


class UVRasterizer:
    """Precomputed texel -> triangle lookup for a fixed UV layout."""

    def __init__(self, tess: Tessellation, canonical_uv: CanonicalUV, size: int = DEFAULT_UV_SIZE):
        if size < 2:
            raise UVMappingError(f"UV size must be >= 2, got {size}")
        self.tess = tess
        self.size = size
        tri_index, bary, n_hits = rasterize_triangles(
            canonical_uv.pixel_coords(size), tess.triangles, (size, size)
        )
        self.coverage = tri_index >= 0
        if not self.coverage.any():
            raise UVMappingError("UV layout covers no texels (all triangles degenerate?)")
        self.tri_index = tri_index
        self.bary = bary
        self.n_hits = n_hits
        self._rows, self._cols = np.nonzero(self.coverage)
        self._corner_ids = tess.triangles[tri_index[self._rows, self._cols]]
        self._weights = bary[self._rows, self._cols]

    def image_positions(self, pts2d: np.ndarray) -> np.ndarray:
        """Image-space ``(x, y)`` of every covered texel, shape (N, 2)."""
        pts2d = np.asarray(pts2d, dtype=np.float64)
        return np.einsum("nk,nkd->nd", self._weights, pts2d[self._corner_ids])

    def texture(self, src_frame: np.ndarray, pts2d: np.ndarray) -> UVFrame:
        xy = self.image_positions(pts2d)
        samples = bilinear_sample(src_frame, xy[:, 0], xy[:, 1])
        shape = (self.size, self.size) + src_frame.shape[2:]
        texels = np.zeros(shape)
        texels[self._rows, self._cols] = samples
        return UVFrame(texels, self.coverage.copy())

    def angles(self, orientation: VertexOrientation) -> AngleFrame:
        theta = np.asarray(orientation.angles_deg, dtype=np.float64)
        values = np.einsum("nk,nk->n", self._weights, theta[self._corner_ids])
        out = np.full((self.size, self.size), ANGLE_SENTINEL)
        out[self._rows, self._cols] = values
        return AngleFrame(out, self.coverage.copy())


def _fingerprint(tess: Tessellation, canonical_uv: CanonicalUV) -> str:
    h = hashlib.sha1(tess.triangles.tobytes())
    h.update(canonical_uv.uv.tobytes())
    return h.hexdigest()


_RASTERIZERS: dict = {}


def get_rasterizer(tess: Tessellation, canonical_uv: CanonicalUV, size: int = DEFAULT_UV_SIZE) -> UVRasterizer:
    key = (_fingerprint(tess, canonical_uv), size)
    if key not in _RASTERIZERS:
        if len(_RASTERIZERS) > 16:
            _RASTERIZERS.clear()
        _RASTERIZERS[key] = UVRasterizer(tess, canonical_uv, size)
    return _RASTERIZERS[key]


def rasterize_uv_texture(src_frame, pts2d, tess, canonical_uv, size=DEFAULT_UV_SIZE) -> UVFrame:
    """Warp ``src_frame`` (H, W, C) into the UV texture grid; uncovered texels are 0."""
    return get_rasterizer(tess, canonical_uv, size).texture(np.asarray(src_frame), pts2d)


def rasterize_angle_frame(orientation, tess, canonical_uv, size=DEFAULT_UV_SIZE) -> AngleFrame:
    """Interpolate vertex camera angles linearly over each UV triangle."""
    return get_rasterizer(tess, canonical_uv, size).angles(orientation)


def orientation_mask(angle: AngleFrame, threshold_deg: float) -> OrientationMask:
    if not 0 < threshold_deg <= 180:
        raise UVMappingError(f"threshold must be in (0, 180], got {threshold_deg}")
    return OrientationMask(angle.coverage & (angle.theta_uv < threshold_deg), float(threshold_deg))


def apply_mask(frame: UVFrame, mask: OrientationMask) -> UVFrame:
    if mask.keep.shape != frame.coverage.shape:
        raise UVMappingError(f"mask shape {mask.keep.shape} does not match frame {frame.coverage.shape}")
    keep = mask.keep
    texels = frame.texels * (keep[..., None] if frame.texels.ndim == 3 else keep)
    return UVFrame(texels, keep.copy())


def angle_to_uint8(angle: AngleFrame) -> np.ndarray:
    """Scale 0..180 degrees to 0..255 for image dumps."""
    return np.round(np.clip(angle.theta_uv, 0, 180) / 180.0 * 255).astype(np.uint8)


def texels_to_uint8(frame: UVFrame) -> np.ndarray:
    return np.round(np.clip(frame.texels, 0, 255)).astype(np.uint8)
