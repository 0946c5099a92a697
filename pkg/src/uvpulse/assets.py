"""Mesh assets: tessellation, canonical UV layout and canonical 3D face proxy.

The shipped assets describe an oval, ellipsoidal face proxy sampled on an
18 x 26 vertex grid (468 vertices, 850 triangles). Any 468-vertex asset set
with the same file layout can be swapped in through ``UVPULSE_ASSET_DIR``.

File layout (whitespace separated, ``#`` comments allowed):

``tessellation.txt``    one ``a b c`` vertex-index triple per row
``canonical_uv.txt``    468 ``u v`` rows in [0, 1]
``canonical_mesh.txt``  468 ``x y z`` rows (unit scale, centred at the origin)
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .mesh_geometry import N_LANDMARKS, CanonicalUV, Tessellation, check_winding

ASSET_ENV = "UVPULSE_ASSET_DIR"
PACKAGE_ASSETS = Path(__file__).parent / "assets"

GRID_COLS = 18
GRID_ROWS = 26
MAX_YAW_DEG = 75.0
MAX_PITCH_DEG = 55.0
SEMI_AXES = (0.8, 1.0, 0.7)


@dataclass(frozen=True)
class MeshAssets:
    canonical: np.ndarray
    tess: Tessellation
    uv: CanonicalUV


def build_face_proxy():
    """Generate the oval face-proxy mesh.

    Returns ``(points, triangles, uv)``; rows of the grid narrow towards the
    chin and forehead so the UV atlas is oval rather than square.
    """
    c = np.arange(GRID_COLS) / (GRID_COLS - 1) * 2 - 1
    r = np.arange(GRID_ROWS) / (GRID_ROWS - 1) * 2 - 1
    s, t = np.meshgrid(c, r)
    width = 0.55 + 0.45 * np.sqrt(1 - t**2)
    u = 0.5 + 0.47 * width * s
    v = 0.5 + 0.47 * t
    lon = np.radians(MAX_YAW_DEG) * width * s
    lat = np.radians(MAX_PITCH_DEG) * t
    a, b, cz = SEMI_AXES
    x = a * np.sin(lon) * np.cos(lat)
    y = b * np.sin(lat)
    z = -cz * np.cos(lon) * np.cos(lat)
    points = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    points[:, 2] -= points[:, 2].mean()
    uv = np.column_stack([u.ravel(), v.ravel()])

    tris = []
    for row in range(GRID_ROWS - 1):
        for col in range(GRID_COLS - 1):
            A = row * GRID_COLS + col
            B, C, D = A + 1, A + GRID_COLS, A + GRID_COLS + 1
            tris.append((A, C, B))
            tris.append((B, C, D))
    return points, np.array(tris, dtype=np.int64), uv


def write_assets(directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    points, tris, uv = build_face_proxy()
    np.savetxt(directory / "tessellation.txt", tris, fmt="%d",
               header="triangle vertex indices (a b c), outward winding")
    np.savetxt(directory / "canonical_uv.txt", uv, fmt="%.10f", header="u v")
    np.savetxt(directory / "canonical_mesh.txt", points, fmt="%.10f", header="x y z")


def asset_dir(path=None) -> Path:
    if path is not None:
        return Path(path)
    env = os.environ.get(ASSET_ENV)
    return Path(env) if env else PACKAGE_ASSETS


def read_tessellation(path) -> Tessellation:
    tri = np.loadtxt(path, dtype=np.int64, ndmin=2)
    return Tessellation(tri)


def read_canonical_uv(path) -> CanonicalUV:
    return CanonicalUV(np.loadtxt(path, dtype=np.float64, ndmin=2))


def read_canonical_mesh(path) -> np.ndarray:
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if pts.shape != (N_LANDMARKS, 3):
        raise ValueError(f"{path}: expected {N_LANDMARKS} rows of x y z, got {pts.shape}")
    return pts


@lru_cache(maxsize=4)
def _load(directory: str) -> MeshAssets:
    d = Path(directory)
    canonical = read_canonical_mesh(d / "canonical_mesh.txt")
    tess = check_winding(canonical, read_tessellation(d / "tessellation.txt"))
    return MeshAssets(canonical, tess, read_canonical_uv(d / "canonical_uv.txt"))


def load_assets(path=None) -> MeshAssets:
    """Load (and winding-check) the mesh assets from ``path``, the env dir or the package."""
    return _load(str(asset_dir(path).resolve()))


def fingerprint(assets: MeshAssets) -> str:
    """Short content hash of the mesh assets, recorded in run provenance."""
    h = hashlib.sha1()
    for arr in (assets.canonical, assets.tess.oriented, assets.uv.uv):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]
