"""Facial landmark geometry: ingestion types, mesh normals and camera angles.

Landmarks follow the 468-point face-mesh topology. Coordinates are ``(x, y, z)``
with ``x``/``y`` in image pixels (column, row; pixel centres at integer
positions) and ``z`` pointing away from the camera, so the camera normal is
``(0, 0, -1)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

N_LANDMARKS = 468


class GeometryError(ValueError):
    """Raised for invalid or degenerate landmark geometry."""


@dataclass
class LandmarkFrame:
    """Landmarks detected (or not) on one video frame."""

    frame_index: int
    detected: bool
    points: np.ndarray | None = None
    interpolated: bool = False

    def __post_init__(self):
        if self.detected:
            pts = np.asarray(self.points, dtype=np.float64)
            if pts.shape != (N_LANDMARKS, 3):
                raise GeometryError(
                    f"frame {self.frame_index}: expected ({N_LANDMARKS}, 3) points, got {pts.shape}"
                )
            if not np.all(np.isfinite(pts)):
                raise GeometryError(f"frame {self.frame_index}: non-finite landmark coordinates")
            self.points = pts
        else:
            self.points = None


@dataclass
class LandmarkSequence:
    frames: list[LandmarkFrame]
    fps: float
    partially_invalid: bool = False

    def __post_init__(self):
        if self.fps <= 0:
            raise GeometryError(f"fps must be positive, got {self.fps}")
        for prev, cur in zip(self.frames, self.frames[1:]):
            if cur.frame_index != prev.frame_index + 1:
                raise GeometryError(
                    f"frame indices must increase by 1 ({prev.frame_index} -> {cur.frame_index})"
                )

    def __len__(self):
        return len(self.frames)

    @property
    def detected(self) -> np.ndarray:
        return np.array([f.detected for f in self.frames], dtype=bool)

    @classmethod
    def from_array(cls, points: np.ndarray, fps: float, start: int = 0) -> "LandmarkSequence":
        """Build a fully detected sequence from a ``(T, 468, 3)`` array."""
        return cls([LandmarkFrame(start + i, True, p) for i, p in enumerate(points)], fps)


@dataclass(frozen=True)
class Tessellation:
    """Triangle list over the landmark indices.

    ``winding`` is +1 when triangles are stored so that the cross product of
    ``(p1 - p0) x (p2 - p0)`` points away from the face surface, -1 when the
    stored order has to be reversed.
    """

    triangles: np.ndarray
    winding: int = 1

    def __post_init__(self):
        tri = np.asarray(self.triangles, dtype=np.int64)
        if tri.ndim != 2 or tri.shape[1] != 3:
            raise GeometryError(f"triangles must have shape (M, 3), got {tri.shape}")
        if tri.min() < 0 or tri.max() >= N_LANDMARKS:
            raise GeometryError("triangle index out of range [0, 467]")
        if np.any((tri[:, 0] == tri[:, 1]) | (tri[:, 1] == tri[:, 2]) | (tri[:, 0] == tri[:, 2])):
            bad = int(np.flatnonzero((tri[:, 0] == tri[:, 1]) | (tri[:, 1] == tri[:, 2])
                                     | (tri[:, 0] == tri[:, 2]))[0])
            raise GeometryError(f"triangle {bad} repeats a vertex index")
        unused = np.setdiff1d(np.arange(N_LANDMARKS), tri.ravel())
        if unused.size:
            raise GeometryError(f"{unused.size} vertices not referenced by any triangle (first: {unused[0]})")
        if self.winding not in (1, -1):
            raise GeometryError("winding must be +1 or -1")
        tri.setflags(write=False)
        object.__setattr__(self, "triangles", tri)

    def __len__(self):
        return len(self.triangles)

    @property
    def oriented(self) -> np.ndarray:
        """Triangles in the order that yields outward normals."""
        if self.winding == 1:
            return self.triangles
        return self.triangles[:, ::-1]

    def flipped(self) -> "Tessellation":
        return dataclasses.replace(self, winding=-self.winding)


@dataclass(frozen=True)
class CanonicalUV:
    uv: np.ndarray

    def __post_init__(self):
        uv = np.asarray(self.uv, dtype=np.float64)
        if uv.shape != (N_LANDMARKS, 2):
            raise GeometryError(f"uv must have shape ({N_LANDMARKS}, 2), got {uv.shape}")
        if np.any(uv < 0) or np.any(uv > 1) or not np.all(np.isfinite(uv)):
            raise GeometryError("uv coordinates must lie in [0, 1]")
        uv.setflags(write=False)
        object.__setattr__(self, "uv", uv)

    def pixel_coords(self, size: int) -> np.ndarray:
        """Corner-anchored texel coordinates: ``x = u*(S-1)``, ``y = v*(S-1)``."""
        return self.uv * (size - 1)


@dataclass(frozen=True)
class CameraModel:
    n_cam: tuple[float, float, float] = (0.0, 0.0, -1.0)

    def __post_init__(self):
        if abs(np.linalg.norm(self.n_cam) - 1.0) > 1e-12:
            raise GeometryError("camera normal must have unit length")

    @property
    def normal(self) -> np.ndarray:
        return np.asarray(self.n_cam, dtype=np.float64)


@dataclass
class VertexOrientation:
    normals: np.ndarray
    angles_deg: np.ndarray = field(repr=False)


def project_to_image_plane(frame: LandmarkFrame) -> np.ndarray:
    """Orthographic projection of the landmarks: drop ``z``, keep ``(x, y)``."""
    if not frame.detected:
        raise GeometryError(f"frame {frame.frame_index} has no detected landmarks")
    return frame.points[:, :2].copy()


def _points_of(frame) -> np.ndarray:
    if isinstance(frame, LandmarkFrame):
        if not frame.detected:
            raise GeometryError(f"frame {frame.frame_index} has no detected landmarks")
        return frame.points
    return np.asarray(frame, dtype=np.float64)


def face_normals(frame, tess: Tessellation) -> np.ndarray:
    """Unit normal per triangle from the cross product of two edge vectors.

    ``frame`` is a :class:`LandmarkFrame` or a ``(468, 3)`` point array.
    """
    pts = _points_of(frame)
    tri = tess.oriented
    p0, p1, p2 = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n, axis=1)
    # relative test so that the check does not depend on the coordinate scale
    scale = np.maximum(np.linalg.norm(p1 - p0, axis=1) * np.linalg.norm(p2 - p0, axis=1), 1e-300)
    degenerate = norm <= 1e-12 * scale
    if np.any(degenerate):
        raise GeometryError(f"triangle {int(np.flatnonzero(degenerate)[0])} has zero area")
    return n / norm[:, None]


def _vertex_incidence(tess: Tessellation):
    tri = tess.triangles
    rows = tri.ravel()
    cols = np.repeat(np.arange(len(tri)), 3)
    return rows, cols


def vertex_orientation(
    normals: np.ndarray, tess: Tessellation, camera: CameraModel | None = None
) -> VertexOrientation:
    """Per-vertex normal (mean of adjacent unit face normals) and its camera angle."""
    camera = camera or CameraModel()
    normals = np.asarray(normals, dtype=np.float64)
    rows, cols = _vertex_incidence(tess)
    acc = np.zeros((N_LANDMARKS, 3))
    np.add.at(acc, rows, normals[cols])
    counts = np.bincount(rows, minlength=N_LANDMARKS)
    if np.any(counts == 0):
        raise GeometryError(f"vertex {int(np.flatnonzero(counts == 0)[0])} belongs to no triangle")
    mean = acc / counts[:, None]
    mag = np.linalg.norm(mean, axis=1)
    if np.any(mag < 1e-12):
        raise GeometryError(f"vertex {int(np.flatnonzero(mag < 1e-12)[0])} has a zero mean normal")
    n_v = mean / mag[:, None]
    cos = np.clip(n_v @ camera.normal, -1.0, 1.0)
    return VertexOrientation(n_v, np.degrees(np.arccos(cos)))


def frame_orientation(frame, tess: Tessellation, camera: CameraModel | None = None) -> VertexOrientation:
    return vertex_orientation(face_normals(frame, tess), tess, camera)


def check_winding(points: np.ndarray, tess: Tessellation, camera: CameraModel | None = None,
                  min_fraction: float = 0.99) -> Tessellation:
    """Return ``tess`` with a global winding flip if the canonical pose faces away.

    At least ``min_fraction`` of the face normals must make an angle below 90
    degrees with the camera normal; otherwise the winding is flipped.
    """
    camera = camera or CameraModel()
    n = face_normals(points, tess)
    if np.mean(n @ camera.normal > 0) >= min_fraction:
        return tess
    flipped = tess.flipped()
    n = face_normals(points, flipped)
    if np.mean(n @ camera.normal > 0) < min_fraction:
        raise GeometryError("canonical mesh faces neither towards nor away from the camera")
    return flipped


def interpolate_missing_landmarks(seq: LandmarkSequence, max_gap: int = 3) -> LandmarkSequence:
    """Linearly fill runs of at most ``max_gap`` undetected frames.

    Runs touching either end of the sequence, or longer than ``max_gap``, are
    left undetected and the returned sequence is marked ``partially_invalid``.
    """
    if not seq.frames:
        raise GeometryError("empty landmark sequence")
    frames = list(seq.frames)
    detected = seq.detected
    invalid = False
    t = 0
    n = len(frames)
    while t < n:
        if detected[t]:
            t += 1
            continue
        start = t
        while t < n and not detected[t]:
            t += 1
        gap = t - start
        if start == 0 or t == n or gap > max_gap:
            invalid = True
            continue
        p, q = frames[start - 1].points, frames[t].points
        for k in range(gap):
            w = (k + 1) / (gap + 1)
            old = frames[start + k]
            frames[start + k] = LandmarkFrame(old.frame_index, True, p + w * (q - p), interpolated=True)
    return LandmarkSequence(frames, seq.fps, partially_invalid=invalid or seq.partially_invalid)


def rotation_matrix(yaw_deg: float = 0.0, pitch_deg: float = 0.0, roll_deg: float = 0.0) -> np.ndarray:
    """``R = Ry(yaw) @ Rx(pitch) @ Rz(roll)`` (yaw about the vertical image axis)."""
    y, p, r = np.radians([yaw_deg, pitch_deg, roll_deg])
    ry = np.array([[np.cos(y), 0, np.sin(y)], [0, 1, 0], [-np.sin(y), 0, np.cos(y)]])
    rx = np.array([[1, 0, 0], [0, np.cos(p), -np.sin(p)], [0, np.sin(p), np.cos(p)]])
    rz = np.array([[np.cos(r), -np.sin(r), 0], [np.sin(r), np.cos(r), 0], [0, 0, 1]])
    return ry @ rx @ rz


def as_points(frames: Sequence[LandmarkFrame]) -> np.ndarray:
    return np.stack([f.points for f in frames])
