"""Spatial stages, the normalized-difference chain and pipeline composition.

A pipeline is an ordered list of stages written as a comma separated string,
e.g. ``"tuv:128,mask:45,fd,resize:72"`` or ``"crop_static:1.5,resize:72,fd"``.
The video is cut into non-overlapping windows of ``window_len`` frames and
the stages are applied to every window in the declared order.

Stage names::

    crop_static[:scale]    frame-0 landmark box scaled about its centre
    crop_dynamic[:scale]   per-frame landmark box
    pad_square             symmetric zero padding of the shorter side
    segment                zero pixels outside the landmark convex hull
    tuv[:size]             warp into the UV texture grid
    mask[:degrees]         drop texels whose camera angle >= threshold
    fd                     normalized frame difference, clip, standardize
    resize[:size]          bilinear resize to size x size
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .mesh_geometry import CameraModel, LandmarkSequence, frame_orientation, interpolate_missing_landmarks
from .uv_mapping import bilinear_sample, get_rasterizer

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 128
DEFAULT_EPS = 1e-7
DEFAULT_CLIP_SIGMA = 3.0


class FrameOpsError(ValueError):
    pass


class PipelineConfigError(FrameOpsError):
    pass


class Semantics(str, enum.Enum):
    RAW = "raw_intensity"
    DIFF = "differenced_standardized"


@dataclass
class VideoTensor:
    data: np.ndarray
    semantics: Semantics = Semantics.RAW
    fps: float = 30.0
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 3:
            self.data = self.data[..., None]
        if self.data.ndim != 4:
            raise FrameOpsError(f"video data must be T x H x W x C, got shape {self.data.shape}")

    def __len__(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise FrameOpsError(f"degenerate bounding box {self}")

    def pixel_bounds(self):
        """Integer ``(x0, y0, x1, y1)``, end-exclusive, covering the box."""
        return (math.floor(self.x0), math.floor(self.y0), math.ceil(self.x1), math.ceil(self.y1))


# ---------------------------------------------------------------- spatial ops

def _hull(pts2d) -> ConvexHull:
    pts = np.asarray(pts2d, dtype=np.float64)
    if len(pts) < 3:
        raise FrameOpsError("convex hull needs at least 3 points")
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise FrameOpsError("landmark convex hull is degenerate (collinear points)") from exc
    if hull.volume <= 0:
        raise FrameOpsError("landmark convex hull has zero area")
    return hull


def static_crop_box(pts2d, scale: float = 1.5) -> BoundingBox:
    """Bounds of the 2D convex hull of the points, scaled about the box centre."""
    hull = _hull(pts2d)
    verts = hull.points[hull.vertices]
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    c = (lo + hi) / 2
    half = (hi - lo) / 2 * scale
    return BoundingBox(c[0] - half[0], c[1] - half[1], c[0] + half[0], c[1] + half[1])


def crop(frame: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Crop one frame (H, W[, C]); parts of the box outside the image are zero."""
    h, w = frame.shape[:2]
    x0, y0, x1, y1 = box.pixel_bounds()
    if x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h:
        raise FrameOpsError(f"crop box {box} does not intersect the {w}x{h} frame")
    out = np.zeros((y1 - y0, x1 - x0) + frame.shape[2:], dtype=frame.dtype)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x1, w), min(y1, h)
    out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = frame[sy0:sy1, sx0:sx1]
    return out


def crop_video(video: np.ndarray, box: BoundingBox) -> np.ndarray:
    return np.stack([crop(f, box) for f in video])


def pad_square(frame: np.ndarray):
    """Zero-pad the shorter side symmetrically (odd remainder goes right/bottom).

    Returns ``(padded, (pad_left, pad_top))``.
    """
    h, w = frame.shape[:2]
    side = max(h, w)
    left = (side - w) // 2
    top = (side - h) // 2
    out = np.zeros((side, side) + frame.shape[2:], dtype=frame.dtype)
    out[top:top + h, left:left + w] = frame
    return out, (left, top)


def dynamic_crop_pad(video, pts2d_per_frame, scale: float = 1.5) -> list:
    """Per-frame landmark box crop followed by square padding."""
    out = []
    for frame, pts in zip(video, pts2d_per_frame):
        padded, _ = pad_square(crop(frame, static_crop_box(pts, scale)))
        out.append(padded)
    return out


def hull_mask(shape, pts2d) -> np.ndarray:
    """Boolean (H, W) mask of pixel centres inside (or on) the convex hull."""
    hull = _hull(pts2d)
    h, w = shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    grid = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)], axis=0)
    tol = 1e-9 * max(1.0, np.abs(hull.points).max())
    return np.all(hull.equations @ grid <= tol, axis=0).reshape(h, w)


def segment(frame: np.ndarray, pts2d) -> np.ndarray:
    """Zero every pixel outside the convex hull of the projected landmarks."""
    mask = hull_mask(frame.shape, pts2d)
    return frame * (mask[..., None] if frame.ndim == 3 else mask)


def _resize_coords(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize_bilinear(frame: np.ndarray, size) -> np.ndarray:
    """Bilinear resize with half-pixel centres; ``size`` is S or ``(height, width)``."""
    oh, ow = (size, size) if np.isscalar(size) else size
    if oh < 1 or ow < 1:
        raise FrameOpsError(f"target size must be >= 1, got {size}")
    h, w = frame.shape[:2]
    xs = _resize_coords(w, ow)
    ys = _resize_coords(h, oh)
    gx, gy = np.meshgrid(xs, ys)
    return bilinear_sample(frame, gx, gy)


# ------------------------------------------------------------- temporal ops

def normalized_frame_difference(window: VideoTensor, eps: float = DEFAULT_EPS) -> VideoTensor:
    """``d_t = (I[t+1] - I[t]) / (I[t+1] + I[t] + eps)``; non-finite values become 0."""
    if len(window) < 2:
        raise FrameOpsError("frame difference needs at least 2 frames")
    x = window.data.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = (x[1:] - x[:-1]) / (x[1:] + x[:-1] + eps)
    d[~np.isfinite(d)] = 0.0
    return VideoTensor(d, Semantics.DIFF, window.fps, list(window.flags))


def clip_standardize(window: VideoTensor, clip_sigma: float = DEFAULT_CLIP_SIGMA) -> VideoTensor:
    """Standardize with the mean/std of the whole window, then clip to +-clip_sigma."""
    x = window.data.astype(np.float64)
    flags = list(window.flags)
    mu = x.mean()
    sigma = x.std()
    if not np.isfinite(sigma) or sigma <= 0:
        log.warning("zero-variance window; standardized output set to 0")
        flags.append("zero_variance")
        return VideoTensor(np.zeros_like(x), window.semantics, window.fps, flags)
    z = (x - mu) / sigma
    z = np.clip(z, -clip_sigma, clip_sigma)
    z[~np.isfinite(z)] = 0.0
    return VideoTensor(z, window.semantics, window.fps, flags)


# ------------------------------------------------------------ pipeline spec

_STAGE_DEFAULTS = {
    "crop_static": 1.5,
    "crop_dynamic": 1.5,
    "pad_square": None,
    "segment": None,
    "tuv": 128,
    "mask": 45.0,
    "fd": None,
    "resize": 72,
}
_INT_STAGES = {"tuv", "resize"}


@dataclass(frozen=True)
class Stage:
    name: str
    param: float | int | None = None

    def __str__(self):
        if self.param is None:
            return self.name
        p = self.param
        if isinstance(p, float) and p.is_integer() and self.name not in ("crop_static", "crop_dynamic"):
            p = int(p)
        return f"{self.name}:{p}"


@dataclass(frozen=True)
class PipelineSpec:
    stages: tuple = ()
    window_len: int = DEFAULT_WINDOW
    eps: float = DEFAULT_EPS
    clip_sigma: float = DEFAULT_CLIP_SIGMA

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        self.validate()

    @classmethod
    def parse(cls, text: str, **kwargs) -> "PipelineSpec":
        stages = []
        for token in filter(None, (t.strip() for t in text.split(","))):
            name, _, arg = token.partition(":")
            name = name.strip().lower()
            if name not in _STAGE_DEFAULTS:
                raise PipelineConfigError(f"unknown stage {name!r} in {text!r}")
            default = _STAGE_DEFAULTS[name]
            if arg and default is None:
                raise PipelineConfigError(f"stage {name!r} takes no parameter")
            if default is None:
                param = None
            elif arg:
                try:
                    param = int(arg) if name in _INT_STAGES else float(arg)
                except ValueError as exc:
                    raise PipelineConfigError(f"bad parameter {arg!r} for stage {name!r}") from exc
            else:
                param = default
            stages.append(Stage(name, param))
        return cls(tuple(stages), **kwargs)

    def __str__(self):
        return ",".join(str(s) for s in self.stages)

    @property
    def names(self):
        return [s.name for s in self.stages]

    @property
    def needs_landmarks(self) -> bool:
        return any(n in ("crop_static", "crop_dynamic", "segment", "tuv") for n in self.names)

    def validate(self, model_input: bool = False) -> None:
        names = self.names
        if self.window_len < 2:
            raise PipelineConfigError("window_len must be >= 2")
        spatial = [n for n in names if n in ("crop_static", "crop_dynamic", "tuv")]
        if len(spatial) > 1:
            raise PipelineConfigError(f"at most one of crop_static/crop_dynamic/tuv allowed, got {spatial}")
        if "mask" in names and ("tuv" not in names or names.index("mask") < names.index("tuv")):
            raise PipelineConfigError("mask requires a preceding tuv stage")
        if names.count("mask") > 1:
            raise PipelineConfigError("mask may appear only once")
        n_fd = names.count("fd")
        if n_fd > 1 or (model_input and n_fd != 1):
            raise PipelineConfigError("fd must appear exactly once" if model_input else "fd may appear only once")
        for crop_name in ("crop_static", "crop_dynamic"):
            if crop_name in names and any(n in ("resize", "pad_square")
                                          for n in names[:names.index(crop_name)]):
                raise PipelineConfigError(f"{crop_name} must precede resize/pad_square")
        if "crop_dynamic" in names:
            after = names[names.index("crop_dynamic") + 1:]
            if "resize" not in after:
                raise PipelineConfigError("crop_dynamic produces varying frame sizes; add a later resize stage")
            if "fd" in after and after.index("fd") < after.index("resize"):
                raise PipelineConfigError("crop_dynamic requires resize before fd")
        for s in self.stages:
            if s.name in ("crop_static", "crop_dynamic") and s.param <= 0:
                raise PipelineConfigError(f"{s.name} scale must be positive")
            if s.name in ("tuv", "resize") and s.param < (2 if s.name == "tuv" else 1):
                raise PipelineConfigError(f"{s.name} size too small: {s.param}")
            if s.name == "mask" and not 0 < s.param <= 180:
                raise PipelineConfigError(f"mask threshold must be in (0, 180], got {s.param}")

    def with_mask_threshold(self, threshold_deg: float) -> "PipelineSpec":
        stages = tuple(Stage("mask", float(threshold_deg)) if s.name == "mask" else s for s in self.stages)
        return replace(self, stages=stages)


# ------------------------------------------------------------ window runner

@dataclass
class ProcessedWindow:
    index: int
    start: int
    stop: int
    video: VideoTensor
    mask: np.ndarray
    provenance: dict = field(default_factory=dict)


@dataclass
class _State:
    frames: list
    masks: list
    pts: list           # per-frame (468, 2) in current frame coordinates, or None
    points3d: list      # per-frame (468, 3) original landmarks, or None
    semantics: Semantics = Semantics.RAW
    flags: list = field(default_factory=list)
    angle_frames: list | None = None


def _apply_stage(stage: Stage, st: _State, ctx: dict) -> None:
    name, p = stage.name, stage.param
    n = len(st.frames)
    if name == "crop_static":
        box = ctx["static_box"](p)
        x0, y0, _, _ = box.pixel_bounds()
        st.frames = [crop(f, box) for f in st.frames]
        st.masks = [crop(m, box) for m in st.masks]
        st.pts = [None if q is None else q - (x0, y0) for q in st.pts]
    elif name == "crop_dynamic":
        for i in range(n):
            box = static_crop_box(st.pts[i], p)
            x0, y0, _, _ = box.pixel_bounds()
            st.frames[i] = crop(st.frames[i], box)
            st.masks[i] = crop(st.masks[i], box)
            st.pts[i] = st.pts[i] - (x0, y0)
    elif name == "pad_square":
        for i in range(n):
            st.frames[i], (left, top) = pad_square(st.frames[i])
            st.masks[i], _ = pad_square(st.masks[i])
            if st.pts[i] is not None:
                st.pts[i] = st.pts[i] + (left, top)
    elif name == "segment":
        for i in range(n):
            hm = hull_mask(st.frames[i].shape, st.pts[i])
            st.frames[i] = st.frames[i] * hm[..., None]
            st.masks[i] = st.masks[i] & hm
    elif name == "tuv":
        assets = ctx["assets"]
        rast = get_rasterizer(assets.tess, assets.uv, int(p))
        uv_pts = assets.uv.pixel_coords(int(p))
        angles = []
        for i in range(n):
            uvf = rast.texture(st.frames[i], st.pts[i])
            st.frames[i] = uvf.texels
            st.masks[i] = uvf.coverage.copy()
            angles.append(rast.angles(frame_orientation(st.points3d[i], assets.tess, ctx["camera"])))
            st.pts[i] = uv_pts
        st.angle_frames = angles
    elif name == "mask":
        for i in range(n):
            a = st.angle_frames[i]
            keep = a.coverage & (a.theta_uv < p)
            st.masks[i] = st.masks[i] & keep
            st.frames[i] = st.frames[i] * keep[..., None]
    elif name == "resize":
        size = int(p)
        for i in range(n):
            h, w = st.frames[i].shape[:2]
            st.frames[i] = resize_bilinear(st.frames[i], size)
            st.masks[i] = resize_bilinear(st.masks[i].astype(np.float64), size) >= 0.5
            if st.pts[i] is not None:
                st.pts[i] = (st.pts[i] + 0.5) * (size / w, size / h) - 0.5
    elif name == "fd":
        video = VideoTensor(np.stack(st.frames), st.semantics, ctx["fps"], st.flags)
        video = clip_standardize(normalized_frame_difference(video, ctx["eps"]), ctx["clip_sigma"])
        st.frames = list(video.data)
        st.masks = [a & b for a, b in zip(st.masks[:-1], st.masks[1:])]
        st.pts = st.pts[:-1]
        st.points3d = st.points3d[:-1]
        if st.angle_frames is not None:
            st.angle_frames = st.angle_frames[:-1]
        st.semantics = Semantics.DIFF
        st.flags = video.flags
    else:  # pragma: no cover - guarded by PipelineSpec.parse
        raise PipelineConfigError(f"unknown stage {name}")


def run_pipeline(video, landmarks: LandmarkSequence | None, spec: PipelineSpec, fps: float | None = None,
                 assets=None, camera: CameraModel | None = None) -> list[ProcessedWindow]:
    """Split ``video`` (T, H, W, C) into whole windows and apply ``spec`` to each.

    Landmarks are gap-filled first; windows overlapping frames that remain
    undetected are skipped (they are absent from the returned list).
    """
    spec.validate()
    video = np.asarray(video)
    if video.ndim == 3:
        video = video[..., None]
    n_frames = video.shape[0]
    fps = fps if fps is not None else (landmarks.fps if landmarks is not None else 30.0)

    pts2d = points3d = None
    detected = np.ones(n_frames, dtype=bool)
    if spec.needs_landmarks:
        if landmarks is None:
            raise PipelineConfigError(f"pipeline {spec} needs landmarks")
        if len(landmarks) != n_frames:
            raise FrameOpsError(f"{len(landmarks)} landmark frames for {n_frames} video frames")
        landmarks = interpolate_missing_landmarks(landmarks)
        detected = landmarks.detected
        points3d = [f.points for f in landmarks.frames]
        pts2d = [None if p is None else p[:, :2].copy() for p in points3d]
    if "tuv" in spec.names and assets is None:
        from .assets import load_assets
        assets = load_assets()

    static_boxes = {}

    def static_box(scale):
        if scale not in static_boxes:
            first = int(np.flatnonzero(detected)[0]) if detected.any() else None
            if first is None:
                raise FrameOpsError("no detected landmarks for static crop")
            static_boxes[scale] = static_crop_box(pts2d[first], scale)
        return static_boxes[scale]

    ctx = {"static_box": static_box, "assets": assets, "camera": camera or CameraModel(),
           "fps": fps, "eps": spec.eps, "clip_sigma": spec.clip_sigma}

    windows = []
    for w in range(n_frames // spec.window_len):
        start, stop = w * spec.window_len, (w + 1) * spec.window_len
        if not detected[start:stop].all():
            log.info("window %d skipped: undetected landmarks in frames %d-%d", w, start, stop - 1)
            continue
        st = _State(
            frames=[f.astype(np.float64) for f in video[start:stop]],
            masks=[np.ones(video.shape[1:3], dtype=bool) for _ in range(start, stop)],
            pts=[None] * (stop - start) if pts2d is None else [p.copy() for p in pts2d[start:stop]],
            points3d=[None] * (stop - start) if points3d is None else points3d[start:stop],
        )
        for stage in spec.stages:
            _apply_stage(stage, st, ctx)
        data = np.stack(st.frames)
        provenance = {
            "pipeline": str(spec),
            "window_len": spec.window_len,
            "window_index": w,
            "start_frame": start,
            "stop_frame": stop,
            "eps": spec.eps,
            "clip_sigma": spec.clip_sigma,
        }
        windows.append(ProcessedWindow(w, start, stop, VideoTensor(data, st.semantics, fps, st.flags),
                                       np.stack(st.masks), provenance))
    return windows
