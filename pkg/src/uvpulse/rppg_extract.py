"""Pulse-waveform extraction from processed windows and ground-truth preparation.

Classical extractors (GREEN, CHROM, POS) reduce every window to a per-frame
RGB trace and project it onto a pulse signal. Any callable taking a
:class:`~uvpulse.frame_ops.ProcessedWindow` and returning one value per frame
can be used in their place, e.g. a learned video model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from .frame_ops import ProcessedWindow, Semantics

log = logging.getLogger(__name__)

DEFAULT_WINDOW_S = 1.6


class ExtractionError(ValueError):
    pass


@dataclass
class RGBTrace:
    """Spatially averaged colour per frame.

    ``relative`` marks traces built from normalized frame differences: those
    are already relative intensity changes, so extractors skip the division by
    the temporal mean.
    """

    samples: np.ndarray
    fps: float
    relative: bool = False

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[1] != 3:
            raise ExtractionError(f"trace must be T x 3, got {self.samples.shape}")
        if len(self.samples) < 2:
            raise ExtractionError("trace needs at least 2 samples")
        if not np.all(np.isfinite(self.samples)):
            raise ExtractionError("trace contains non-finite values")


@dataclass
class PulseWaveform:
    values: np.ndarray
    fps: float
    source: str
    flags: list = field(default_factory=list)

    def __len__(self):
        return len(self.values)


@dataclass
class GroundTruthPPG:
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.shape != self.values.shape or self.timestamps.ndim != 1:
            raise ExtractionError("timestamps and values must be 1-D arrays of equal length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ExtractionError("PPG timestamps must be strictly increasing")


# ------------------------------------------------------------------ traces

def spatial_mean_trace(frames, masks, fps: float = 30.0, relative: bool = False) -> RGBTrace:
    """Per-frame channel means over the kept pixels of each frame."""
    frames = np.asarray(frames, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if frames.ndim == 3:
        frames = frames[..., None]
    if masks.shape != frames.shape[:3]:
        raise ExtractionError(f"mask shape {masks.shape} does not match frames {frames.shape[:3]}")
    counts = masks.reshape(len(masks), -1).sum(axis=1)
    if np.any(counts == 0):
        raise ExtractionError(f"frame {int(np.flatnonzero(counts == 0)[0])} has no kept pixels")
    sums = np.einsum("thwc,thw->tc", frames, masks.astype(np.float64))
    means = sums / counts[:, None]
    if means.shape[1] == 1:
        means = np.repeat(means, 3, axis=1)
    return RGBTrace(means[:, :3], fps, relative)


def window_trace(window: ProcessedWindow) -> RGBTrace:
    return spatial_mean_trace(window.video.data, window.mask, window.video.fps,
                              relative=window.video.semantics == Semantics.DIFF)


def _normalized(segment: np.ndarray, relative: bool):
    """Zero-mean relative variation of each channel within ``segment``."""
    if relative:
        return segment - segment.mean(axis=0)
    mu = segment.mean(axis=0)
    if np.any(mu == 0):
        return None
    return segment / mu - 1.0


def _negligible(sd: float, segment: np.ndarray) -> bool:
    # spread that is pure rounding noise relative to the segment counts as zero
    return sd <= 1e-12 * max(float(np.abs(segment).max()), 1e-300)


def _frames_per_window(fps: float, window_s: float, n: int) -> int:
    if fps * window_s < 4:
        raise ExtractionError(f"fps * window_s = {fps * window_s:.2f} is below 4 samples")
    return min(int(np.ceil(fps * window_s - 1e-9)), n)


# -------------------------------------------------------------- extractors

def extract_green(trace: RGBTrace) -> PulseWaveform:
    g = trace.samples[:, 1]
    return PulseWaveform(g - g.mean(), trace.fps, "green")


def extract_chrom(trace: RGBTrace, window_s: float = DEFAULT_WINDOW_S) -> PulseWaveform:
    """Chrominance projection with Hann-windowed 50 % overlap-add."""
    c = trace.samples
    n = len(c)
    win = _frames_per_window(trace.fps, window_s, n)
    win += win % 2
    win = min(win, n - n % 2)
    hop = win // 2
    taper = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    starts = list(range(0, n - win + 1, hop))
    if starts[-1] + win < n:
        starts.append(n - win)
    out = np.zeros(n)
    flags = []
    for s in starts:
        cn = _normalized(c[s:s + win], trace.relative)
        if cn is None:
            flags.append(f"zero_mean_window@{s}")
            continue
        x = 3 * cn[:, 0] - 2 * cn[:, 1]
        y = 1.5 * cn[:, 0] + cn[:, 1] - 1.5 * cn[:, 2]
        x -= x.mean()
        y -= y.mean()
        sy = y.std()
        if _negligible(sy, cn):
            alpha = 0.0
            if not _negligible(x.std(), cn):
                flags.append(f"zero_sigma_y@{s}")
        else:
            alpha = x.std() / sy
        out[s:s + win] += (x - alpha * y) * taper
    return PulseWaveform(out, trace.fps, "chrom", flags)


def extract_pos(trace: RGBTrace, window_s: float = DEFAULT_WINDOW_S) -> PulseWaveform:
    """Plane-orthogonal-to-skin projection, sliding window with hop 1."""
    c = trace.samples
    n = len(c)
    win = _frames_per_window(trace.fps, window_s, n)
    out = np.zeros(n)
    flags = []
    for s in range(0, n - win + 1):
        cn = _normalized(c[s:s + win], trace.relative)
        if cn is None:
            flags.append(f"zero_mean_window@{s}")
            continue
        s1 = cn[:, 1] - cn[:, 2]
        s2 = -2 * cn[:, 0] + cn[:, 1] + cn[:, 2]
        sd2 = s2.std()
        if _negligible(sd2, cn):
            if not _negligible(s1.std(), cn):
                flags.append(f"zero_sigma_s2@{s}")
            continue
        h = s1 + (s1.std() / sd2) * s2
        out[s:s + win] += h - h.mean()
    return PulseWaveform(out, trace.fps, "pos", flags)


TRACE_METHODS = {"green": extract_green, "chrom": extract_chrom, "pos": extract_pos}


class TraceExtractor:
    """Window -> spatial mean trace -> classical projection."""

    def __init__(self, method: str = "pos", window_s: float = DEFAULT_WINDOW_S):
        if method not in TRACE_METHODS:
            raise ExtractionError(f"unknown extractor {method!r}; choose from {sorted(TRACE_METHODS)}")
        self.method = method
        self.window_s = window_s

    @property
    def name(self):
        return self.method

    def from_trace(self, trace: RGBTrace) -> PulseWaveform:
        if self.method == "green":
            return extract_green(trace)
        return TRACE_METHODS[self.method](trace, self.window_s)

    def __call__(self, window: ProcessedWindow) -> np.ndarray:
        return self.from_trace(window_trace(window)).values


def get_extractor(name: str, window_s: float = DEFAULT_WINDOW_S) -> TraceExtractor:
    return TraceExtractor(name.lower(), window_s)


def extract_full_video(windows, extractor: Callable) -> PulseWaveform:
    """Apply ``extractor`` to every window and concatenate in temporal order."""
    windows = sorted(windows, key=lambda w: w.index)
    if not windows:
        raise ExtractionError("no windows to extract from")
    parts = []
    for w in windows:
        try:
            values = np.asarray(extractor(w), dtype=np.float64)
        except Exception as exc:
            raise ExtractionError(f"window {w.index}: {exc}") from exc
        if values.shape != (len(w.video),):
            raise ExtractionError(f"window {w.index}: extractor returned shape {values.shape}")
        parts.append(values)
    source = getattr(extractor, "name", type(extractor).__name__)
    return PulseWaveform(np.concatenate(parts), windows[0].video.fps, source)


def extract_traces(traces, extractor: TraceExtractor) -> PulseWaveform:
    """Same as :func:`extract_full_video` for precomputed per-window traces."""
    if not traces:
        raise ExtractionError("no windows to extract from")
    parts = []
    for i, tr in enumerate(traces):
        try:
            parts.append(extractor.from_trace(tr).values)
        except Exception as exc:
            raise ExtractionError(f"window {i}: {exc}") from exc
    return PulseWaveform(np.concatenate(parts), traces[0].fps, extractor.name)


# ----------------------------------------------------------- ground truth

def resample_ppg(ppg: GroundTruthPPG, fps: float, n_frames: int | None = None) -> np.ndarray:
    """Cubic-spline resample onto frame times ``t0 + i / fps``."""
    if len(ppg.values) < 4:
        raise ExtractionError("ground-truth PPG needs at least 4 samples")
    t0 = ppg.timestamps[0]
    if n_frames is None:
        n_frames = int(np.floor((ppg.timestamps[-1] - t0) * fps + 1e-9)) + 1
    t = t0 + np.arange(n_frames) / fps
    return CubicSpline(ppg.timestamps, ppg.values)(t)


def _diff_normalize(x: np.ndarray, flags: list) -> np.ndarray:
    d = np.diff(x)
    sd = d.std()
    if not np.isfinite(sd) or sd <= 1e-12 * max(1.0, np.abs(d).max(initial=0.0)):
        log.warning("ground-truth difference has zero variance; label set to 0")
        flags.append("zero_variance")
        return np.zeros_like(d)
    return d / sd


def prepare_ground_truth(ppg: GroundTruthPPG, fps: float, n_frames: int | None = None,
                         window_len: int | None = None, starts=None) -> PulseWaveform:
    """Resample to the video rate, then first-difference and divide by the std.

    With ``window_len`` the label is built per non-overlapping window (each
    window yields ``window_len - 1`` samples), matching the layout of
    differenced model inputs. ``starts`` restricts it to windows beginning at
    those frames (e.g. when some windows were skipped).
    """
    x = resample_ppg(ppg, fps, n_frames)
    flags: list = []
    if window_len is None:
        return PulseWaveform(_diff_normalize(x, flags), fps, "ground_truth", flags)
    if starts is None:
        starts = range(0, len(x) - window_len + 1, window_len)
    parts = [_diff_normalize(x[s:s + window_len], flags)
             for s in starts if s + window_len <= len(x)]
    if not parts:
        raise ExtractionError("ground truth shorter than one window")
    return PulseWaveform(np.concatenate(parts), fps, "ground_truth", flags)
