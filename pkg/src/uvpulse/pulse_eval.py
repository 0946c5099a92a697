"""Waveform post-processing, spectral pulse-rate estimation and error metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solveh_banded
from scipy.signal import filtfilt

DEFAULT_BAND = (0.75, 2.5)
DEFAULT_LAMBDA = 100.0
DEFAULT_SNR_TOL_BPM = 6.0
SNR_RANGE_BPM = (45.0, 250.0)
SNR_CAP_DB = 60.0


class EvalError(ValueError):
    pass


# --------------------------------------------------------------- detrending

def second_difference_matrix(n: int) -> np.ndarray:
    """Dense (n-2) x n second-difference operator."""
    d = np.zeros((n - 2, n))
    i = np.arange(n - 2)
    d[i, i] = 1.0
    d[i, i + 1] = -2.0
    d[i, i + 2] = 1.0
    return d


def _penalty_bands(n: int, lam: float) -> np.ndarray:
    """Upper banded storage of ``I + lam**2 * D2.T @ D2`` for ``solveh_banded``."""
    # D2.T @ D2 diagonals for n >= 3: main 1,5,6,...,6,5,1; first -2,-4,...,-4,-2; second 1
    main = np.full(n, 6.0)
    main[[0, -1]] = 1.0
    if n > 3:
        main[[1, -2]] = 5.0
    else:
        main[1] = 4.0
    off1 = np.full(n - 1, -4.0)
    off1[[0, -1]] = -2.0
    off2 = np.ones(n - 2)
    l2 = lam * lam
    ab = np.zeros((3, n))
    ab[2] = 1.0 + l2 * main
    ab[1, 1:] = l2 * off1
    ab[0, 2:] = l2 * off2
    return ab


def detrend_smoothness_priors(signal, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Remove the smoothness-priors trend: ``z - (I + lam^2 D2'D2)^-1 z``.

    The penalized system is pentadiagonal and positive definite, so it is
    solved in banded form in O(T).
    """
    z = np.asarray(signal, dtype=np.float64)
    n = len(z)
    if n < 3:
        raise EvalError("detrending needs at least 3 samples")
    trend = solveh_banded(_penalty_bands(n, lam), z)
    return z - trend


# ------------------------------------------------------------- band-pass

@dataclass(frozen=True)
class BandpassDesign:
    b: np.ndarray
    a: np.ndarray
    fs: float
    band: tuple
    prototype_order: int

    def response(self, freqs) -> np.ndarray:
        """Complex single-pass frequency response at ``freqs`` (Hz)."""
        z = np.exp(-2j * np.pi * np.asarray(freqs, dtype=np.float64) / self.fs)
        num = np.polyval(self.b[::-1], z)
        den = np.polyval(self.a[::-1], z)
        return num / den

    def analog_response(self, freqs) -> np.ndarray:
        """Magnitude of the pre-warped analog prototype, evaluated at the warped frequency."""
        f = np.asarray(freqs, dtype=np.float64)
        w = 2 * self.fs * np.tan(np.pi * f / self.fs)
        w1, w2 = (2 * self.fs * np.tan(np.pi * c / self.fs) for c in self.band)
        with np.errstate(divide="ignore"):
            x = (w * w - w1 * w2) / (w * (w2 - w1))
        return 1.0 / np.sqrt(1.0 + x ** (2 * self.prototype_order))


def design_butterworth_bandpass(fs: float, band=DEFAULT_BAND, order: int = 2) -> BandpassDesign:
    """Digital Butterworth band-pass by bilinear transform with pre-warped edges.

    ``order`` is the order of the resulting band-pass transfer function and
    must be even (a band-pass of order 2N comes from an Nth-order low-pass
    prototype). Coefficients are returned in ascending powers of ``z^-1``.
    """
    lo, hi = band
    if order < 2 or order % 2:
        raise EvalError(f"band-pass order must be a positive even number, got {order}")
    if not 0 < lo < hi < fs / 2:
        raise EvalError(f"band {band} Hz is not inside (0, Nyquist={fs / 2}) Hz")
    n = order // 2
    w1 = 2 * fs * np.tan(np.pi * lo / fs)
    w2 = 2 * fs * np.tan(np.pi * hi / fs)
    bw = w2 - w1
    w0sq = w1 * w2

    k = np.arange(n)
    proto = np.exp(1j * np.pi * (2 * k + n + 1) / (2 * n))
    # low-pass -> band-pass: each prototype pole p gives roots of s^2 - p*bw*s + w0^2
    disc = np.sqrt((proto * bw) ** 2 - 4 * w0sq + 0j)
    poles = np.concatenate([(proto * bw + disc) / 2, (proto * bw - disc) / 2])

    t = 2 * fs
    zpoles = (t + poles) / (t - poles)
    # n analog zeros at s=0 map to z=1, n zeros at infinity map to z=-1
    zzeros = np.concatenate([np.ones(n), -np.ones(n)])
    a = np.real(np.poly(zpoles))
    b = np.real(np.poly(zzeros))
    # unit gain at the geometric centre frequency (where the analog response is exactly 1)
    f0 = fs / np.pi * np.arctan(np.sqrt(w0sq) / t)
    z0 = np.exp(-2j * np.pi * f0 / fs)
    gain = abs(np.polyval(a[::-1], z0) / np.polyval(b[::-1], z0))
    # numerator and denominator have equal degree, so the coefficient arrays read
    # the same in descending powers of z and ascending powers of z^-1
    return BandpassDesign(b * gain, a, float(fs), (float(lo), float(hi)), n)


def butterworth_bandpass(signal, fps: float, order: int = 2, band=DEFAULT_BAND) -> np.ndarray:
    """Zero-phase (forward-backward) Butterworth band-pass."""
    if fps <= 2 * band[1]:
        raise EvalError(f"fps={fps} too low for upper cut-off {band[1]} Hz")
    d = design_butterworth_bandpass(fps, band, order)
    x = np.asarray(signal, dtype=np.float64)
    return filtfilt(d.b, d.a, x)


# -------------------------------------------------------------- spectrum

@dataclass
class Spectrum:
    freqs: np.ndarray
    power: np.ndarray
    nfft: int
    fs: float

    @property
    def bin_width_hz(self) -> float:
        return self.fs / self.nfft

    @property
    def bin_width_bpm(self) -> float:
        return 60.0 * self.fs / self.nfft


@dataclass
class PREstimate:
    bpm: float
    bin_width_bpm: float
    band_edge: bool = False

    @property
    def low_snr(self) -> bool:
        # an in-band pulse produces an interior maximum; a maximum on the
        # band edge is leakage from outside the band
        return self.band_edge


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


def power_spectrum(signal, fps: float) -> Spectrum:
    """One-sided power ``|X_k|^2`` of the zero-padded (next power of two) DFT."""
    x = np.asarray(signal, dtype=np.float64)
    if len(x) < 8:
        raise EvalError("power spectrum needs at least 8 samples")
    nfft = next_pow2(len(x))
    spec = np.fft.rfft(x, n=nfft)
    return Spectrum(np.fft.rfftfreq(nfft, 1.0 / fps), np.abs(spec) ** 2, nfft, float(fps))


def dominant_frequency_pr(spec: Spectrum, band=DEFAULT_BAND) -> PREstimate:
    """Pulse rate at the highest-power bin inside ``band`` (ties -> lower frequency)."""
    idx = np.flatnonzero((spec.freqs >= band[0]) & (spec.freqs <= band[1]))
    if idx.size == 0:
        raise EvalError(f"no spectral bins inside band {band} Hz")
    k = int(np.argmax(spec.power[idx]))
    edge = idx.size > 1 and k in (0, idx.size - 1)
    return PREstimate(60.0 * float(spec.freqs[idx[k]]), spec.bin_width_bpm, bool(edge))


@dataclass
class SNRResult:
    db: float
    capped: bool = False


def snr_db(spec: Spectrum, gt_bpm: float, tolerance_bpm: float = DEFAULT_SNR_TOL_BPM,
           noise_range_bpm=SNR_RANGE_BPM) -> SNRResult:
    """Power near the reference rate and its first harmonic over the remaining band power."""
    bpm = spec.freqs * 60.0
    signal_bins = (np.abs(bpm - gt_bpm) <= tolerance_bpm) | (np.abs(bpm - 2 * gt_bpm) <= tolerance_bpm)
    in_range = (bpm >= noise_range_bpm[0]) & (bpm <= noise_range_bpm[1])
    noise_bins = in_range & ~signal_bins
    p_sig = float(spec.power[signal_bins].sum())
    p_noise = float(spec.power[noise_bins].sum())
    if p_noise <= 0:
        return SNRResult(SNR_CAP_DB, True)
    if p_sig <= 0:
        return SNRResult(-SNR_CAP_DB, True)
    value = 10 * math.log10(p_sig / p_noise)
    if abs(value) > SNR_CAP_DB:
        return SNRResult(math.copysign(SNR_CAP_DB, value), True)
    return SNRResult(value, False)


# --------------------------------------------------------- full chain

@dataclass(frozen=True)
class EvalSettings:
    band: tuple = DEFAULT_BAND
    order: int = 2
    detrend_lambda: float = DEFAULT_LAMBDA
    snr_tolerance_bpm: float = DEFAULT_SNR_TOL_BPM


def postprocess(signal, fps: float, settings: EvalSettings = EvalSettings()) -> np.ndarray:
    x = detrend_smoothness_priors(signal, settings.detrend_lambda)
    return butterworth_bandpass(x, fps, settings.order, settings.band)


def estimate_pr(signal, fps: float, settings: EvalSettings = EvalSettings()):
    """Detrend, band-pass and pick the dominant frequency. Returns ``(PREstimate, Spectrum)``."""
    spec = power_spectrum(postprocess(signal, fps, settings), fps)
    return dominant_frequency_pr(spec, settings.band), spec


# ---------------------------------------------------------------- metrics

@dataclass
class VideoResult:
    video_id: str
    scenario: str
    gt_bpm: float
    est_bpm: float
    snr_db: float
    flags: list = field(default_factory=list)


@dataclass
class Aggregate:
    n: int
    mae: float
    mae_se: float
    rmse: float
    rmse_se: float
    pearson_r: float | None
    pearson_r_se: float | None
    snr_db: float
    snr_se: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EvalReport:
    per_video: list
    overall: Aggregate
    by_scenario: dict


def _se(x: np.ndarray) -> float:
    return float(np.std(x) / math.sqrt(len(x)))


def _aggregate(rows) -> Aggregate:
    if not rows:
        raise EvalError("no rows to aggregate")
    gt = np.array([r.gt_bpm for r in rows], dtype=np.float64)
    est = np.array([r.est_bpm for r in rows], dtype=np.float64)
    snr = np.array([r.snr_db for r in rows], dtype=np.float64)
    err = est - gt
    abs_err = np.abs(err)
    sq = err * err
    n = len(rows)
    r = r_se = None
    if n >= 2 and gt.std() > 0 and est.std() > 0:
        r = float(np.clip(np.corrcoef(gt, est)[0, 1], -1.0, 1.0))
        r_se = math.sqrt((1 - r * r) / (n - 2)) if n > 2 else None
    elif n >= 2 and np.array_equal(gt, est) and gt.std() > 0:
        r, r_se = 1.0, 0.0
    return Aggregate(
        n=n,
        mae=float(abs_err.mean()),
        mae_se=_se(abs_err),
        rmse=float(math.sqrt(sq.mean())),
        rmse_se=math.sqrt(_se(sq)),  # sqrt of the SE of squared errors, in BPM
        pearson_r=r,
        pearson_r_se=r_se,
        snr_db=float(snr.mean()),
        snr_se=_se(snr),
    )


def aggregate_metrics(rows) -> EvalReport:
    """MAE / RMSE / Pearson r / mean SNR with standard errors, overall and per scenario.

    Rows are sorted by ``video_id`` first so the reductions have a fixed order.
    ``pearson_r`` is ``None`` when undefined (fewer than two rows or no variance).
    """
    rows = sorted(rows, key=lambda r: r.video_id)
    groups: dict = {}
    for row in rows:
        groups.setdefault(row.scenario, []).append(row)
    return EvalReport(rows, _aggregate(rows), {k: _aggregate(v) for k, v in sorted(groups.items())})
