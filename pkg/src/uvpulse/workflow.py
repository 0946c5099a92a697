"""Per-video prepare / extract / evaluate steps and report emission.

Every artifact carries the result-affecting part of the :class:`RunConfig`
(``provenance``). Execution settings (output directory, worker count) are
left out so that outputs do not depend on where or how parallel they ran.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .assets import fingerprint, load_assets
from .dataset import (DatasetEntry, DatasetError, ingest_dataset, read_waveform, write_tensor,
                      write_waveform)
from .frame_ops import PipelineSpec, run_pipeline
from .pulse_eval import (EvalReport, EvalSettings, VideoResult, aggregate_metrics, estimate_pr,
                         snr_db)
from .rppg_extract import (RGBTrace, extract_traces, get_extractor, prepare_ground_truth,
                           window_trace)

log = logging.getLogger(__name__)

TRACE_FILE = "traces.csv"
PROVENANCE_FILE = "provenance.json"
WAVEFORM_FILE = "waveform.txt"
TENSOR_FILE = "windows.uvt"


class WorkflowError(RuntimeError):
    pass


@dataclass
class RunConfig:
    pipeline: str = "tuv:128,mask:45,fd"
    extractor: str = "pos"
    window: int = 128
    mask_deg: float | None = None
    band_lo: float = 0.75
    band_hi: float = 2.5
    filter_order: int = 2
    detrend_lambda: float = 100.0
    snr_tolerance: float = 6.0
    clip_sigma: float = 3.0
    eps: float = 1e-7
    extractor_window_s: float = 1.6
    out: str = "out"
    workers: int = 1

    EXECUTION_ONLY = ("out", "workers")

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2 frames")
        if not 0 < self.band_lo < self.band_hi:
            raise ValueError(f"invalid band [{self.band_lo}, {self.band_hi}] Hz")
        if self.mask_deg is not None and not 0 < self.mask_deg <= 180:
            raise ValueError("mask_deg must be in (0, 180]")
        if self.detrend_lambda <= 0 or self.snr_tolerance <= 0 or self.clip_sigma <= 0:
            raise ValueError("detrend_lambda, snr_tolerance and clip_sigma must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        get_extractor(self.extractor)
        self.spec()

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def spec(self) -> PipelineSpec:
        spec = PipelineSpec.parse(self.pipeline, window_len=self.window, eps=self.eps,
                                  clip_sigma=self.clip_sigma)
        if self.mask_deg is not None:
            spec = spec.with_mask_threshold(self.mask_deg)
        return spec

    def eval_settings(self) -> EvalSettings:
        return EvalSettings((self.band_lo, self.band_hi), self.filter_order, self.detrend_lambda,
                            self.snr_tolerance)

    def provenance(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in self.EXECUTION_ONLY}
        d["pipeline_resolved"] = str(self.spec())
        d["assets"] = fingerprint(load_assets())
        d["version"] = __version__
        return d


def _map(func, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [func(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- prepare

def prepare_video(frames, landmarks, cfg: RunConfig, fps: float, assets=None):
    """Run the configured pipeline; returns ``(windows, traces)``."""
    windows = run_pipeline(frames, landmarks, cfg.spec(), fps=fps, assets=assets)
    return windows, [window_trace(w) for w in windows]


def write_traces(path, windows, traces) -> None:
    buf = io.StringIO()
    buf.write("window,frame,r,g,b\n")
    for w, tr in zip(windows, traces):
        for t, (r, g, b) in enumerate(tr.samples):
            buf.write(f"{w.index},{w.start + t},{r:.10e},{g:.10e},{b:.10e}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_traces(path, fps: float, relative: bool):
    """Return ``(window indices, per-window first frames, traces)``."""
    groups: dict = {}
    with open(path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            groups.setdefault(int(row["window"]), []).append(
                (int(row["frame"]), float(row["r"]), float(row["g"]), float(row["b"])))
    idx = sorted(groups)
    frames = [np.array([r[0] for r in groups[i]]) for i in idx]
    traces = [RGBTrace(np.array([r[1:] for r in groups[i]]), fps, relative) for i in idx]
    return idx, frames, traces


def _prepare_one(job):
    entry, cfg, out_root, dump = job
    out = Path(out_root) / entry.video_id
    try:
        frames = entry.load_frames()
        landmarks = entry.load_landmarks()
        windows, traces = prepare_video(frames, landmarks, cfg, entry.fps)
        if not windows:
            raise WorkflowError("no complete window with valid landmarks")
        out.mkdir(parents=True, exist_ok=True)
        write_traces(out / TRACE_FILE, windows, traces)
        prov = {
            "video_id": entry.video_id,
            "scenario": entry.scenario,
            "fps": entry.fps,
            "n_frames": int(len(frames)),
            "windows": [w.index for w in windows],
            "window_starts": [int(w.start) for w in windows],
            "relative": bool(traces[0].relative),
            "flags": sorted({f for w in windows for f in w.video.flags}),
            "config": cfg.provenance(),
        }
        (out / PROVENANCE_FILE).write_text(_dumps(prov), encoding="utf-8")
        if dump:
            write_tensor(out / TENSOR_FILE, np.stack([w.video.data for w in windows]))
        return entry.video_id, None
    except Exception as exc:  # surfaced with video id + stage
        return entry.video_id, f"{entry.video_id} [prepare]: {exc}"


def cmd_prepare(dataset_root, cfg: RunConfig, dump: bool = False):
    """Returns ``(n_ok, diagnostics)``."""
    entries = ingest_dataset(dataset_root)
    diags = [e.diagnostic for e in entries if not e.valid]
    jobs = [(e, cfg, cfg.out, dump) for e in entries if e.valid]
    results = _map(_prepare_one, jobs, cfg.workers)
    diags += [d for _, d in results if d]
    return sum(1 for _, d in results if d is None), diags


# ---------------------------------------------------------------- extract

def _extract_one(job):
    video_dir, cfg, out_root = job
    vid = video_dir.name
    try:
        prov = json.loads((video_dir / PROVENANCE_FILE).read_text(encoding="utf-8"))
        _, frames, traces = read_traces(video_dir / TRACE_FILE, prov["fps"], prov["relative"])
        extractor = get_extractor(cfg.extractor, cfg.extractor_window_s)
        wave = extract_traces(traces, extractor)
        out = Path(out_root) / vid
        out.mkdir(parents=True, exist_ok=True)
        provenance = {"prepare": prov, "extract": {"extractor": extractor.name,
                                                   "config": cfg.provenance(), "flags": wave.flags}}
        write_waveform(out / WAVEFORM_FILE, wave, np.concatenate(frames), provenance)
        return vid, None
    except Exception as exc:
        return vid, f"{vid} [extract]: {exc}"


def cmd_extract(prepared_root, cfg: RunConfig):
    root = Path(prepared_root)
    if not root.is_dir():
        raise WorkflowError(f"{root} does not exist")
    dirs = sorted(d for d in root.iterdir() if (d / TRACE_FILE).exists())
    if not dirs:
        raise WorkflowError(f"no prepared videos under {root}")
    results = _map(_extract_one, [(d, cfg, cfg.out) for d in dirs], cfg.workers)
    return sum(1 for _, d in results if d is None), [d for _, d in results if d]


# --------------------------------------------------------------- evaluate

def evaluate_waveform(values, fps: float, ppg, n_frames: int | None, window_len: int | None,
                      settings: EvalSettings = EvalSettings(), video_id: str = "video",
                      scenario: str = "unlabelled", starts=None):
    """Reference and estimated PR plus SNR for one video. Returns ``(VideoResult, spectrum)``.

    The reference PR comes from the ground-truth PPG run through the same
    windowing, differencing and post-processing as the estimate.
    """
    label = prepare_ground_truth(ppg, fps, n_frames, window_len, starts)
    gt, _ = estimate_pr(label.values, fps, settings)
    est, spec = estimate_pr(values, fps, settings)
    snr = snr_db(spec, gt.bpm, settings.snr_tolerance_bpm)
    flags = []
    if est.low_snr:
        flags.append("band_edge_peak")
    if snr.capped:
        flags.append("snr_capped")
    flags += [f"gt_{f}" for f in label.flags]
    return VideoResult(video_id, scenario, gt.bpm, est.bpm, snr.db, flags), spec


def _evaluate_one(job):
    wave_dir, entries, cfg = job
    vid = wave_dir.name
    try:
        _, values, prov = read_waveform(wave_dir / WAVEFORM_FILE)
        if len(values) == 0:
            raise WorkflowError("empty waveform")
        entry: DatasetEntry | None = entries.get(vid)
        if entry is None:
            raise WorkflowError("no matching dataset entry")
        prep = prov["prepare"]
        result, spec = evaluate_waveform(
            values, float(prep["fps"]), entry.load_ppg(), int(prep["n_frames"]),
            int(prep["config"]["window"]), cfg.eval_settings(), vid, entry.scenario,
            prep["window_starts"])
        return vid, (result, spec, prov), None
    except Exception as exc:
        return vid, None, f"{vid} [evaluate]: {exc}"


def report_to_dict(report: EvalReport, cfg: RunConfig, upstream: dict) -> dict:
    return {
        "config": cfg.provenance(),
        "per_video": [asdict(r) for r in report.per_video],
        "overall": report.overall.as_dict(),
        "by_scenario": {k: v.as_dict() for k, v in report.by_scenario.items()},
        "upstream": upstream,
    }


def _fmt(x, digits=3):
    return "n/a" if x is None else f"{x:.{digits}f}"


def report_text(report: EvalReport, cfg: RunConfig) -> str:
    lines = ["# pulse-rate evaluation report", "", "## config"]
    lines += [f"{k}: {v}" for k, v in sorted(cfg.provenance().items())]
    lines += ["", "## per video",
              f"{'video_id':<24} {'scenario':<12} {'gt_bpm':>8} {'est_bpm':>8} {'snr_db':>8}  flags"]
    for r in report.per_video:
        lines.append(f"{r.video_id:<24} {r.scenario:<12} {r.gt_bpm:>8.3f} {r.est_bpm:>8.3f} "
                     f"{r.snr_db:>8.3f}  {','.join(r.flags)}")
    lines += ["", "## aggregates",
              f"{'group':<12} {'n':>3} {'MAE':>14} {'RMSE':>16} {'r':>14} {'SNR':>14}"]
    groups = [("overall", report.overall)] + list(report.by_scenario.items())
    for name, a in groups:
        lines.append(f"{name:<12} {a.n:>3} {_fmt(a.mae):>7}±{_fmt(a.mae_se):<6} "
                     f"{_fmt(a.rmse):>7}±{_fmt(a.rmse_se):<8} {_fmt(a.pearson_r):>6}±{_fmt(a.pearson_r_se):<7} "
                     f"{_fmt(a.snr_db):>7}±{_fmt(a.snr_se):<6}")
    return "\n".join(lines) + "\n"


def per_video_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["video_id", "scenario", "gt_bpm", "est_bpm", "snr_db"])
    for r in report.per_video:
        w.writerow([r.video_id, r.scenario, f"{r.gt_bpm:.6f}", f"{r.est_bpm:.6f}", f"{r.snr_db:.6f}"])
    return buf.getvalue()


def write_report(out_dir, report: EvalReport, cfg: RunConfig, upstream: dict, spectra: dict,
                 figures: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(_dumps(report_to_dict(report, cfg, upstream)), encoding="utf-8")
    (out / "report.txt").write_text(report_text(report, cfg), encoding="utf-8")
    (out / "per_video.csv").write_text(per_video_csv(report), encoding="utf-8")
    if figures:
        from . import plotting
        fig_dir = out / "figures"
        plotting.scatter_gt_vs_est(report.per_video, fig_dir / "pr_scatter.png")
        plotting.error_by_scenario(report, fig_dir / "mae_by_scenario.png")
        band = (cfg.band_lo, cfg.band_hi)
        for r in report.per_video:
            plotting.spectrum(r.video_id, spectra[r.video_id], r.est_bpm, r.gt_bpm, band,
                              fig_dir / f"spectrum_{r.video_id}.png")
    return out


def cmd_evaluate(waveform_root, dataset_root, cfg: RunConfig, figures: bool = True):
    root = Path(waveform_root)
    dirs = sorted(d for d in root.iterdir() if (d / WAVEFORM_FILE).exists()) if root.is_dir() else []
    if not dirs:
        raise WorkflowError(f"no extracted waveforms under {root}")
    try:
        entries = {e.video_id: e for e in ingest_dataset(dataset_root) if e.valid}
    except DatasetError as exc:
        raise WorkflowError(str(exc)) from exc
    results = _map(_evaluate_one, [(d, entries, cfg) for d in dirs], cfg.workers)
    diags = [d for _, _, d in results if d]
    ok = [(vid, res) for vid, res, d in results if d is None]
    if not ok:
        raise WorkflowError("no video could be evaluated: " + "; ".join(diags))
    rows = [res[0] for _, res in ok]
    report = aggregate_metrics(rows)
    upstream = {vid: res[2] for vid, res in ok}
    spectra = {vid: res[1] for vid, res in ok}
    write_report(cfg.out, report, cfg, upstream, spectra, figures)
    return report, diags


# ------------------------------------------------------------------ synth

def _synth_one(job):
    from .dataset import write_entry
    from .synth_bench import PulseParams, synthesize
    scenario, seed, opts, out_root = job
    vid = f"{scenario}_s{seed:02d}"
    video = synthesize(scenario, seed=seed, duration=opts["duration"], fps=opts["fps"],
                       pulse=PulseParams(opts["hr"], opts["amplitude"]), noise_std=opts["noise"],
                       assets=load_assets())
    meta = dict(video.meta, video_id=vid)
    write_entry(Path(out_root) / vid, video.frames, video.landmarks, video.ppg, meta)
    return vid


def cmd_synth(out_root, scenarios, seeds, duration=60.0, fps=30.0, hr=1.2, amplitude=0.02, noise=2.0,
              workers=1):
    opts = dict(duration=duration, fps=fps, hr=hr, amplitude=amplitude, noise=noise)
    jobs = [(sc, s, opts, out_root) for sc in scenarios for s in seeds]
    return _map(_synth_one, jobs, workers)
