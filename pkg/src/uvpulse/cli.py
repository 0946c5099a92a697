"""Command-line entry point: ``uvpulse {synth,prepare,extract,evaluate}``.

Typical chain::

    uvpulse synth --out data --scenario stationary --scenario rotation --seeds 0 1
    uvpulse prepare data --out prep --pipeline tuv:128,mask:45,fd
    uvpulse extract prep --out waves --extractor pos
    uvpulse evaluate waves --dataset data --out report

A JSON ``--config`` file overrides the corresponding flags. The default
asset directory can be set with the ``UVPULSE_ASSET_DIR`` environment
variable or ``--assets``.

Exit status: 0 on success, 1 when some videos failed (outputs for the
others are still written, diagnostics go to stderr), 2 on a fatal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .assets import ASSET_ENV
from .synth_bench import SCENARIOS
from .workflow import RunConfig, WorkflowError, cmd_evaluate, cmd_extract, cmd_prepare, cmd_synth

log = logging.getLogger("uvpulse")

# flag dest -> RunConfig field
CONFIG_FLAGS = {
    "pipeline": "pipeline",
    "extractor": "extractor",
    "window": "window",
    "mask_deg": "mask_deg",
    "band_lo": "band_lo",
    "band_hi": "band_hi",
    "out": "out",
    "workers": "workers",
}


def _add_common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--workers", type=int, default=1, help="videos processed concurrently")
    p.add_argument("--config", help="JSON file of RunConfig fields; overrides flags")
    p.add_argument("--assets", help=f"mesh asset directory (default: ${ASSET_ENV} or bundled)")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--band-lo", type=float, default=0.75, help="pass band low edge [Hz]")
    p.add_argument("--band-hi", type=float, default=2.5, help="pass band high edge [Hz]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uvpulse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--out", default="synthetic")
    p.add_argument("--scenario", action="append", choices=sorted(SCENARIOS),
                   help="repeatable (default: all)")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--duration", type=float, default=60.0, help="seconds")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--hr", type=float, default=1.2, help="pulse frequency [Hz]")
    p.add_argument("--amplitude", type=float, default=0.02, help="pulse modulation depth")
    p.add_argument("--noise", type=float, default=2.0, help="sensor noise std [8-bit levels]")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--assets")

    p = sub.add_parser("prepare", help="run a frame pipeline and write per-window RGB traces")
    p.add_argument("dataset")
    p.add_argument("--pipeline", default=RunConfig.pipeline, help="e.g. tuv:128,mask:45,fd")
    p.add_argument("--window", type=int, default=RunConfig.window, help="window length [frames]")
    p.add_argument("--mask-deg", type=float, default=None, help="override the mask threshold")
    p.add_argument("--dump", action="store_true", help="also write processed windows as .uvt tensors")
    _add_common(p, "prepared")

    p = sub.add_parser("extract", help="turn prepared traces into pulse waveforms")
    p.add_argument("prepared")
    p.add_argument("--extractor", default=RunConfig.extractor, choices=["pos", "chrom", "green"])
    _add_common(p, "waveforms")

    p = sub.add_parser("evaluate", help="estimate pulse rate and write the report")
    p.add_argument("waveforms")
    p.add_argument("--dataset", required=True, help="dataset root holding the reference PPG")
    p.add_argument("--no-figures", action="store_true")
    _add_eval_flags(p)
    _add_common(p, "report")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {field: getattr(args, dest) for dest, field in CONFIG_FLAGS.items() if hasattr(args, dest)}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            overrides = json.load(fh)
        if not isinstance(overrides, dict):
            raise ValueError(f"{args.config}: expected a JSON object")
        values.update(overrides)
    return RunConfig.from_dict(values)


def _report_diagnostics(diags) -> None:
    for d in diags:
        print(f"error: {d}", file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "assets", None):
        os.environ[ASSET_ENV] = args.assets
    try:
        if args.command == "synth":
            ids = cmd_synth(args.out, args.scenario or sorted(SCENARIOS), args.seeds, args.duration,
                            args.fps, args.hr, args.amplitude, args.noise, args.workers)
            print(f"wrote {len(ids)} videos to {args.out}")
            return 0
        cfg = resolve_config(args)
        if args.command == "prepare":
            n_ok, diags = cmd_prepare(args.dataset, cfg, dump=args.dump)
            _report_diagnostics(diags)
            print(f"prepared {n_ok} videos into {cfg.out}")
            if n_ok == 0:
                return 2
            return 1 if diags else 0
        if args.command == "extract":
            n_ok, diags = cmd_extract(args.prepared, cfg)
            _report_diagnostics(diags)
            print(f"extracted {n_ok} waveforms into {cfg.out}")
            if n_ok == 0:
                return 2
            return 1 if diags else 0
        report, diags = cmd_evaluate(args.waveforms, args.dataset, cfg, figures=not args.no_figures)
        _report_diagnostics(diags)
        a = report.overall
        print(f"{a.n} videos: MAE {a.mae:.3f} BPM, RMSE {a.rmse:.3f} BPM, SNR {a.snr_db:.2f} dB "
              f"-> {cfg.out}")
        return 1 if diags else 0
    except (WorkflowError, ValueError, OSError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
