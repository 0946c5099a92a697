"""On-disk formats and dataset ingestion.

Dataset entry layout (one directory per video)::

    <video_id>/
        meta.json          fps, width, height, scenario, ...
        frames/000000.png  8-bit RGB frames
        landmarks.jsonl    {"frame": i, "detected": b, "points": [[x, y, z] x 468]} per line
        ppg.txt            two columns: timestamp_seconds value

Landmark ``x``/``y`` are pixel coordinates of the frame (pixel centres at
integer positions).

Tensor dumps (``.uvt``): the 4-byte magic ``UVT1``, a little-endian uint32
rank, ``rank`` little-endian uint32 dimensions, then row-major little-endian
float32 data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .mesh_geometry import N_LANDMARKS, LandmarkFrame, LandmarkSequence
from .rppg_extract import GroundTruthPPG, PulseWaveform

TENSOR_MAGIC = b"UVT1"
META_FILE = "meta.json"
LANDMARK_FILE = "landmarks.jsonl"
PPG_FILE = "ppg.txt"
FRAMES_DIR = "frames"


class DatasetError(ValueError):
    pass


# -------------------------------------------------------------- landmarks

def _fmt(x: float) -> str:
    return f"{x:.4f}"


def write_landmarks(path, seq: LandmarkSequence) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in seq.frames:
            if f.detected:
                pts = ",".join("[" + ",".join(_fmt(c) for c in p) + "]" for p in f.points)
            else:
                pts = ""
            fh.write(f'{{"frame": {f.frame_index}, "detected": {"true" if f.detected else "false"}, '
                     f'"points": [{pts}]}}\n')


def parse_landmark_record(line: str, lineno: int) -> LandmarkFrame:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    try:
        frame = int(rec["frame"])
        detected = bool(rec["detected"])
        points = rec.get("points") or []
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"line {lineno}: missing or invalid field ({exc})") from exc
    if detected:
        pts = np.asarray(points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 3):
            raise DatasetError(f"line {lineno}: expected {N_LANDMARKS} points of 3 coordinates, "
                               f"got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DatasetError(f"line {lineno}: non-finite coordinates")
        return LandmarkFrame(frame, True, pts)
    return LandmarkFrame(frame, False)


def read_landmarks(path, fps: float) -> LandmarkSequence:
    frames = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                frames.append(parse_landmark_record(line, lineno))
    try:
        return LandmarkSequence(frames, fps)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc


# -------------------------------------------------------------------- PPG

def write_ppg(path, ppg: GroundTruthPPG) -> None:
    np.savetxt(path, np.column_stack([ppg.timestamps, ppg.values]), fmt="%.6f %.8f",
               header="timestamp_seconds value")


def read_ppg(path) -> GroundTruthPPG:
    try:
        data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    if data.shape[1] != 2:
        raise DatasetError(f"{path}: expected two columns, got {data.shape[1]}")
    try:
        return GroundTruthPPG(data[:, 0], data[:, 1])
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc


# --------------------------------------------------------------- waveform

def write_waveform(path, waveform: PulseWaveform, frame_index, provenance: dict) -> None:
    lines = [f"# {line}" for line in json.dumps(provenance, indent=1, sort_keys=True).splitlines()]
    lines.append("# frame_index value")
    lines += [f"{int(i)} {v:.10e}" for i, v in zip(frame_index, waveform.values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_waveform(path):
    """Return ``(frame_index, values, provenance)``."""
    header, rows = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            header.append(line[2:])
        elif line.strip():
            i, v = line.split()
            rows.append((int(i), float(v)))
    provenance = json.loads("\n".join(header[:-1])) if len(header) > 1 else {}
    arr = np.array(rows, dtype=np.float64).reshape(-1, 2)
    return arr[:, 0].astype(np.int64), arr[:, 1], provenance


# ---------------------------------------------------------------- tensors

def write_tensor(path, data: np.ndarray) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(data.tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise DatasetError(f"{path}: not a tensor dump")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    return np.frombuffer(raw, dtype="<f4", offset=8 + 4 * ndim).reshape(shape)


# ---------------------------------------------------------------- frames

def write_frames(directory, frames: np.ndarray) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        Image.fromarray(np.ascontiguousarray(f, dtype=np.uint8)).save(directory / f"{i:06d}.png")


def frame_paths(directory) -> list:
    return sorted(Path(directory).glob("*.png"))


def read_frames(directory) -> np.ndarray:
    paths = frame_paths(directory)
    if not paths:
        raise DatasetError(f"{directory}: no frames")
    return np.stack([np.asarray(Image.open(p).convert("RGB")) for p in paths])


# ---------------------------------------------------------------- dataset

@dataclass
class DatasetEntry:
    video_id: str
    path: Path
    meta: dict = field(default_factory=dict)
    valid: bool = True
    diagnostic: str | None = None

    @property
    def frames_dir(self) -> Path:
        return self.path / FRAMES_DIR

    @property
    def landmark_path(self) -> Path:
        return self.path / LANDMARK_FILE

    @property
    def ppg_path(self) -> Path:
        return self.path / PPG_FILE

    @property
    def fps(self) -> float:
        return float(self.meta["fps"])

    @property
    def scenario(self) -> str:
        return str(self.meta.get("scenario", "unlabelled"))

    def load_frames(self) -> np.ndarray:
        return read_frames(self.frames_dir)

    def load_landmarks(self) -> LandmarkSequence:
        return read_landmarks(self.landmark_path, self.fps)

    def load_ppg(self) -> GroundTruthPPG:
        return read_ppg(self.ppg_path)


def write_entry(directory, frames, landmarks: LandmarkSequence, ppg: GroundTruthPPG, meta: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_frames(directory / FRAMES_DIR, frames)
    write_landmarks(directory / LANDMARK_FILE, landmarks)
    write_ppg(directory / PPG_FILE, ppg)
    meta = dict(meta, video_id=meta.get("video_id", directory.name))
    (directory / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def validate_entry(path: Path) -> DatasetEntry:
    path = Path(path)
    entry = DatasetEntry(path.name, path)
    try:
        meta = json.loads((path / META_FILE).read_text(encoding="utf-8"))
        entry.meta = meta
        entry.video_id = str(meta.get("video_id", path.name))
        if float(meta.get("fps", 0)) <= 0:
            raise DatasetError(f"{META_FILE}: fps must be positive")
        n_frames = len(frame_paths(entry.frames_dir))
        if n_frames == 0:
            raise DatasetError("no frames found")
        seq = read_landmarks(entry.landmark_path, entry.fps)
        if len(seq) != n_frames:
            raise DatasetError(f"{n_frames} frames but {len(seq)} landmark records")
        read_ppg(entry.ppg_path)
    except (OSError, ValueError, KeyError) as exc:
        entry.valid = False
        entry.diagnostic = f"{path.name}: {exc}"
    return entry


def ingest_dataset(root) -> list[DatasetEntry]:
    """Discover and validate dataset entries under ``root`` (or ``root`` itself)."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if (root / META_FILE).exists():
        return [validate_entry(root)]
    return [validate_entry(d) for d in sorted(p for p in root.iterdir() if (p / META_FILE).exists())]
