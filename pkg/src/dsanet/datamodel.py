"""Dataset manifests, binary feature files, and the synthetic generator.

Feature files are little-endian binaries: 16-byte header (magic ``DSAF``,
u32 version=1, u32 N, u32 D) followed by N*D float32 row-major.  The
manifest is a JSON file listing class names and per-video records; see
``load_manifest`` for the exact schema.

The synthetic generator draws every video's frames as (class centroid +
Gaussian noise), L2-normalized so downstream cosine operations see
roughly unit-norm features.  Class geometry (centroids and anomaly
directions) depends only on (dim, n_classes, cluster_separation), not on
the seed, so datasets drawn with different seeds are samples from one
distribution; the desk benchmark uses that to build disjoint train/test
splits.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    InconsistentLabel,
    IoFailure,
    MissingFile,
    NonFiniteEntry,
    SchemaViolation,
)
from .prng import SplitMix64, child_seed

_FEAT_MAGIC = b"DSAF"
_FEAT_VERSION = 1

# enough evocative anomaly names for small C; beyond that, synthesized ids
_ANOMALY_NAME_POOL = [
    "fight",
    "explosion",
    "accident",
    "robbery",
    "vandalism",
    "shoplifting",
    "arson",
    "riot",
]


@dataclass
class FeatureSequence:
    """One video's frame features: an N x D float32 matrix."""

    video_id: str
    frames: np.ndarray

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])


@dataclass
class VideoRecord:
    video_id: str
    feature_path: Path
    y: int
    category: int
    n_frames: int
    dim: int
    gt_segments: list[tuple[int, int, int]] = field(default_factory=list)


@dataclass
class DatasetManifest:
    classes: list[str]
    videos: list[VideoRecord]

    @property
    def n_classes(self) -> int:
        return len(self.classes)


@dataclass
class SynthSpec:
    n_videos: int
    frames_per_video: int
    dim: int
    n_classes: int
    anomaly_ratio: float
    cluster_separation: float
    noise_scale: float
    seed: int

    def validate(self) -> None:
        for name in ("n_videos", "frames_per_video", "dim", "n_classes"):
            if getattr(self, name) < 1:
                raise SchemaViolation(f"SynthSpec.{name} must be positive")
        if self.n_classes < 2:
            raise SchemaViolation("SynthSpec.n_classes must be >= 2")
        if not 0.0 <= self.anomaly_ratio <= 1.0:
            raise SchemaViolation("SynthSpec.anomaly_ratio must be in [0, 1]")
        if self.cluster_separation < 0 or self.noise_scale < 0:
            raise SchemaViolation("SynthSpec scales must be nonnegative")


# --- manifest I/O -----------------------------------------------------------


def _require(cond: bool, field_name: str, detail: str) -> None:
    if not cond:
        raise SchemaViolation(f"manifest field {field_name!r}: {detail}")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a manifest JSON file.

    Feature paths are resolved relative to the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaViolation(f"manifest is not valid JSON: {e}") from e

    _require(isinstance(raw, dict), "<root>", "must be a JSON object")
    classes = raw.get("classes")
    _require(isinstance(classes, list) and len(classes) >= 2, "classes", "need >= 2 class names")
    _require(all(isinstance(c, str) for c in classes), "classes", "names must be strings")
    _require(len(set(classes)) == len(classes), "classes", "names must be unique")
    _require(classes[0] == "normal", "classes", 'index 0 must be "normal"')

    videos_raw = raw.get("videos")
    _require(isinstance(videos_raw, list), "videos", "must be a list")
    videos: list[VideoRecord] = []
    seen_ids: set[str] = set()
    for i, v in enumerate(videos_raw):
        where = f"videos[{i}]"
        _require(isinstance(v, dict), where, "must be an object")
        for key in ("id", "feature_file", "n_frames", "dim", "y", "category"):
            _require(key in v, f"{where}.{key}", "missing")
        vid = v["id"]
        _require(isinstance(vid, str) and vid, f"{where}.id", "must be a nonempty string")
        _require(vid not in seen_ids, f"{where}.id", "duplicate video id")
        seen_ids.add(vid)
        y, cat = v["y"], v["category"]
        _require(y in (0, 1), f"{where}.y", "must be 0 or 1")
        _require(isinstance(cat, int) and cat >= 0, f"{where}.category", "must be a nonnegative int")
        if (y == 0) != (cat == 0):
            raise InconsistentLabel(f"{where}: y={y} but category={cat}")
        _require(cat < len(classes), f"{where}.category", "out of range")
        n_frames, dim = v["n_frames"], v["dim"]
        _require(isinstance(n_frames, int) and n_frames >= 1, f"{where}.n_frames", "must be >= 1")
        _require(isinstance(dim, int) and dim >= 1, f"{where}.dim", "must be >= 1")
        segs: list[tuple[int, int, int]] = []
        for j, seg in enumerate(v.get("gt_segments", [])):
            sw = f"{where}.gt_segments[{j}]"
            _require(isinstance(seg, list) and len(seg) == 3, sw, "must be [start, end, category]")
            s, e, c = seg
            _require(0 <= s <= e < n_frames, sw, "needs 0 <= start <= end < n_frames")
            _require(1 <= c < len(classes), sw, "segment category must be an anomaly class")
            segs.append((int(s), int(e), int(c)))
        videos.append(
            VideoRecord(
                video_id=vid,
                feature_path=path.parent / v["feature_file"],
                y=int(y),
                category=int(cat),
                n_frames=int(n_frames),
                dim=int(dim),
                gt_segments=segs,
            )
        )
    return DatasetManifest(classes=list(classes), videos=videos)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write the manifest with deterministic bytes (sorted keys)."""
    doc = {
        "classes": manifest.classes,
        "videos": [
            {
                "id": r.video_id,
                "feature_file": r.feature_path.name,
                "n_frames": r.n_frames,
                "dim": r.dim,
                "y": r.y,
                "category": r.category,
                "gt_segments": [list(s) for s in r.gt_segments],
            }
            for r in manifest.videos
        ],
    }
    try:
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write manifest {path}: {e}") from e


# --- feature file I/O -------------------------------------------------------


def write_features(path: str | Path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise DimensionMismatch("feature matrix must be rank 2")
    n, d = frames.shape
    try:
        with open(path, "wb") as fh:
            fh.write(_FEAT_MAGIC)
            fh.write(struct.pack("<III", _FEAT_VERSION, n, d))
            fh.write(frames.tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write features {path}: {e}") from e


def read_features(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != _FEAT_MAGIC:
        raise BadMagic(f"{path}: expected DSAF header")
    version, n, d = struct.unpack_from("<III", blob, 4)
    if version != _FEAT_VERSION:
        raise BadMagic(f"{path}: unsupported feature version {version}")
    payload = blob[16:]
    if len(payload) != 4 * n * d:
        raise DimensionMismatch(
            f"{path}: header says {n}x{d} ({4 * n * d} bytes) but payload has {len(payload)}"
        )
    frames = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    if not np.all(np.isfinite(frames)):
        raise NonFiniteEntry(f"{path}: payload contains non-finite entries")
    return frames.copy()


def load_features(record: VideoRecord) -> FeatureSequence:
    frames = read_features(record.feature_path)
    n, d = frames.shape
    if (n, d) != (record.n_frames, record.dim):
        raise DimensionMismatch(
            f"{record.feature_path}: file is {n}x{d} but manifest says "
            f"{record.n_frames}x{record.dim}"
        )
    return FeatureSequence(video_id=record.video_id, frames=frames)


# --- synthetic generator ----------------------------------------------------


def class_names(n_classes: int) -> list[str]:
    names = ["normal"]
    for i in range(n_classes - 1):
        if i < len(_ANOMALY_NAME_POOL):
            names.append(_ANOMALY_NAME_POOL[i])
        else:
            names.append(f"anomaly_{i}")
    return names


def _class_geometry(dim: int, n_classes: int, separation: float) -> np.ndarray:
    """Centroids for all classes; a function of geometry inputs only."""
    tag = child_seed(0x6765_6F6D, f"geom:{dim}:{n_classes}:{separation!r}")
    rng = SplitMix64(tag)
    base = rng.normal(dim)
    centroids = np.empty((n_classes, dim))
    centroids[0] = base
    for c in range(1, n_classes):
        direction = rng.normal(dim)
        direction /= np.linalg.norm(direction)
        centroids[c] = base + separation * direction
    return centroids


def _label_plan(n_videos: int, ratio: float) -> list[int]:
    """Spread floor(n*ratio) abnormal videos evenly across indices."""
    return [
        1 if math.floor((i + 1) * ratio) - math.floor(i * ratio) >= 1 else 0
        for i in range(n_videos)
    ]


def synthesize_dataset(spec: SynthSpec, out_dir: str | Path) -> DatasetManifest:
    """Write feature files + manifest.json for a synthetic dataset.

    Deterministic given spec.seed: each video consumes an independent
    child stream, abnormal videos carry one contiguous anomalous segment
    with length uniform in [10%, 40%] of N and uniform start.
    """
    spec.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {out_dir}: {e}") from e

    names = class_names(spec.n_classes)
    centroids = _class_geometry(spec.dim, spec.n_classes, spec.cluster_separation)
    labels = _label_plan(spec.n_videos, spec.anomaly_ratio)
    n, d = spec.frames_per_video, spec.dim

    records: list[VideoRecord] = []
    abnormal_seen = 0
    for i in range(spec.n_videos):
        rng = SplitMix64(child_seed(spec.seed, f"video:{i}"))
        vid = f"video_{i:04d}"
        y = labels[i]
        if y == 0:
            category = 0
            segs: list[tuple[int, int, int]] = []
            frame_class = np.zeros(n, dtype=np.int64)
        else:
            category = 1 + (abnormal_seen % (spec.n_classes - 1))
            abnormal_seen += 1
            lo = max(1, math.ceil(0.1 * n))
            hi = max(lo, math.floor(0.4 * n))
            length = int(rng.integers(1, lo, hi + 1)[0])
            start = int(rng.integers(1, 0, n - length + 1)[0])
            segs = [(start, start + length - 1, category)]
            frame_class = np.zeros(n, dtype=np.int64)
            frame_class[start : start + length] = category

        noise = rng.normal(n * d).reshape(n, d) * spec.noise_scale
        frames = centroids[frame_class] + noise
        norms = np.linalg.norm(frames, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        frames = (frames / norms).astype(np.float32)

        fname = f"{vid}.dsaf"
        write_features(out_dir / fname, frames)
        records.append(
            VideoRecord(
                video_id=vid,
                feature_path=out_dir / fname,
                y=y,
                category=category,
                n_frames=n,
                dim=d,
                gt_segments=segs,
            )
        )

    manifest = DatasetManifest(classes=names, videos=records)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def frame_labels(record: VideoRecord) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame (binary, category) ground truth from gt_segments."""
    binary = np.zeros(record.n_frames, dtype=np.int64)
    category = np.zeros(record.n_frames, dtype=np.int64)
    for s, e, c in record.gt_segments:
        binary[s : e + 1] = 1
        category[s : e + 1] = c
    return binary, category
