"""Reading RatSI and CalMS21 recordings in the canonical on-disk layouts.

RatSI: one CSV per observation video, ``Observation01.csv`` ... ``Observation09.csv``,
header ``frame,c0,...,c11,label``; a missing coordinate is an empty field.

CalMS21: one JSON document per split (``train.json``, ``test.json``) mapping
video id to ``{"keypoints": N x 28 (null = missing), "labels": N strings}``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from msgl.errors import IngestionError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

RATSI_DIM = 12
CALMS21_DIM = 28
RATSI_VIDEOS = [f"Observation{i:02d}" for i in range(1, 10)]
RATSI_KEPT = ["Solitary", "Approaching", "Following", "Moving Away", "Social Nose Contact"]
RATSI_DROPPED = ["Allogrooming", "Nape Attacking", "Pinning", "Other", "Uncertain"]
CALMS21_CLASSES = ["Attack", "Investigation", "Mount", "Other"]


@dataclass
class VideoRecord:
    """One session: N x D pose coordinates (NaN where missing) and N labels."""

    video_id: str
    frames: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=str)
        if self.frames.ndim != 2:
            raise IngestionError(f"{self.video_id}: frames must be 2-D, got {self.frames.shape}")
        if len(self.labels) != self.frames.shape[0]:
            raise IngestionError(
                f"{self.video_id}: {self.frames.shape[0]} frames but {len(self.labels)} labels"
            )

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class DatasetManifest:
    dataset_name: str
    videos: list[VideoRecord]
    kept_classes: list[str]
    dropped_classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.kept_classes)) != len(self.kept_classes):
            raise IngestionError(f"{self.dataset_name}: duplicate kept classes")
        dims = {v.dim for v in self.videos}
        if len(dims) > 1:
            raise IngestionError(f"{self.dataset_name}: inconsistent pose dimensions {sorted(dims)}")

    def video(self, video_id: str) -> VideoRecord:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise KeyError(video_id)

    @property
    def video_ids(self) -> list[str]:
        return [v.video_id for v in self.videos]

    def subset(self, video_ids: Iterable[str]) -> "DatasetManifest":
        wanted = list(video_ids)
        return DatasetManifest(
            self.dataset_name, [self.video(v) for v in wanted], list(self.kept_classes),
            list(self.dropped_classes),
        )

    def class_counts(self, video_id: Optional[str] = None) -> dict[str, int]:
        videos = self.videos if video_id is None else [self.video(video_id)]
        counts: dict[str, int] = {}
        for v in videos:
            names, n = np.unique(v.labels, return_counts=True)
            for name, k in zip(names.tolist(), n.tolist()):
                counts[name] = counts.get(name, 0) + k
        return counts

    def total_frames(self) -> int:
        return sum(v.n_frames for v in self.videos)


def _canonical(name: str, vocabulary: Sequence[str]) -> Optional[str]:
    key = name.strip().casefold()
    for v in vocabulary:
        if v.casefold() == key:
            return v
    return None


# --------------------------------------------------------------------- RatSI

def _ratsi_header(dim: int = RATSI_DIM) -> list[str]:
    return ["frame"] + [f"c{j}" for j in range(dim)] + ["label"]


def read_ratsi_csv(path: PathLike, video_id: Optional[str] = None) -> VideoRecord:
    path = Path(path)
    vocabulary = RATSI_KEPT + RATSI_DROPPED
    expected = _ratsi_header()
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError as exc:
        raise IngestionError(f"missing RatSI video file {path}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise IngestionError(f"{path}:1: header must be {','.join(expected)}")
        coords: list[list[float]] = []
        labels: list[str] = []
        last_frame = None
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise IngestionError(f"{path}:{lineno}: expected {len(expected)} fields, got {len(row)}")
            try:
                frame = int(row[0])
                values = [float(c) if c != "" else np.nan for c in row[1:-1]]
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from exc
            if last_frame is not None and frame <= last_frame:
                raise IngestionError(f"{path}:{lineno}: frame index {frame} is not increasing")
            last_frame = frame
            label = _canonical(row[-1], vocabulary)
            if label is None:
                raise IngestionError(f"{path}:{lineno}: unknown behaviour label {row[-1]!r}")
            coords.append(values)
            labels.append(label)
    frames = np.array(coords, dtype=np.float64).reshape(len(coords), RATSI_DIM)
    return VideoRecord(video_id or path.stem, frames, np.array(labels, dtype=str))


def write_ratsi_csv(record: VideoRecord, path: PathLike) -> None:
    """Write ``record`` so that :func:`read_ratsi_csv` returns it bit-exactly."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_ratsi_header(record.dim))
        for i, (row, label) in enumerate(zip(record.frames, record.labels)):
            cells = ["" if np.isnan(x) else repr(float(x)) for x in row]
            writer.writerow([i, *cells, label])


def load_ratsi(root: PathLike) -> DatasetManifest:
    root = Path(root)
    videos = [read_ratsi_csv(root / f"{vid}.csv", vid) for vid in RATSI_VIDEOS]
    manifest = DatasetManifest("ratsi", videos, list(RATSI_KEPT), list(RATSI_DROPPED))
    present = set(manifest.class_counts())
    missing = [c for c in RATSI_KEPT if c not in present]
    if missing:
        raise IngestionError(f"{root}: kept classes never observed: {missing}")
    logger.info("loaded RatSI: %d videos, %d frames", len(videos), manifest.total_frames())
    return manifest


# --------------------------------------------------------------------- CalMS21

def _read_calms21_split(path: Path, split: str) -> DatasetManifest:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise IngestionError(f"missing CalMS21 split file {path}") from exc
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict):
        raise IngestionError(f"{path}: top level must map video id to record")
    videos = []
    for vid in sorted(doc):
        entry = doc[vid]
        try:
            kp = entry["keypoints"]
            raw_labels = entry["labels"]
        except (KeyError, TypeError) as exc:
            raise IngestionError(f"{path}: video {vid} lacks keypoints/labels") from exc
        if len(kp) != len(raw_labels):
            raise IngestionError(
                f"{path}: video {vid} has {len(kp)} frames but {len(raw_labels)} labels"
            )
        frames = np.array(
            [[np.nan if c is None else c for c in row] for row in kp], dtype=np.float64
        ).reshape(len(kp), -1) if kp else np.zeros((0, CALMS21_DIM))
        if frames.shape[1] != CALMS21_DIM:
            raise IngestionError(f"{path}: video {vid} has {frames.shape[1]} columns, expected {CALMS21_DIM}")
        labels = []
        for i, name in enumerate(raw_labels):
            label = _canonical(str(name), CALMS21_CLASSES)
            if label is None:
                raise IngestionError(f"{path}: video {vid} frame {i}: unknown label {name!r}")
            labels.append(label)
        videos.append(VideoRecord(vid, frames, np.array(labels, dtype=str)))
    return DatasetManifest(f"calms21-{split}", videos, list(CALMS21_CLASSES), [])


def load_calms21(root: PathLike) -> tuple[DatasetManifest, DatasetManifest]:
    root = Path(root)
    train = _read_calms21_split(root / "train.json", "train")
    test = _read_calms21_split(root / "test.json", "test")
    logger.info(
        "loaded CalMS21: %d train videos (%d frames), %d test videos (%d frames)",
        len(train.videos), train.total_frames(), len(test.videos), test.total_frames(),
    )
    return train, test


def write_calms21_json(videos: Sequence[VideoRecord], path: PathLike) -> None:
    doc = {}
    for v in videos:
        doc[v.video_id] = {
            "keypoints": [[None if np.isnan(x) else float(x) for x in row] for row in v.frames],
            "labels": v.labels.tolist(),
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


# --------------------------------------------------------------------- validation

@dataclass(frozen=True)
class CountMismatch:
    video_id: str
    class_name: str
    expected: int
    observed: int


@dataclass
class ValidationReport:
    dataset_name: str
    mismatches: list[CountMismatch]

    @property
    def ok(self) -> bool:
        return not self.mismatches

    @property
    def exit_code(self) -> int:
        return 0 if self.ok else 1

    def lines(self) -> list[str]:
        return [
            f"{m.video_id} {m.class_name}: expected {m.expected}, found {m.observed}"
            for m in self.mismatches
        ]


def read_expected_counts(path: PathLike) -> list[tuple[str, str, int]]:
    """Rows of ``video_id,class,count``; video id ``*`` means summed over all videos."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["video_id", "class", "count"]:
            raise IngestionError(f"{path}: header must be video_id,class,count")
        return [(r["video_id"], r["class"], int(r["count"])) for r in reader]


def reference_counts(name: str) -> list[tuple[str, str, int]]:
    """Published frame statistics: ``ratsi``, ``calms21_train`` or ``calms21_test``."""
    files = {
        "ratsi": "ratsi_frame_counts.csv",
        "calms21_train": "calms21_train_frame_counts.csv",
        "calms21_test": "calms21_test_frame_counts.csv",
    }
    ref = resources.files("msgl.resources").joinpath(files[name])
    with resources.as_file(ref) as p:
        return read_expected_counts(p)


def validate_manifest(
    manifest: DatasetManifest,
    expected: Union[PathLike, Iterable[tuple[str, str, int]]],
) -> ValidationReport:
    rows = read_expected_counts(expected) if isinstance(expected, (str, Path)) else list(expected)
    cache: dict[str, dict[str, int]] = {}
    mismatches = []
    for video_id, cls, count in rows:
        if video_id not in cache:
            if video_id == "*":
                cache[video_id] = manifest.class_counts()
            elif video_id in manifest.video_ids:
                cache[video_id] = manifest.class_counts(video_id)
            else:
                cache[video_id] = {}
        observed = cache[video_id].get(cls, 0)
        if observed != count:
            mismatches.append(CountMismatch(video_id, cls, count, observed))
    return ValidationReport(manifest.dataset_name, mismatches)
