"""Train-fitted imputation and scaling, sliding windows and mini-batches.

Statistics are only ever fitted on training videos; validation and test
videos are transformed with the fitted states.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from msgl.autograd.random import RngStream
from msgl.data import VideoRecord
from msgl.errors import FitError, PersistenceError, UsageError

ARTIFACT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ImputerState:
    means: np.ndarray


@dataclass(frozen=True)
class ScalerState:
    mu: np.ndarray
    sigma: np.ndarray


class LabelMap:
    """Bijection between class names (sorted lexicographically) and 0..C-1."""

    def __init__(self, classes: Sequence[str]):
        names = sorted(set(classes))
        if len(names) != len(list(classes)):
            raise UsageError("duplicate class names")
        self.classes: list[str] = names
        self._index = {c: i for i, c in enumerate(names)}

    def __len__(self) -> int:
        return len(self.classes)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelMap) and self.classes == other.classes

    def index(self, name: str) -> int:
        return self._index[name]

    def name(self, index: int) -> str:
        return self.classes[index]

    def __repr__(self) -> str:
        return f"LabelMap({self.classes})"


# --------------------------------------------------------------------- imputation

def fit_imputer(train_videos: Sequence[VideoRecord]) -> ImputerState:
    stacked = np.concatenate([v.frames for v in train_videos], axis=0)
    valid = ~np.isnan(stacked)
    counts = valid.sum(axis=0)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise FitError(f"feature(s) {empty.tolist()} have no valid training observation")
    sums = np.where(valid, stacked, 0.0).sum(axis=0)
    return ImputerState(means=sums / counts)


def apply_imputer(state: ImputerState, videos: Sequence[VideoRecord]) -> list[VideoRecord]:
    out = []
    for v in videos:
        frames = np.where(np.isnan(v.frames), state.means, v.frames)
        out.append(VideoRecord(v.video_id, frames, v.labels))
    return out


# --------------------------------------------------------------------- scaling

def fit_scaler(train_videos: Sequence[VideoRecord]) -> ScalerState:
    stacked = np.concatenate([v.frames for v in train_videos], axis=0)
    if np.isnan(stacked).any():
        raise FitError("fit_scaler expects imputed data")
    mu = stacked.mean(axis=0)
    # population standard deviation; constant features keep sigma = 1
    sigma = np.sqrt(((stacked - mu) ** 2).mean(axis=0))
    sigma = np.where(sigma > 0, sigma, 1.0)
    return ScalerState(mu=mu, sigma=sigma)


def apply_scaler(state: ScalerState, videos: Sequence[VideoRecord]) -> list[VideoRecord]:
    return [
        VideoRecord(v.video_id, (v.frames - state.mu) / state.sigma, v.labels) for v in videos
    ]


# --------------------------------------------------------------------- windows

class WindowedDataset:
    """Fixed-length windows over standardized videos, labelled by their last frame.

    Windows are stored as (video index, end frame) pairs and gathered lazily;
    :attr:`windows` materialises the full M x T x D array.
    """

    def __init__(
        self,
        video_ids: Sequence[str],
        frames: Sequence[np.ndarray],
        video_index: np.ndarray,
        end_frames: np.ndarray,
        labels: np.ndarray,
        T: int,
    ):
        self.video_ids = list(video_ids)
        self.frames = [np.asarray(f, dtype=np.float64) for f in frames]
        self.video_index = np.asarray(video_index, dtype=np.int64)
        self.end_frames = np.asarray(end_frames, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.T = int(T)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.frames[0].shape[1] if self.frames else 0

    @property
    def origins(self) -> list[tuple[str, int]]:
        return [(self.video_ids[v], int(e)) for v, e in zip(self.video_index, self.end_frames)]

    def gather(self, indices) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64)
        out = np.empty((len(indices), self.T, self.dim))
        offsets = np.arange(-self.T + 1, 1)
        for vid in np.unique(self.video_index[indices]):
            sel = np.flatnonzero(self.video_index[indices] == vid)
            rows = self.end_frames[indices[sel]][:, None] + offsets
            out[sel] = self.frames[vid][rows]
        return out

    @property
    def windows(self) -> np.ndarray:
        return self.gather(np.arange(len(self)))

    def subset(self, indices) -> "WindowedDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return WindowedDataset(
            self.video_ids, self.frames, self.video_index[indices], self.end_frames[indices],
            self.labels[indices], self.T,
        )

    @classmethod
    def from_windows(cls, windows: np.ndarray, labels: np.ndarray) -> "WindowedDataset":
        """Wrap an explicit M x T x D array, one pseudo-video per window."""
        windows = np.asarray(windows, dtype=np.float64)
        m, t, _ = windows.shape
        return cls(
            [f"w{i}" for i in range(m)], list(windows), np.arange(m), np.full(m, t - 1), labels, t
        )

    def digest(self) -> str:
        """SHA-256 over windows, labels and origins, for cross-run comparison."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update(np.ascontiguousarray(self.video_index).tobytes())
        h.update(np.ascontiguousarray(self.end_frames).tobytes())
        for f in self.frames:
            h.update(np.ascontiguousarray(f).tobytes())
        return h.hexdigest()


def build_windows(
    videos: Sequence[VideoRecord],
    label_map: LabelMap,
    T: int,
    stride: int = 1,
    drop_final_window: bool = False,
) -> WindowedDataset:
    """Slide a length-``T`` window over each video with step ``stride``.

    A window ending at frame e is kept iff the label of frame e belongs to
    ``label_map``; its target is that label's index. Videos shorter than T
    contribute nothing. ``drop_final_window`` additionally discards the last
    window of every video, which reproduces the published CalMS21 evaluation
    count (N - T windows per video instead of N - T + 1).
    """
    if T < 1 or stride < 1:
        raise UsageError("window length and stride must be >= 1")
    vidx, ends, labels = [], [], []
    for i, v in enumerate(videos):
        if np.isnan(v.frames).any():
            raise UsageError(f"{v.video_id}: impute missing values before windowing")
        candidates = np.arange(T - 1, v.n_frames, stride)
        if drop_final_window and candidates.size:
            candidates = candidates[:-1]
        final = v.labels[candidates]
        keep = np.array([name in label_map for name in final], dtype=bool)
        candidates = candidates[keep]
        vidx.append(np.full(candidates.size, i))
        ends.append(candidates)
        labels.append(np.array([label_map.index(n) for n in final[keep]], dtype=np.int64))
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)  # noqa: E731
    return WindowedDataset(
        [v.video_id for v in videos], [v.frames for v in videos], cat(vidx), cat(ends), cat(labels), T
    )


def batch_iter(
    ds: WindowedDataset,
    batch_size: int,
    shuffle: bool = False,
    rng: Optional[RngStream] = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(windows, labels)`` mini-batches covering every window once."""
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    n = len(ds)
    if n == 0:
        return
    if shuffle:
        if rng is None:
            raise UsageError("shuffling needs an RngStream")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.gather(idx), ds.labels[idx]


# --------------------------------------------------------------------- pipeline

@dataclass
class Preprocessor:
    """Fitted imputer + scaler + label map, applied together."""

    imputer: ImputerState
    scaler: ScalerState
    label_map: LabelMap

    @classmethod
    def fit(cls, train_videos: Sequence[VideoRecord], classes: Sequence[str]) -> "Preprocessor":
        imputer = fit_imputer(train_videos)
        scaler = fit_scaler(apply_imputer(imputer, train_videos))
        return cls(imputer, scaler, LabelMap(classes))

    def transform(self, videos: Sequence[VideoRecord]) -> list[VideoRecord]:
        return apply_scaler(self.scaler, apply_imputer(self.imputer, videos))

    def windows(self, videos: Sequence[VideoRecord], T: int, stride: int = 1, **kw) -> WindowedDataset:
        return build_windows(self.transform(videos), self.label_map, T, stride, **kw)


def persist_artifacts(
    imputer: ImputerState, scaler: ScalerState, label_map: LabelMap, path: Union[str, Path]
) -> None:
    doc = {
        "schema_version": ARTIFACT_SCHEMA_VERSION,
        "means": [float(x) for x in imputer.means],
        "mu": [float(x) for x in scaler.mu],
        "sigma": [float(x) for x in scaler.sigma],
        "classes": list(label_map.classes),
    }
    # json writes floats with repr(), which round-trips exactly
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_artifacts(path: Union[str, Path]) -> Preprocessor:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise PersistenceError(f"artifact file {path} not found") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise PersistenceError(f"artifact file {path} is corrupted: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema_version") != ARTIFACT_SCHEMA_VERSION:
        raise PersistenceError(f"artifact file {path}: unsupported schema version")
    try:
        means = np.array(doc["means"], dtype=np.float64)
        mu = np.array(doc["mu"], dtype=np.float64)
        sigma = np.array(doc["sigma"], dtype=np.float64)
        classes = [str(c) for c in doc["classes"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise PersistenceError(f"artifact file {path}: malformed field ({exc})") from exc
    if not (means.shape == mu.shape == sigma.shape) or means.ndim != 1 or (sigma <= 0).any():
        raise PersistenceError(f"artifact file {path}: inconsistent statistics")
    return Preprocessor(ImputerState(means), ScalerState(mu, sigma), LabelMap(classes))
