"""Synthetic pose data with known structure, for tests and smoke runs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Union

import numpy as np

from msgl.data import (
    CALMS21_CLASSES, CALMS21_DIM, RATSI_DIM, RATSI_DROPPED, RATSI_KEPT, RATSI_VIDEOS,
    VideoRecord, write_calms21_json, write_ratsi_csv,
)


def separable_windows(
    n_windows: int = 200,
    T: int = 35,
    D: int = 12,
    drift: float = 0.05,
    noise: float = 0.5,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Two-class windows told apart by the sign of a constant per-frame drift.

    Every window starts from a random offset (shared by all frames) and adds
    white noise; class 0 windows drift by +``drift`` per frame on every
    coordinate, class 1 windows by -``drift``. Classes alternate so the set
    is balanced. Returns ``(windows (M, T, D), labels (M,))``.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n_windows) % 2
    offset = rng.normal(0.0, 1.0, size=(n_windows, 1, D))
    t = np.arange(T, dtype=np.float64)[None, :, None]
    sign = np.where(labels == 0, 1.0, -1.0)[:, None, None]
    windows = offset + sign * drift * t + rng.normal(0.0, noise, size=(n_windows, T, D))
    return windows, labels.astype(np.int64)


def nearest_centroid_accuracy(
    train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray
) -> float:
    """Accuracy of a nearest-centroid rule on flattened windows."""
    a = train_x.reshape(len(train_x), -1)
    b = test_x.reshape(len(test_x), -1)
    classes = np.unique(train_y)
    centroids = np.stack([a[train_y == c].mean(axis=0) for c in classes])
    dist = ((b[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float((classes[dist.argmin(axis=1)] == test_y).mean())


def behaviour_video(
    video_id: str,
    n_frames: int,
    classes: Sequence[str],
    D: int,
    seed: int,
    mean_segment: int = 40,
    missing_rate: float = 0.0,
) -> VideoRecord:
    """A video made of labelled segments, each class with its own mean pose
    and drift direction, plus optional missing coordinates."""
    rng = np.random.default_rng(seed)
    class_rng = np.random.default_rng(12345)  # class signatures shared by all videos
    means = {c: class_rng.normal(0.0, 2.0, size=D) for c in classes}
    drifts = {c: class_rng.normal(0.0, 0.05, size=D) for c in classes}
    frames = np.empty((n_frames, D))
    labels = []
    i = 0
    while i < n_frames:
        c = classes[int(rng.integers(len(classes)))]
        length = min(int(rng.integers(mean_segment // 2, mean_segment * 3 // 2 + 1)), n_frames - i)
        t = np.arange(length)[:, None]
        frames[i:i + length] = means[c] + drifts[c] * t + rng.normal(0.0, 0.5, size=(length, D))
        labels += [c] * length
        i += length
    if missing_rate > 0:
        frames[rng.random(frames.shape) < missing_rate] = np.nan
    return VideoRecord(video_id, frames, np.array(labels, dtype=str))


def write_ratsi_dataset(
    root: Union[str, Path], n_frames: int = 300, seed: int = 0, missing_rate: float = 0.01
) -> list[VideoRecord]:
    """Nine small RatSI-layout CSVs containing every kept class and some
    frames of excluded classes."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    videos = []
    for k, vid in enumerate(RATSI_VIDEOS):
        v = behaviour_video(vid, n_frames, RATSI_KEPT + RATSI_DROPPED[:1], RATSI_DIM, seed * 100 + k,
                            missing_rate=missing_rate)
        # guarantee every kept class occurs in every video
        labels = v.labels.astype(object)
        for j, c in enumerate(RATSI_KEPT):
            labels[j * 5:(j + 1) * 5] = c
        v = VideoRecord(vid, v.frames, labels)
        write_ratsi_csv(v, root / f"{vid}.csv")
        videos.append(v)
    return videos


def write_calms21_dataset(
    root: Union[str, Path], n_train: int = 6, n_test: int = 2, n_frames: int = 200, seed: int = 0
) -> tuple[list[VideoRecord], list[VideoRecord]]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    train = [
        behaviour_video(f"train_{i:03d}", n_frames, CALMS21_CLASSES, CALMS21_DIM, seed * 100 + i)
        for i in range(n_train)
    ]
    test = [
        behaviour_video(f"test_{i:03d}", n_frames, CALMS21_CLASSES, CALMS21_DIM, seed * 100 + 50 + i)
        for i in range(n_test)
    ]
    write_calms21_json(train, root / "train.json")
    write_calms21_json(test, root / "test.json")
    return train, test
