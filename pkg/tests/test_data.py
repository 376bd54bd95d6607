import json

import numpy as np
import pytest

from msgl.data import (
    CALMS21_CLASSES, RATSI_KEPT, RATSI_VIDEOS, DatasetManifest, VideoRecord, load_calms21,
    load_ratsi, read_expected_counts, read_ratsi_csv, reference_counts, validate_manifest,
    write_calms21_json, write_ratsi_csv,
)
from msgl.errors import IngestionError


def _video(rng, n=20, vid="Observation01"):
    frames = rng.normal(size=(n, 12))
    frames[rng.random(frames.shape) < 0.1] = np.nan
    labels = np.array([RATSI_KEPT[i % 5] for i in range(n)])
    return VideoRecord(vid, frames, labels)


def test_ratsi_csv_round_trip_is_bit_exact(tmp_path, rng):
    v = _video(rng)
    write_ratsi_csv(v, tmp_path / "Observation01.csv")
    back = read_ratsi_csv(tmp_path / "Observation01.csv")
    assert back.video_id == "Observation01"
    np.testing.assert_array_equal(np.isnan(back.frames), np.isnan(v.frames))
    np.testing.assert_array_equal(np.nan_to_num(back.frames), np.nan_to_num(v.frames))
    np.testing.assert_array_equal(back.labels, v.labels)


def test_labels_are_matched_case_insensitively(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("frame," + ",".join(f"c{j}" for j in range(12)) + ",label\n"
                    "0," + ",".join(["1.0"] * 12) + ",social nose contact\n")
    assert read_ratsi_csv(path).labels.tolist() == ["Social Nose Contact"]


@pytest.mark.parametrize("body, message", [
    ("0," + ",".join(["1"] * 11) + ",Solitary\n", "expected 14 fields"),
    ("0," + ",".join(["1"] * 12) + ",Dancing\n", "unknown behaviour label"),
    ("0," + ",".join(["1"] * 12) + ",Solitary\n0," + ",".join(["1"] * 12) + ",Solitary\n", "not increasing"),
    ("0," + ",".join(["x"] * 12) + ",Solitary\n", ":2:"),
])
def test_malformed_rows_report_file_and_line(tmp_path, body, message):
    path = tmp_path / "bad.csv"
    path.write_text("frame," + ",".join(f"c{j}" for j in range(12)) + ",label\n" + body)
    with pytest.raises(IngestionError, match=message):
        read_ratsi_csv(path)


def test_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n")
    with pytest.raises(IngestionError, match=":1:"):
        read_ratsi_csv(path)


def test_load_ratsi_requires_every_video(ratsi_root, tmp_path):
    manifest = load_ratsi(ratsi_root)
    assert manifest.video_ids == RATSI_VIDEOS
    assert set(RATSI_KEPT) <= set(manifest.class_counts())
    (tmp_path / "Observation01.csv").write_text((ratsi_root / "Observation01.csv").read_text())
    with pytest.raises(IngestionError, match="missing"):
        load_ratsi(tmp_path)


def test_calms21_round_trip(tmp_path, rng):
    frames = rng.normal(size=(6, 28))
    frames[2, 5] = np.nan
    v = VideoRecord("mouse001", frames, np.array(["attack", "Other", "mount", "Mount", "Other", "Investigation"]))
    write_calms21_json([v], tmp_path / "train.json")
    write_calms21_json([], tmp_path / "test.json")
    train, test = load_calms21(tmp_path)
    got = train.video("mouse001")
    np.testing.assert_array_equal(np.isnan(got.frames), np.isnan(frames))
    assert got.labels.tolist()[:3] == ["Attack", "Other", "Mount"]
    assert test.videos == []


def test_calms21_rejects_wrong_width(tmp_path):
    (tmp_path / "train.json").write_text(json.dumps({"a": {"keypoints": [[0.0] * 27], "labels": ["Other"]}}))
    (tmp_path / "test.json").write_text("{}")
    with pytest.raises(IngestionError, match="27 columns"):
        load_calms21(tmp_path)


def test_calms21_rejects_length_mismatch(tmp_path):
    (tmp_path / "train.json").write_text(json.dumps({"a": {"keypoints": [[0.0] * 28], "labels": []}}))
    (tmp_path / "test.json").write_text("{}")
    with pytest.raises(IngestionError, match="1 frames but 0 labels"):
        load_calms21(tmp_path)


def test_video_record_checks_lengths():
    with pytest.raises(IngestionError):
        VideoRecord("v", np.zeros((3, 2)), np.array(["a", "b"]))


def test_manifest_rejects_mixed_dimensions():
    a = VideoRecord("a", np.zeros((2, 3)), np.array(["x", "x"]))
    b = VideoRecord("b", np.zeros((2, 4)), np.array(["x", "x"]))
    with pytest.raises(IngestionError):
        DatasetManifest("d", [a, b], ["x"])


# ---------------------------------------------------------------- published statistics

def test_ratsi_reference_counts_total():
    rows = reference_counts("ratsi")
    assert {v for v, _, _ in rows} == set(RATSI_VIDEOS)
    # dataset description: "approximately 202,550 labeled frames"
    assert sum(n for _, _, n in rows) == 202_550


def test_calms21_reference_counts_totals():
    train = reference_counts("calms21_train")
    test = reference_counts("calms21_test")
    assert {c for _, c, _ in train} == set(CALMS21_CLASSES)
    assert sum(n for _, _, n in train) == 507_738
    # the raw test set size quoted next to the evaluated-window count
    assert sum(n for _, _, n in test) == 262_107


def test_validation_reports_each_mismatch(tmp_path):
    v = VideoRecord("Observation01", np.zeros((4, 12)), np.array(["Solitary"] * 3 + ["Following"]))
    manifest = DatasetManifest("ratsi", [v], RATSI_KEPT)
    expected = tmp_path / "counts.csv"
    expected.write_text("video_id,class,count\nObservation01,Solitary,3\nObservation01,Following,2\n"
                        "*,Solitary,3\nObservation02,Solitary,1\n")
    report = validate_manifest(manifest, expected)
    assert not report.ok and report.exit_code == 1
    assert report.lines() == [
        "Observation01 Following: expected 2, found 1",
        "Observation02 Solitary: expected 1, found 0",
    ]
    assert validate_manifest(manifest, [("*", "Solitary", 3)]).exit_code == 0


def test_expected_counts_header_checked(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("video,class,n\n")
    with pytest.raises(IngestionError):
        read_expected_counts(p)
