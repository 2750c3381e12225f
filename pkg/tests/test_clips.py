import logging
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from PIL import Image

from tkan.clips import (
    ClipRecord,
    DatasetSplit,
    length_indices,
    load_manifest,
    load_silhouette_dir,
    normalize_length,
    parse_sequence_dir,
    resize_bilinear,
    split_by_subject,
    write_manifest,
    write_silhouette_dir,
)
from tkan.errors import ContractError, FormatError
from tkan.feature_io import write_features


def _write_sequence(directory, count, size=64):
    os.makedirs(directory, exist_ok=True)
    for index in range(count):
        pixels = np.full((size, size), index, dtype=np.uint8)
        Image.fromarray(pixels).save(os.path.join(directory, f"{index}.pgm"))


def _frame_indices(record):
    return np.round(record.frames[:, 0, 0, 0] * 255.0).astype(int).tolist()


class TestLengthNormalisation:
    def test_exact_length_is_identity(self):
        assert length_indices(50) == list(range(50))

    def test_long_sequences_take_centred_window(self):
        assert length_indices(100) == list(range(25, 75))
        assert length_indices(73) == list(range(11, 61))

    def test_short_sequences_wrap_cyclically(self):
        assert length_indices(20) == [index % 20 for index in range(50)]
        assert_array_equal(normalize_length(np.arange(3), 7), [0, 1, 2, 0, 1, 2, 0])

    def test_empty_sequence(self):
        with pytest.raises(ContractError):
            normalize_length([])


class TestResize:
    def test_same_size_is_identity(self, rng):
        frame = rng.uniform(size=(64, 64))
        assert_array_equal(resize_bilinear(frame, 64), frame)

    def test_constant_stays_constant(self):
        assert_allclose(resize_bilinear(np.full((37, 23), 0.4), 64), 0.4)

    def test_checkerboard_is_bilinear(self):
        out = resize_bilinear(np.array([[0.0, 1.0], [1.0, 0.0]]), 5)
        f = np.linspace(0.0, 1.0, 5)
        fy, fx = f[:, None], f[None, :]
        assert_allclose(out, fx + fy - 2.0 * fx * fy, atol=1e-12)

    def test_rejects_non_2d(self):
        with pytest.raises(ContractError):
            resize_bilinear(np.zeros((2, 2, 3)))


class TestSilhouetteTree:
    def test_sequence_names(self):
        assert parse_sequence_dir("nm-01") == ("NM", 1)
        assert parse_sequence_dir("CL-02") == ("CL", 2)
        assert parse_sequence_dir("calibration") is None

    def test_empty_root(self, tmp_path):
        assert load_silhouette_dir(str(tmp_path)) == []

    def test_exact_and_long_sequences(self, tmp_path):
        _write_sequence(tmp_path / "001" / "nm-01" / "090", 50)
        _write_sequence(tmp_path / "001" / "bg-01" / "090", 73)
        records = load_silhouette_dir(str(tmp_path))
        assert [(r.condition, r.seq) for r in records] == [("BG", 1), ("NM", 1)]
        bg, nm = records
        assert nm.frames.shape == (50, 1, 64, 64)
        assert _frame_indices(nm) == list(range(50))
        assert _frame_indices(bg) == list(range(11, 61))
        assert nm.subject == 1
        assert nm.view == "090"

    def test_frames_are_resized_and_scaled(self, tmp_path):
        _write_sequence(tmp_path / "002" / "nm-01" / "000", 10, size=32)
        (record,) = load_silhouette_dir(str(tmp_path), clip_length=12, frame_size=16)
        assert record.frames.shape == (12, 1, 16, 16)
        assert 0.0 <= record.frames.min() <= record.frames.max() <= 1.0

    def test_unreadable_frame_is_skipped(self, tmp_path, caplog):
        directory = tmp_path / "003" / "nm-02" / "018"
        _write_sequence(directory, 5)
        (directory / "bad.pgm").write_bytes(b"not an image")
        with caplog.at_level(logging.WARNING, logger="tkan.clips"):
            records, report = load_silhouette_dir(str(tmp_path), clip_length=5, include_report=True)
        assert len(records) == 1
        assert len(report.warnings) == 1
        assert "bad.pgm" in caplog.text

    def test_empty_sequence_is_reported(self, tmp_path):
        (tmp_path / "004" / "cl-01" / "090").mkdir(parents=True)
        records, report = load_silhouette_dir(str(tmp_path), include_report=True)
        assert records == []
        assert len(report.errors) == 1

    def test_rgb_frames_use_luma(self, tmp_path):
        directory = tmp_path / "005" / "nm-01" / "090"
        directory.mkdir(parents=True)
        Image.new("RGB", (64, 64), (255, 0, 0)).save(directory / "000.png")
        (record,) = load_silhouette_dir(str(tmp_path), clip_length=1)
        assert record.frames[0, 0, 0, 0] == pytest.approx(0.299, abs=1.0 / 255)

    def test_order_is_deterministic(self, tmp_path):
        for subject in ("10", "2", "1"):
            _write_sequence(tmp_path / subject / "nm-01" / "090", 3)
        first = [r.name for r in load_silhouette_dir(str(tmp_path), clip_length=3)]
        second = [r.name for r in load_silhouette_dir(str(tmp_path), clip_length=3)]
        assert first == second == ["1/nm-01/090", "2/nm-01/090", "10/nm-01/090"]


class TestManifest:
    def test_round_trip_through_written_tree(self, tmp_path):
        frames = (np.arange(4 * 16 * 16).reshape(4, 1, 16, 16) % 256) / 255.0
        records = [
            ClipRecord(subject=7, condition="NM", seq=1, view="090", frames=frames),
            ClipRecord(subject=8, condition="CL", seq=2, view="108", frames=1.0 - frames),
        ]
        manifest = write_silhouette_dir(records, str(tmp_path))
        loaded = load_manifest(manifest, clip_length=4, frame_size=16)
        assert [r.name for r in loaded] == ["7/nm-01/090", "8/cl-02/108"]
        assert_allclose(loaded[0].frames, frames, atol=1e-12)
        assert_allclose(loaded[1].frames, 1.0 - frames, atol=1e-12)

    def test_feature_files(self, tmp_path, rng):
        features = rng.normal(size=(6, 3)).astype(np.float32)
        write_features(tmp_path / "clip.tkft", features)
        write_manifest([("subject", "cond", "seq", "view", "path"), (3, "bg", 2, "", "clip.tkft")], tmp_path / "m.csv")
        (record,) = load_manifest(str(tmp_path / "m.csv"), clip_length=6)
        assert record.features.shape == (6, 3)
        assert record.view is None
        assert_allclose(record.features, features)

    def test_bad_field_count(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("1,nm,1,090\n")
        with pytest.raises(FormatError):
            load_manifest(str(path))


class TestRecordsAndSplits:
    def test_record_contracts(self):
        with pytest.raises(ContractError):
            ClipRecord(subject=1, condition="XX", seq=1, features=np.zeros((2, 2)))
        with pytest.raises(ContractError):
            ClipRecord(subject=1, condition="NM", seq=1)
        with pytest.raises(ContractError):
            ClipRecord(subject=1, condition="NM", seq=1, frames=np.full((2, 1, 4, 4), 2.0))

    def test_split_by_subject(self):
        records = [ClipRecord(subject=s, condition="NM", seq=1, features=np.zeros((2, 2))) for s in (1, 74, 75, 200)]
        split = split_by_subject(records)
        assert split.train_subjects == {1, 74}
        assert split.test_subjects == {75}

    def test_overlap_is_rejected(self):
        record = ClipRecord(subject=1, condition="NM", seq=1, features=np.zeros((2, 2)))
        with pytest.raises(ContractError):
            DatasetSplit(train=[record], test=[record])
