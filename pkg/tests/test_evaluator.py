import math

import numpy as np
import pytest

from app.evaluator import (
    EmbeddedClip,
    EvalProtocol,
    EvalReport,
    comparison_table,
    evaluate,
    pixel_mean_report,
    score_embeddings,
)
from helpers import make_feature_records
from tkan.errors import ProtocolError
from tkan.model import GaitModel

PLAN = [
    ("NM", 1, "072"),
    ("NM", 2, "090"),
    ("NM", 3, "108"),
    ("NM", 4, "072"),
    ("NM", 5, "090"),
    ("NM", 6, "108"),
    ("BG", 1, "090"),
    ("CL", 1, "072"),
]


def _clips(num_subjects=3, noise=0.05, views=True, seed=0):
    rng = np.random.default_rng(seed)
    clips = []
    for subject in range(1, num_subjects + 1):
        centre = np.eye(num_subjects + 2)[subject]
        for condition, seq, view in PLAN:
            embedding = centre + noise * rng.normal(size=centre.shape)
            clips.append(EmbeddedClip(subject, condition, seq, view if views else None, embedding))
    return clips


class TestProtocol:
    def test_default_sets(self):
        protocol = EvalProtocol()
        assert protocol.probe_names == ["NM", "BG", "CL"]
        clip = EmbeddedClip(1, "NM", 4, "090", None)
        assert protocol.is_gallery(clip)
        assert protocol.probe_set(EmbeddedClip(1, "CL", 2, "090", None)) == "CL"
        assert protocol.probe_set(clip) is None

    def test_overlap_is_rejected(self):
        with pytest.raises(ProtocolError):
            EvalProtocol(probes=(("NM", (("NM", 4), ("NM", 5))),))


class TestScoring:
    def test_separable_embeddings(self):
        report = score_embeddings(_clips(), head="tkan", seed=3)
        for name in ("NM", "BG", "CL"):
            result = report.conditions[name]
            assert result.rank1 == 100.0
            assert result.rank5 == 100.0
            assert result.cmc == [100.0, 100.0, 100.0]
            assert result.auc_micro == 1.0
        assert report.conditions["NM"].probes == 6
        assert report.confusion.trace() == report.confusion.sum() == 12

    def test_same_view_gallery_is_excluded(self):
        e = np.eye(3)
        clips = [
            EmbeddedClip(1, "NM", 1, "000", e[0] + 0.1 * e[2]),
            EmbeddedClip(2, "NM", 1, "000", e[1]),
            # impostor sharing the probe's view
            EmbeddedClip(2, "NM", 2, "090", e[0]),
            EmbeddedClip(1, "BG", 1, "090", e[0]),
        ]
        kept = score_embeddings(clips, EvalProtocol(exclude_same_view=False))
        excluded = score_embeddings(clips, EvalProtocol(exclude_same_view=True))
        assert kept.conditions["BG"].rank1 == 0.0
        assert excluded.conditions["BG"].rank1 == 100.0
        assert any("AUC undefined" in note for note in excluded.notes)

    def test_missing_views_skip_exclusion(self):
        report = score_embeddings(_clips(views=False))
        assert report.conditions["NM"].rank1 == 100.0
        assert any("view tags absent" in note for note in report.notes)

    def test_probe_without_gallery_is_counted(self):
        clips = _clips() + [EmbeddedClip(9, "BG", 1, "090", np.ones(5))]
        result = score_embeddings(clips).conditions["BG"]
        assert result.missing == 1
        assert result.probes == 4
        assert result.rank1 == 100.0

    def test_no_gallery(self):
        clips = [c for c in _clips() if c.condition != "NM"]
        with pytest.raises(ProtocolError):
            score_embeddings(clips)

    def test_empty_probe_set_is_noted(self):
        clips = [c for c in _clips() if c.condition != "CL"]
        report = score_embeddings(clips)
        assert "CL" not in report.conditions
        assert "CL: no probe clips" in report.notes

    def test_zero_embeddings_are_noted(self):
        clips = _clips()
        clips[4].embedding = np.zeros_like(clips[4].embedding)
        report = score_embeddings(clips)
        assert "1 zero embedding(s) scored with similarity 0" in report.notes


class TestReportText:
    def test_round_trip(self):
        report = score_embeddings(_clips(), head="lstm", seed=5, config={"width": 8, "lstm_widths": [6, 4]})
        report.curves = [{"epoch": 1, "train_loss": 1.25, "val_loss": math.nan}]
        report.notes.append("synthetic run")
        parsed = EvalReport.from_text(report.to_text())
        assert parsed.head == "lstm"
        assert parsed.seed == 5
        assert parsed.config == {"width": "8", "lstm_widths": "6,4"}
        assert parsed.conditions["CL"].rank1 == 100.0
        assert parsed.conditions["NM"].cmc == report.conditions["NM"].cmc
        assert parsed.confusion_subjects == [1, 2, 3]
        assert (parsed.confusion == report.confusion).all()
        assert parsed.curves[0]["train_loss"] == 1.25
        assert math.isnan(parsed.curves[0]["val_loss"])
        assert parsed.notes == ["synthetic run"]

    def test_numbers_use_six_decimals(self):
        text = score_embeddings(_clips()).to_text()
        assert "NM\t100.000000\t100.000000\t1.000000\t1.000000\t6\t0" in text

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "report.txt"
        score_embeddings(_clips(), head="tkan").write(path)
        assert EvalReport.read(path).head == "tkan"


class TestComparisonTable:
    def test_rows_and_columns(self):
        reports = {"tkan": score_embeddings(_clips()), "pixel-mean": score_embeddings(_clips(views=False))}
        reports["lstm"] = EvalReport()
        lines = comparison_table(reports).splitlines()
        assert lines[0] == "method\tNM R1\tNM R5\tBG R1\tBG R5\tCL R1\tCL R5"
        assert lines[1].startswith("CNN+TKAN\t100.00")
        assert lines[2].startswith("Pixel mean (NN)")
        assert lines[3] == "CNN+LSTM\t-\t-\t-\t-\t-\t-"


class TestEndToEnd:
    def test_pixel_mean_baseline(self):
        report = pixel_mean_report(make_feature_records(num_subjects=4, clips=8))
        assert report.head == "pixel-mean"
        assert report.conditions["NM"].rank1 == 100.0

    def test_evaluate_model(self, tiny_config):
        records = make_feature_records(num_subjects=3, clips=8)
        report = evaluate(GaitModel(tiny_config, 3), records)
        assert report.head == "tkan"
        assert report.seed == 7
        assert set(report.conditions) == {"NM", "BG", "CL"}
        assert report.config["width"] == 8
