"""Clip records, silhouette-tree loading, and frame preprocessing.

Tree layout: ``root/<subject>/<cond>-<seq>/<view>/<frame>.pgm`` (PNG accepted).
Every loaded clip is resized to ``frame_size`` squared, scaled to ``[0, 1]``
and brought to exactly ``clip_length`` frames.
"""

import csv
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ContractError, FormatError
from .feature_io import read_features
from .metrics import subject_sort_key

logger = logging.getLogger(__name__)

CONDITIONS = ("NM", "BG", "CL")
CLIP_LENGTH = 50
FRAME_SIZE = 64
FRAME_SUFFIXES = (".pgm", ".png")
FEATURE_SUFFIX = ".tkft"
CASIA_TRAIN_SUBJECTS = range(1, 75)
CASIA_TEST_SUBJECTS = range(75, 125)

_SEQUENCE_RE = re.compile(r"^(?P<cond>nm|bg|cl)-(?P<seq>\d{1,3})$", re.IGNORECASE)
_DIGITS_RE = re.compile(r"(\d+)")


def parse_subject(value):
    text = str(value).strip()
    return int(text) if text.isdigit() else text


def parse_sequence_dir(name):
    """``"nm-01"`` -> ``("NM", 1)``; None when the name is not a sequence directory."""
    match = _SEQUENCE_RE.match(name.strip())
    if not match:
        return None
    return match.group("cond").upper(), int(match.group("seq"))


def _natural_key(name):
    return [int(part) if part.isdigit() else part for part in _DIGITS_RE.split(name)]


@dataclass
class ClipRecord:
    subject: object
    condition: str
    seq: int
    view: object = None
    frames: np.ndarray = None
    features: np.ndarray = None
    source: str = ""

    def __post_init__(self):
        self.condition = str(self.condition).upper()
        if self.condition not in CONDITIONS:
            raise ContractError(f"unknown condition {self.condition!r}; expected one of {CONDITIONS}")
        if (self.frames is None) == (self.features is None):
            raise ContractError("a clip carries either frames or features, not both or neither")
        if self.frames is not None:
            if self.frames.ndim != 4 or self.frames.shape[1] != 1:
                raise ContractError(f"frames must be (T, 1, S, S), got {self.frames.shape}")
            if self.frames.size and (self.frames.min() < 0.0 or self.frames.max() > 1.0):
                raise ContractError("frame values must lie in [0, 1]")
        elif self.features.ndim != 2:
            raise ContractError(f"features must be (T, d), got {self.features.shape}")

    @property
    def data(self):
        return self.frames if self.frames is not None else self.features

    @property
    def length(self):
        return self.data.shape[0]

    @property
    def key(self):
        return (subject_sort_key(self.subject), self.condition, self.seq, str(self.view or ""))

    @property
    def name(self):
        view = f"/{self.view}" if self.view is not None else ""
        return f"{self.subject}/{self.condition.lower()}-{self.seq:02d}{view}"


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        overlap = self.train_subjects & self.test_subjects
        if overlap:
            raise ContractError(
                f"train and test subjects overlap: {sorted(overlap, key=subject_sort_key)}"
            )

    @property
    def train_subjects(self):
        return {record.subject for record in self.train}

    @property
    def test_subjects(self):
        return {record.subject for record in self.test}


def split_by_subject(records, train_subjects=CASIA_TRAIN_SUBJECTS, test_subjects=CASIA_TEST_SUBJECTS):
    train_ids = {parse_subject(subject) for subject in train_subjects}
    test_ids = {parse_subject(subject) for subject in test_subjects}
    train, test, dropped = [], [], 0
    for record in records:
        if record.subject in train_ids:
            train.append(record)
        elif record.subject in test_ids:
            test.append(record)
        else:
            dropped += 1
    if dropped:
        logger.warning("%d clip(s) belong to neither the train nor the test subject range", dropped)
    return DatasetSplit(train=train, test=test)


def length_indices(count, length=CLIP_LENGTH):
    """Frame indices after windowing (centred) or cyclic padding."""
    if count < 1:
        raise ContractError("cannot normalise the length of an empty sequence")
    if count >= length:
        start = (count - length) // 2
        return list(range(start, start + length))
    return [index % count for index in range(length)]


def normalize_length(frames, length=CLIP_LENGTH):
    indices = length_indices(len(frames), length)
    if isinstance(frames, np.ndarray):
        return frames[indices]
    return [frames[index] for index in indices]


def _axis_sampling(source, target):
    if source == 1 or target == 1:
        coords = np.zeros(target)
    else:
        coords = np.arange(target) * (source - 1) / (target - 1)
    lower = np.minimum(np.floor(coords).astype(np.int64), max(source - 2, 0))
    upper = np.minimum(lower + 1, source - 1)
    return lower, upper, coords - lower


def resize_bilinear(frame, size=FRAME_SIZE):
    """Corner-aligned bilinear resize of a 2-D frame to ``size`` x ``size``."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2 or min(frame.shape) < 1:
        raise ContractError(f"resize expects a non-empty 2-D frame, got {frame.shape}")
    if frame.shape == (size, size):
        return frame.copy()
    y0, y1, fy = _axis_sampling(frame.shape[0], size)
    x0, x1, fx = _axis_sampling(frame.shape[1], size)
    fy = fy[:, None]
    fx = fx[None, :]
    top = frame[y0][:, x0] * (1.0 - fx) + frame[y0][:, x1] * fx
    bottom = frame[y1][:, x0] * (1.0 - fx) + frame[y1][:, x1] * fx
    return np.clip(top * (1.0 - fy) + bottom * fy, 0.0, 1.0)


def read_frame(path):
    """Decode one frame to a float grayscale array in ``[0, 1]``."""
    with Image.open(path) as image:
        image.load()
        if image.mode in ("I;16", "I;16B", "I;16L", "I"):
            return np.clip(np.asarray(image, dtype=np.float64) / 65535.0, 0.0, 1.0)
        return np.asarray(image.convert("L"), dtype=np.float64) / 255.0


@dataclass
class LoadReport:
    loaded: int = 0
    warnings: list = field(default_factory=list)
    errors: list = field(default_factory=list)


def _load_sequence(frame_paths, clip_length, frame_size, report, label):
    frames = []
    for path in frame_paths:
        try:
            frames.append(resize_bilinear(read_frame(path), frame_size))
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            message = f"skipping unreadable frame {path}: {exc}"
            logger.warning(message)
            report.warnings.append(message)
    if not frames:
        report.errors.append(f"{label}: no readable frames")
        return None
    stacked = np.stack(normalize_length(frames, clip_length))
    return stacked[:, None, :, :]


def _frame_files(directory):
    names = [
        name
        for name in os.listdir(directory)
        if name.lower().endswith(FRAME_SUFFIXES) and os.path.isfile(os.path.join(directory, name))
    ]
    return [os.path.join(directory, name) for name in sorted(names, key=_natural_key)]


def _sorted_dirs(path):
    return sorted(
        (name for name in os.listdir(path) if os.path.isdir(os.path.join(path, name))),
        key=_natural_key,
    )


def load_silhouette_dir(root, clip_length=CLIP_LENGTH, frame_size=FRAME_SIZE, include_report=False):
    records = []
    report = LoadReport()
    for subject_name in _sorted_dirs(root):
        subject_path = os.path.join(root, subject_name)
        for sequence_name in _sorted_dirs(subject_path):
            parsed = parse_sequence_dir(sequence_name)
            if parsed is None:
                continue
            condition, seq = parsed
            sequence_path = os.path.join(subject_path, sequence_name)
            for view in _sorted_dirs(sequence_path):
                view_path = os.path.join(sequence_path, view)
                label = f"{subject_name}/{sequence_name}/{view}"
                frames = _load_sequence(_frame_files(view_path), clip_length, frame_size, report, label)
                if frames is None:
                    continue
                records.append(
                    ClipRecord(
                        subject=parse_subject(subject_name),
                        condition=condition,
                        seq=seq,
                        view=view,
                        frames=frames,
                        source=view_path,
                    )
                )
    records.sort(key=lambda record: record.key)
    report.loaded = len(records)
    if report.errors:
        logger.warning("%d sequence(s) could not be loaded", len(report.errors))
    logger.info("loaded %d clip(s) from %s", len(records), root)
    return (records, report) if include_report else records


def write_silhouette_dir(records, root):
    """Write frame clips as 8-bit PGM files plus a ``manifest.csv``; returns the manifest path."""
    rows = []
    for record in records:
        if record.frames is None:
            raise ContractError(f"{record.name}: only frame clips can be written as silhouettes")
        view = str(record.view if record.view is not None else "000")
        relative = os.path.join(str(record.subject), f"{record.condition.lower()}-{record.seq:02d}", view)
        directory = os.path.join(root, relative)
        os.makedirs(directory, exist_ok=True)
        for index, frame in enumerate(record.frames[:, 0]):
            pixels = np.round(frame * 255.0).astype(np.uint8)
            Image.fromarray(pixels).save(os.path.join(directory, f"{index:03d}.pgm"))
        rows.append((record.subject, record.condition.lower(), record.seq, view, relative))
    manifest_path = os.path.join(root, "manifest.csv")
    write_manifest(rows, manifest_path)
    return manifest_path


def write_manifest(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        for row in rows:
            writer.writerow(row)


def load_manifest(path, clip_length=CLIP_LENGTH, frame_size=FRAME_SIZE, include_report=False):
    """Read ``subject,cond,seq,view,path`` lines; paths are frame directories or feature files."""
    base = os.path.dirname(os.path.abspath(path))
    records = []
    report = LoadReport()
    with open(path, newline="", encoding="utf-8") as handle:
        for line_number, row in enumerate(csv.reader(handle), start=1):
            if not row or row[0].strip().startswith("#") or row[0].strip().lower() == "subject":
                continue
            if len(row) != 5:
                raise FormatError(f"{path}:{line_number}: expected 5 fields, got {len(row)}")
            subject, condition, seq, view, target = (value.strip() for value in row)
            target = target if os.path.isabs(target) else os.path.join(base, target)
            label = f"{path}:{line_number}"
            common = dict(
                subject=parse_subject(subject),
                condition=condition,
                seq=int(seq),
                view=view or None,
                source=target,
            )
            if target.lower().endswith(FEATURE_SUFFIX):
                features = read_features(target).astype(np.float64)
                records.append(ClipRecord(features=normalize_length(features, clip_length), **common))
                continue
            frames = _load_sequence(_frame_files(target), clip_length, frame_size, report, label)
            if frames is not None:
                records.append(ClipRecord(frames=frames, **common))
    records.sort(key=lambda record: record.key)
    report.loaded = len(records)
    return (records, report) if include_report else records
