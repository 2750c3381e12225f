"""Gallery/probe identification, per-condition Rank-k, ROC AUC and text reports."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from tkan.clips import CONDITIONS
from tkan.errors import FormatError, ProtocolError
from tkan.metrics import (
    cmc_curve,
    confusion_matrix,
    cosine_similarity_matrix,
    rank_k_accuracy,
    rank_probes,
    roc_auc,
    subject_sort_key,
)

logger = logging.getLogger(__name__)

MAX_CMC_RANK = 20
DEFAULT_GALLERY = (("NM", 1), ("NM", 2), ("NM", 3), ("NM", 4))
DEFAULT_PROBES = (
    ("NM", (("NM", 5), ("NM", 6))),
    ("BG", (("BG", 1), ("BG", 2))),
    ("CL", (("CL", 1), ("CL", 2))),
)


@dataclass(frozen=True)
class EvalProtocol:
    gallery: tuple = DEFAULT_GALLERY
    probes: tuple = DEFAULT_PROBES
    exclude_same_view: bool = True

    def __post_init__(self):
        gallery = set(self.gallery)
        for name, rules in self.probes:
            shared = gallery & set(rules)
            if shared:
                raise ProtocolError(f"probe set {name} overlaps the gallery on {sorted(shared)}")

    def is_gallery(self, clip):
        return (clip.condition, clip.seq) in self.gallery

    def probe_set(self, clip):
        for name, rules in self.probes:
            if (clip.condition, clip.seq) in rules:
                return name
        return None

    @property
    def probe_names(self):
        return [name for name, _ in self.probes]


@dataclass
class EmbeddedClip:
    subject: object
    condition: str
    seq: int
    view: object
    embedding: np.ndarray


@dataclass
class ConditionResult:
    rank1: float
    rank5: float
    probes: int
    missing: int = 0
    auc_micro: float = math.nan
    auc_macro: float = math.nan
    cmc: list = field(default_factory=list)


@dataclass
class EvalReport:
    head: str = ""
    seed: int = 0
    conditions: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    curves: list = field(default_factory=list)
    confusion: np.ndarray = None
    confusion_subjects: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def rank(self, condition, k):
        result = self.conditions[condition]
        return result.rank1 if k == 1 else result.rank5

    def to_text(self):
        lines = ["[report]", f"head: {self.head}", f"seed: {self.seed}", ""]
        lines.append("[config]")
        lines.extend(f"{key}: {_render(value)}" for key, value in sorted(self.config.items()))
        lines.append("")
        lines.append("[conditions]")
        lines.append("condition\trank1\trank5\tauc_micro\tauc_macro\tprobes\tmissing")
        for name, result in self.conditions.items():
            lines.append(
                "\t".join(
                    [
                        name,
                        _number(result.rank1),
                        _number(result.rank5),
                        _number(result.auc_micro),
                        _number(result.auc_macro),
                        str(result.probes),
                        str(result.missing),
                    ]
                )
            )
        for name, result in self.conditions.items():
            lines.append("")
            lines.append(f"[cmc:{name}]")
            lines.append("k\trate")
            lines.extend(f"{k}\t{_number(rate)}" for k, rate in enumerate(result.cmc, start=1))
        if self.curves:
            columns = list(self.curves[0])
            lines.append("")
            lines.append("[curves]")
            lines.append("\t".join(columns))
            lines.extend("\t".join(_number(row[c]) for c in columns) for row in self.curves)
        if self.confusion is not None:
            lines.append("")
            lines.append("[confusion]")
            lines.append("\t".join(["truth"] + [str(s) for s in self.confusion_subjects]))
            for subject, row in zip(self.confusion_subjects, self.confusion):
                lines.append("\t".join([str(subject)] + [str(int(v)) for v in row]))
        if self.notes:
            lines.append("")
            lines.append("[notes]")
            lines.extend(f"- {note}" for note in self.notes)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        report = cls()
        sections = _split_sections(text)
        if "report" not in sections:
            raise FormatError("missing [report] section")
        meta = _key_values(sections["report"])
        report.head = meta.get("head", "")
        report.seed = int(meta.get("seed", 0))
        report.config = _key_values(sections.get("config", []))
        rows = _table(sections.get("conditions", []))
        for row in rows:
            name = row["condition"]
            cmc_rows = _table(sections.get(f"cmc:{name}", []))
            report.conditions[name] = ConditionResult(
                rank1=float(row["rank1"]),
                rank5=float(row["rank5"]),
                probes=int(row["probes"]),
                missing=int(row["missing"]),
                auc_micro=float(row["auc_micro"]),
                auc_macro=float(row["auc_macro"]),
                cmc=[float(cmc["rate"]) for cmc in cmc_rows],
            )
        report.curves = [
            {key: float(value) for key, value in row.items()}
            for row in _table(sections.get("curves", []))
        ]
        confusion_lines = sections.get("confusion", [])
        if confusion_lines:
            report.confusion_subjects = [
                _subject(value) for value in confusion_lines[0].split("\t")[1:]
            ]
            report.confusion = np.array(
                [[int(value) for value in line.split("\t")[1:]] for line in confusion_lines[1:]],
                dtype=np.int64,
            ).reshape(len(report.confusion_subjects), len(report.confusion_subjects))
        report.notes = [line[2:] for line in sections.get("notes", []) if line.startswith("- ")]
        return report

    def write(self, path):
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(self.to_text())
        logger.info("wrote evaluation report %s", path)
        return path

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as handle:
            return cls.from_text(handle.read())


def _render(value):
    if isinstance(value, (list, tuple)):
        return ",".join(str(item) for item in value)
    return str(value)


def _number(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "nan"
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return f"{float(value):.6f}"


def _subject(text):
    return int(text) if text.isdigit() else text


def _split_sections(text):
    sections, current = {}, None
    for raw in text.splitlines():
        line = raw.rstrip("\n")
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is not None and line.strip():
            sections[current].append(line)
    return sections


def _key_values(lines):
    values = {}
    for line in lines:
        if ": " not in line:
            raise FormatError(f"expected 'key: value', got {line!r}")
        key, value = line.split(": ", 1)
        values[key] = value
    return values


def _table(lines):
    if not lines:
        return []
    header = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        values = line.split("\t")
        if len(values) != len(header):
            raise FormatError(f"table row has {len(values)} fields, header has {len(header)}")
        rows.append(dict(zip(header, values)))
    return rows


def embed_records(model, records, batch_size=8):
    if not records:
        return []
    embeddings = model.embed(np.stack([record.data for record in records]), batch_size=batch_size)
    return [
        EmbeddedClip(record.subject, record.condition, record.seq, record.view, embedding)
        for record, embedding in zip(records, embeddings)
    ]


def pixel_mean_clips(records):
    """Baseline descriptors: each clip's time-averaged pixels (or features)."""
    return [
        EmbeddedClip(
            record.subject,
            record.condition,
            record.seq,
            record.view,
            record.data.mean(axis=0).reshape(-1),
        )
        for record in records
    ]


def _prototype_auc(probes, gallery):
    subjects = sorted({clip.subject for clip in gallery}, key=subject_sort_key)
    index = {subject: position for position, subject in enumerate(subjects)}
    prototypes = np.stack(
        [
            np.mean([clip.embedding for clip in gallery if clip.subject == subject], axis=0)
            for subject in subjects
        ]
    )
    scored = [clip for clip in probes if clip.subject in index]
    if len(subjects) < 2 or not scored:
        raise ProtocolError("AUC needs at least two gallery subjects and one matched probe")
    scores = cosine_similarity_matrix(np.stack([clip.embedding for clip in scored]), prototypes)
    labels = np.array([index[clip.subject] for clip in scored])
    return roc_auc(scores, labels)


def score_embeddings(clips, protocol=None, head="", seed=0, config=None, curves=None):
    protocol = protocol or EvalProtocol()
    gallery = [clip for clip in clips if protocol.is_gallery(clip)]
    report = EvalReport(head=head, seed=seed, config=dict(config or {}), curves=list(curves or []))
    if not gallery:
        raise ProtocolError("no gallery clips under the evaluation protocol")
    gallery_subjects = [clip.subject for clip in gallery]
    subjects = sorted(set(gallery_subjects), key=subject_sort_key)
    max_rank = min(MAX_CMC_RANK, len(subjects))
    exclude = protocol.exclude_same_view
    if exclude and any(clip.view is None for clip in clips):
        exclude = False
        note = "view tags absent; identical-view exclusion skipped"
        logger.warning(note)
        report.notes.append(note)
    zero = sum(1 for clip in clips if not np.any(clip.embedding))
    if zero:
        report.notes.append(f"{zero} zero embedding(s) scored with similarity 0")
    truths, predictions = [], []
    for name in protocol.probe_names:
        probes = [clip for clip in clips if protocol.probe_set(clip) == name]
        if not probes:
            report.notes.append(f"{name}: no probe clips")
            continue
        rankings = rank_probes(
            np.stack([clip.embedding for clip in probes]),
            [clip.subject for clip in probes],
            np.stack([clip.embedding for clip in gallery]),
            gallery_subjects,
            probe_views=[clip.view for clip in probes],
            gallery_views=[clip.view for clip in gallery],
            exclude_same_view=exclude,
        )
        missing = sum(1 for ranking in rankings if ranking.rank is None)
        if missing:
            logger.warning("%s: %d probe(s) have no gallery clips for their subject", name, missing)
            report.notes.append(f"{name}: {missing} probe(s) without gallery excluded from rates")
        result = ConditionResult(
            rank1=rank_k_accuracy(rankings, 1),
            rank5=rank_k_accuracy(rankings, 5),
            probes=len(probes),
            missing=missing,
            cmc=cmc_curve(rankings, max_rank),
        )
        try:
            auc = _prototype_auc(probes, gallery)
            result.auc_micro, result.auc_macro = auc.micro, auc.macro
        except ProtocolError as exc:
            report.notes.append(f"{name}: AUC undefined ({exc})")
        report.conditions[name] = result
        for ranking in rankings:
            if ranking.ranked:
                truths.append(ranking.subject)
                predictions.append(ranking.ranked[0])
    report.confusion_subjects = subjects
    report.confusion = confusion_matrix(truths, predictions, subjects)
    return report


def evaluate(model, records, protocol=None, head=None, config=None, curves=None):
    config = config or getattr(model, "config", None)
    head = head or getattr(config, "head", "")
    config_dict = config.to_dict() if hasattr(config, "to_dict") else dict(config or {})
    report = score_embeddings(
        embed_records(model, records),
        protocol,
        head=head,
        seed=config_dict.get("seed", 0),
        config=config_dict,
        curves=curves,
    )
    summary = ", ".join(
        f"{name} R1 {result.rank1:.1f}% R5 {result.rank5:.1f}%" for name, result in report.conditions.items()
    )
    logger.info("evaluation (%s): %s", head, summary)
    return report


def pixel_mean_report(records, protocol=None):
    return score_embeddings(pixel_mean_clips(records), protocol, head="pixel-mean")


def condition_auc(model, records, protocol=None):
    """``{condition: (micro, macro)}`` for tracking AUC during training."""
    report = score_embeddings(embed_records(model, records), protocol)
    return {name: (result.auc_micro, result.auc_macro) for name, result in report.conditions.items()}


COMPARISON_LABELS = {
    "tkan": "CNN+TKAN",
    "lstm": "CNN+LSTM",
    "transformer": "CNN+Transformer",
    "pixel-mean": "Pixel mean (NN)",
}


def comparison_table(reports, conditions=CONDITIONS):
    """Rank-1/Rank-5 by condition, one row per method."""
    header = ["method"]
    for name in conditions:
        header.extend([f"{name} R1", f"{name} R5"])
    lines = ["\t".join(header)]
    for label, report in reports.items():
        row = [COMPARISON_LABELS.get(label, label)]
        for name in conditions:
            result = report.conditions.get(name)
            row.extend(["-", "-"] if result is None else [f"{result.rank1:.2f}", f"{result.rank5:.2f}"])
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"
