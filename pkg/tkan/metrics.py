"""Loss, similarity, gallery ranking and ROC/AUC metrics."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, ProtocolError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


def cross_entropy(probs, labels):
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != probs.shape[0]:
        raise ContractError(f"{labels.shape[0]} labels for {probs.shape[0]} predictions")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ContractError(f"label out of range [0, {probs.shape[1]})")
    picked = probs[np.arange(labels.shape[0]), labels]
    return float(-np.mean(np.log(np.maximum(picked, LOG_FLOOR))))


def cross_entropy_grad(probs, labels):
    """Gradient of the batch-mean loss with respect to the logits."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    grad = probs.copy()
    grad[np.arange(labels.shape[0]), labels] -= 1.0
    return grad / labels.shape[0]


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    norm_a = math.sqrt(float(a @ a))
    norm_b = math.sqrt(float(b @ b))
    if norm_a == 0 or norm_b == 0:
        logger.warning("cosine similarity with a zero vector; scoring it 0")
        return 0.0
    return float(np.clip((a @ b) / (norm_a * norm_b), -1.0, 1.0))


def cosine_similarity_matrix(A, B):
    """Pairwise cosine similarity of rows; zero rows score 0 against everything."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    norm_a = np.linalg.norm(A, axis=1, keepdims=True)
    norm_b = np.linalg.norm(B, axis=1, keepdims=True)
    zero_rows = int(np.sum(norm_a == 0) + np.sum(norm_b == 0))
    if zero_rows:
        logger.warning("%d zero vector(s) in cosine similarity; scoring them 0", zero_rows)
    unit_a = np.divide(A, norm_a, out=np.zeros_like(A), where=norm_a > 0)
    unit_b = np.divide(B, norm_b, out=np.zeros_like(B), where=norm_b > 0)
    return np.clip(unit_a @ unit_b.T, -1.0, 1.0)


def subject_sort_key(subject):
    text = str(subject).strip()
    if text.isdigit():
        return (0, int(text))
    return (1, text)


@dataclass
class ProbeRanking:
    subject: object
    ranked: list
    scores: list

    @property
    def rank(self):
        """1-based position of the true subject, or None when it is not in the gallery."""
        try:
            return self.ranked.index(self.subject) + 1
        except ValueError:
            return None


def rank_gallery(similarities, gallery_subjects, allowed=None):
    """Order gallery subjects by their best-matching allowed clip.

    Ties fall back to ascending subject id so reports are deterministic.
    """
    best = {}
    for index, subject in enumerate(gallery_subjects):
        if allowed is not None and not allowed[index]:
            continue
        score = float(similarities[index])
        if subject not in best or score > best[subject]:
            best[subject] = score
    order = sorted(best, key=lambda subject: (-best[subject], subject_sort_key(subject)))
    return order, [best[subject] for subject in order]


def rank_probes(
    probe_embeddings,
    probe_subjects,
    gallery_embeddings,
    gallery_subjects,
    probe_views=None,
    gallery_views=None,
    exclude_same_view=False,
):
    similarities = cosine_similarity_matrix(probe_embeddings, gallery_embeddings)
    rankings = []
    for index, subject in enumerate(probe_subjects):
        allowed = None
        if exclude_same_view:
            allowed = [view != probe_views[index] for view in gallery_views]
        ranked, scores = rank_gallery(similarities[index], gallery_subjects, allowed)
        rankings.append(ProbeRanking(subject, ranked, scores))
    return rankings


def rank_k_accuracy(rankings, k):
    """Percentage of probes whose true subject is within the top ``k``; missing subjects are excluded."""
    ranks = [ranking.rank for ranking in rankings if ranking.subject in ranking.ranked]
    if not ranks:
        return 0.0
    return 100.0 * sum(1 for rank in ranks if rank <= k) / len(ranks)


def cmc_curve(rankings, max_rank):
    return [rank_k_accuracy(rankings, k) for k in range(1, max_rank + 1)]


def confusion_matrix(true_subjects, predicted_subjects, subjects):
    index = {subject: position for position, subject in enumerate(subjects)}
    matrix = np.zeros((len(subjects), len(subjects)), dtype=np.int64)
    for truth, predicted in zip(true_subjects, predicted_subjects):
        if truth in index and predicted in index:
            matrix[index[truth], index[predicted]] += 1
    return matrix


def binary_auc(scores, positives):
    """Mann-Whitney AUC with mid-ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ProtocolError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class AucResult:
    micro: float
    macro: float
    per_class: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)


def roc_auc(scores, labels):
    """One-vs-rest AUC. ``scores`` is ``(N, C)``; ``labels`` holds class indices."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ContractError(f"one-vs-rest AUC needs (N, C>=2) scores, got {scores.shape}")
    if labels.shape[0] != scores.shape[0]:
        raise ContractError(f"{labels.shape[0]} labels for {scores.shape[0]} score rows")
    if np.unique(labels).size < 2:
        raise ProtocolError("all samples belong to one class; AUC is undefined")
    onehot = np.zeros(scores.shape, dtype=bool)
    onehot[np.arange(labels.shape[0]), labels] = True
    micro = binary_auc(scores.reshape(-1), onehot.reshape(-1))
    per_class, skipped = {}, []
    for column in range(scores.shape[1]):
        positives = onehot[:, column]
        if positives.all() or not positives.any():
            skipped.append(column)
            continue
        per_class[column] = binary_auc(scores[:, column], positives)
    if skipped:
        logger.warning("AUC skipped %d class(es) without both positives and negatives", len(skipped))
    macro = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return AucResult(micro=micro, macro=macro, per_class=per_class, skipped=skipped)
