"""Evaluation measures for dual-label detection.

The two label slots (audio, video) are treated as independent binary
problems with "fake" as the positive class. OF1 micro-pools both slots'
confusion counts, CF1 averages the two slot F1s, WF1 weights each slot by
its positive support. AUC is the exact Mann-Whitney statistic (ties get
half credit) and EER interpolates the FPR/FNR crossing over a sweep of
score-midpoint thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import DualLabel
from .errors import DataError
from .model import (
    PRESENCE_AV,
    PRESENCE_AUDIO_ONLY,
    PRESENCE_VIDEO_ONLY,
    DetectionOutput,
    PresenceMask,
)

DEFAULT_SCENARIOS = (PRESENCE_AV, PRESENCE_AUDIO_ONLY, PRESENCE_VIDEO_ONLY)


@dataclass
class ScoredSample:
    """Detection scores for one sample under one presence scenario."""

    sample_id: str
    p_audio_fake: float
    p_video_fake: float
    fused_real_score: float
    label: DualLabel
    scenario: PresenceMask
    count_pred: int | None = None


@dataclass
class EvalReport:
    """Metric bundle for one presence scenario; absent-modality metrics are None."""

    scenario: str
    n_samples: int
    AF1: float | None = None
    VF1: float | None = None
    OF1: float | None = None
    CF1: float | None = None
    WF1: float | None = None
    AACC: float | None = None
    VACC: float | None = None
    AUC_audio: float | None = None
    AUC_video: float | None = None
    AUC_fused: float | None = None
    EER_audio: float | None = None
    EER_video: float | None = None
    count_confusion: list = field(default_factory=list)  # 3x3, rows = true count

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items()}
        d["count_confusion"] = [list(map(int, row)) for row in self.count_confusion]
        return d


def binarize(scores, threshold: float = 0.5) -> np.ndarray:
    """pred = 1 iff score >= threshold."""
    return (np.asarray(scores, dtype=np.float64) >= threshold).astype(np.int64)


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom > 0 else 0.0


def _slot_counts(preds: np.ndarray, labels: np.ndarray) -> tuple[int, int, int]:
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    return tp, fp, fn


def f1_suite(preds, labels, slots: tuple[int, ...] = (0, 1)) -> dict:
    """AF1/VF1 per slot plus OF1 (micro), CF1 (slot mean), WF1 (support-weighted).

    preds and labels are (n, 2) binary arrays; slot 0 is audio, 1 is video.
    `slots` restricts pooling to the modalities present in a scenario.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.size == 0:
        raise DataError("f1_suite requires at least one sample")
    if preds.shape != labels.shape or preds.ndim != 2 or preds.shape[1] != 2:
        raise DataError("preds and labels must both be (n, 2)")

    per_slot = {}
    counts = {}
    for s in (0, 1):
        tp, fp, fn = _slot_counts(preds[:, s], labels[:, s])
        per_slot[s] = _f1_from_counts(tp, fp, fn)
        counts[s] = (tp, fp, fn)

    tp = sum(counts[s][0] for s in slots)
    fp = sum(counts[s][1] for s in slots)
    fn = sum(counts[s][2] for s in slots)
    of1 = _f1_from_counts(tp, fp, fn)
    cf1 = float(np.mean([per_slot[s] for s in slots]))
    supports = {s: int(labels[:, s].sum()) for s in (0, 1)}
    wsum = sum(supports[s] for s in slots)
    wf1 = sum(supports[s] * per_slot[s] for s in slots) / wsum if wsum > 0 else 0.0

    return {
        "AF1": per_slot[0],
        "VF1": per_slot[1],
        "OF1": of1,
        "CF1": cf1,
        "WF1": wf1,
    }


def _check_binary(labels: np.ndarray, what: str) -> None:
    if labels.min() == labels.max():
        raise DataError(f"{what} requires both classes present")


def roc_auc(scores, binary_labels) -> float:
    """Exact Mann-Whitney AUC via average ranks; ties earn half credit."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(binary_labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise DataError("scores and labels must be equal-length 1-D arrays")
    _check_binary(labels, "roc_auc")

    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average of 1-based ranks
        i = j + 1

    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _operating_points(scores: np.ndarray, labels: np.ndarray):
    """FPR/FNR at thresholds below, between (midpoints) and above all scores."""
    uniq = np.unique(scores)
    thresholds = np.concatenate(
        [[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1] + 1.0]]
    )
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    fpr = np.array([np.sum((scores >= t) & (labels == 0)) / n_neg for t in thresholds])
    fnr = np.array([np.sum((scores < t) & (labels == 1)) / n_pos for t in thresholds])
    return fpr, fnr


def eer(scores, binary_labels) -> float:
    """Equal error rate: the FPR = FNR crossing, linearly interpolated
    between adjacent operating points."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(binary_labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise DataError("scores and labels must be equal-length 1-D arrays")
    _check_binary(labels, "eer")

    fpr, fnr = _operating_points(scores, labels)
    diff = fnr - fpr
    for i in range(len(diff) - 1):
        if diff[i] <= 0.0 <= diff[i + 1]:
            if diff[i + 1] == diff[i]:
                return float(fpr[i])
            t = -diff[i] / (diff[i + 1] - diff[i])
            return float(fpr[i] + t * (fpr[i + 1] - fpr[i]))
    # no sign change (degenerate separability); closest point
    k = int(np.argmin(np.abs(diff)))
    return float((fpr[k] + fnr[k]) / 2.0)


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    return float(np.mean(preds == labels))


def count_confusion(true_counts, pred_counts) -> np.ndarray:
    """3x3 integer matrix, rows = true fake count, cols = predicted."""
    mat = np.zeros((3, 3), dtype=np.int64)
    for t, p in zip(true_counts, pred_counts):
        mat[int(t), int(p)] += 1
    return mat


def report_from_scores(scored: Sequence[ScoredSample], threshold: float = 0.5) -> EvalReport:
    """Assemble the metric bundle for one scenario's scored samples."""
    if not scored:
        raise DataError("cannot evaluate an empty score list")
    scenario = scored[0].scenario
    labels = np.array([s.label.as_tuple() for s in scored], dtype=np.int64)
    p_audio = np.array([s.p_audio_fake for s in scored])
    p_video = np.array([s.p_video_fake for s in scored])
    preds = np.stack([binarize(p_audio, threshold), binarize(p_video, threshold)], axis=1)

    slots = tuple(
        s for s, ok in ((0, scenario.audio_present), (1, scenario.video_present)) if ok
    )
    f1 = f1_suite(preds, labels, slots=slots)
    report = EvalReport(scenario=scenario.name, n_samples=len(scored))
    report.OF1, report.CF1, report.WF1 = f1["OF1"], f1["CF1"], f1["WF1"]

    if scenario.audio_present:
        report.AF1 = f1["AF1"]
        report.AACC = accuracy(preds[:, 0], labels[:, 0])
        report.AUC_audio = roc_auc(p_audio, labels[:, 0])
        report.EER_audio = eer(p_audio, labels[:, 0])
    if scenario.video_present:
        report.VF1 = f1["VF1"]
        report.VACC = accuracy(preds[:, 1], labels[:, 1])
        report.AUC_video = roc_auc(p_video, labels[:, 1])
        report.EER_video = eer(p_video, labels[:, 1])
    if scenario.audio_present and scenario.video_present:
        any_fake = (labels.sum(axis=1) > 0).astype(np.int64)
        fused_fake_score = 1.0 - np.array([s.fused_real_score for s in scored])
        report.AUC_fused = roc_auc(fused_fake_score, any_fake)

    true_counts = labels.sum(axis=1)
    pred_counts = [
        s.count_pred if s.count_pred is not None else int(preds[i].sum())
        for i, s in enumerate(scored)
    ]
    report.count_confusion = count_confusion(true_counts, pred_counts).tolist()
    return report


def evaluate_scenarios(
    detect_fn: Callable[[object, PresenceMask], DetectionOutput],
    samples: Sequence,
    scenarios: Sequence[PresenceMask] = DEFAULT_SCENARIOS,
    threshold: float = 0.5,
) -> dict[str, EvalReport]:
    """Run detection under each presence scenario and bundle the metrics.

    detect_fn maps (sample, presence) to a DetectionOutput; samples carry
    .sample_id and .label.
    """
    if not samples:
        raise DataError("cannot evaluate an empty test split")
    reports = {}
    for presence in scenarios:
        scored = []
        for sample in samples:
            out = detect_fn(sample, presence)
            scored.append(
                ScoredSample(
                    sample_id=sample.sample_id,
                    p_audio_fake=out.p_audio_fake,
                    p_video_fake=out.p_video_fake,
                    fused_real_score=out.fused_real_score,
                    label=sample.label,
                    scenario=presence,
                    count_pred=int(np.argmax(out.count_probs)),
                )
            )
        reports[presence.name] = report_from_scores(scored, threshold)
    return reports
