"""Training objectives: CTC for stage-1 recognition, masked dual binary
cross-entropy plus fake-count cross-entropy for stage-2 detection.

The CTC loss is the log-space forward (alpha) recursion over the
blank-extended target; the blank id is the last logit index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .corpus import DualLabel
from .errors import DataError, NumericError

_NEG = -1e30  # effectively log(0) while keeping gradients NaN-free


@dataclass
class LossBreakdown:
    """Scalar loss terms; stage-2 total is bce + ce_weight * ce."""

    ctc: torch.Tensor
    bce: torch.Tensor
    ce: torch.Tensor
    total: torch.Tensor

    def to_dict(self) -> dict:
        return {
            "ctc": float(self.ctc),
            "bce": float(self.bce),
            "ce": float(self.ce),
            "total": float(self.total),
        }


def _extend_with_blanks(target: Sequence[int], blank: int) -> list[int]:
    ext = [blank]
    for t in target:
        ext.append(int(t))
        ext.append(blank)
    return ext


def ctc_feasible(n_frames: int, target: Sequence[int]) -> bool:
    """True when some alignment of length n_frames collapses to target."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return n_frames >= len(target) + repeats


def ctc_loss(logits: torch.Tensor, target: Sequence[int]) -> torch.Tensor:
    """-log P(target | logits) for one sequence.

    logits is (T, C+1) with the blank at index C; target contains ids in
    [0, C-1]. Raises on NaN logits or an infeasible target length.
    """
    if logits.dim() != 2:
        raise DataError(f"ctc_loss expects (T, C+1) logits, got {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise NumericError("ctc_loss received non-finite logits")
    n_frames, n_classes = logits.shape
    blank = n_classes - 1
    target = [int(t) for t in target]
    if any(not (0 <= t < blank) for t in target):
        raise DataError("target ids must lie in [0, C-1]")
    if not ctc_feasible(n_frames, target):
        raise DataError(
            f"target of length {len(target)} is infeasible for {n_frames} frames"
        )

    log_probs = torch.log_softmax(logits, dim=-1)
    if not target:
        return -log_probs[:, blank].sum()

    ext = _extend_with_blanks(target, blank)
    s = len(ext)
    ext_t = torch.tensor(ext, dtype=torch.long, device=logits.device)
    # alpha[s]: log prob of prefixes ending at extended symbol s
    neg = torch.full((s,), _NEG, dtype=log_probs.dtype, device=logits.device)
    alpha = neg.clone()
    alpha[0] = log_probs[0, blank]
    alpha[1] = log_probs[0, ext[1]]

    # transition from s-2 is allowed only onto a non-blank differing from ext[s-2]
    can_skip = torch.zeros(s, dtype=torch.bool, device=logits.device)
    for i in range(2, s):
        can_skip[i] = ext[i] != blank and ext[i] != ext[i - 2]

    for t in range(1, n_frames):
        stay = alpha
        step = torch.cat([neg[:1], alpha[:-1]])
        skip = torch.cat([neg[:2], alpha[:-2]])
        skip = torch.where(can_skip, skip, neg)
        alpha = torch.logsumexp(torch.stack([stay, step, skip]), dim=0) + log_probs[t, ext_t]

    return -torch.logsumexp(torch.stack([alpha[-1], alpha[-2]]), dim=0)


def ctc_loss_mean(logit_seqs: Sequence[torch.Tensor], targets: Sequence[Sequence[int]]) -> torch.Tensor:
    """Batch-mean CTC loss over (logits, target) pairs."""
    if len(logit_seqs) != len(targets) or not logit_seqs:
        raise DataError("need equally many non-empty logits and targets")
    return torch.stack([ctc_loss(l, t) for l, t in zip(logit_seqs, targets)]).mean()


def _as_label_tensor(label, dtype, device) -> torch.Tensor:
    if isinstance(label, DualLabel):
        vals = [label.audio_fake, label.video_fake]
    else:
        vals = [float(label[0]), float(label[1])]
    return torch.tensor(vals, dtype=dtype, device=device)


def dual_bce(modality_logits: torch.Tensor, label, loss_mask=None) -> torch.Tensor:
    """Per-modality binary cross-entropy, averaged over unmasked modalities.

    loss_mask is two bools; True excludes that modality entirely (its logit
    contributes neither value nor gradient). Both masked contributes zero.
    """
    targets = _as_label_tensor(label, modality_logits.dtype, modality_logits.device)
    per = torch.nn.functional.binary_cross_entropy_with_logits(
        modality_logits, targets, reduction="none"
    )
    if loss_mask is None:
        keep = torch.ones_like(per)
    else:
        keep = torch.tensor(
            [0.0 if m else 1.0 for m in loss_mask],
            dtype=per.dtype,
            device=per.device,
        )
    n = keep.sum()
    if n == 0:
        return modality_logits.sum() * 0.0
    return (per * keep).sum() / n


def count_ce(count_logits: torch.Tensor, label) -> torch.Tensor:
    """Cross-entropy of the fake-count head against p = audio_fake + video_fake."""
    if isinstance(label, DualLabel):
        p = label.fake_count()
    else:
        p = int(label[0]) + int(label[1])
    target = torch.tensor([p], dtype=torch.long, device=count_logits.device)
    return torch.nn.functional.cross_entropy(count_logits.unsqueeze(0), target)


def total_detection_loss(
    modality_logits: torch.Tensor,
    count_logits: torch.Tensor,
    label,
    loss_mask=None,
    ce_weight: float = 1.0,
) -> LossBreakdown:
    """Stage-2 objective: masked dual BCE plus fake-count CE."""
    bce = dual_bce(modality_logits, label, loss_mask)
    ce = count_ce(count_logits, label)
    zero = torch.zeros((), dtype=bce.dtype, device=bce.device)
    return LossBreakdown(ctc=zero, bce=bce, ce=ce, total=bce + ce_weight * ce)
