"""Training objectives.

The SR branch is trained with a gradient-profile loss (L1 between forward
spatial differences of the prediction and the target), the recognition branch
with CTC. Both are applied to every iteration's output with weight 2**i so
later iterations dominate, and the two weighted sums are added.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import torch

from .charset import Label, ctc_min_frames

# Log-probability used for impossible alignment states. Finite (rather than
# -inf) so that logsumexp never sees an all--inf reduction, which would
# poison gradients with NaNs; exp(-1e5) is exactly 0.0 in both float32 and
# float64, so the value is as good as -inf for the forward pass.
_NEG_INF = -1.0e5


class NumericsError(RuntimeError):
    """A loss term came out non-finite."""


def gradient_profile_loss(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between the spatial gradients of two images.

    Forward differences along width and along height, each compared with L1
    and averaged; the two directional means are averaged together. Accepts
    (C, H, W) or (B, C, H, W); both arguments must match exactly.
    """
    if sr.shape != hr.shape:
        raise ValueError(
            f"prediction {tuple(sr.shape)} and target {tuple(hr.shape)} "
            f"must have the same shape"
        )
    if sr.dim() not in (3, 4):
        raise ValueError(f"expected an image or a batch of images, got {sr.dim()}-d")
    dx_sr = sr[..., :, 1:] - sr[..., :, :-1]
    dx_hr = hr[..., :, 1:] - hr[..., :, :-1]
    dy_sr = sr[..., 1:, :] - sr[..., :-1, :]
    dy_hr = hr[..., 1:, :] - hr[..., :-1, :]
    loss_x = (dx_sr - dx_hr).abs().mean()
    loss_y = (dy_sr - dy_hr).abs().mean()
    return 0.5 * (loss_x + loss_y)


def _as_index_tuples(labels) -> list[tuple[int, ...]]:
    if isinstance(labels, Label):
        labels = [labels]
    elif isinstance(labels, Sequence) and labels and isinstance(labels[0], int):
        labels = [tuple(labels)]
    out = []
    for item in labels:
        if isinstance(item, Label):
            out.append(item.indices)
        else:
            out.append(tuple(int(v) for v in item))
    return out


def ctc_loss_batch(
    logits: torch.Tensor,
    targets: Iterable,
    blank: int = 0,
) -> torch.Tensor:
    """Negative log-likelihood of each target under the CTC alignment model.

    logits: (B, T, K) unnormalized scores; targets: B label index sequences
    (blank excluded). Returns a (B,) tensor. The forward recursion runs in
    log space over the blank-augmented label, so short sequences are exact
    and long ones are stable.
    """
    if logits.dim() != 3:
        raise ValueError(f"expected (B, T, K) logits, got {tuple(logits.shape)}")
    b, t, k = logits.shape
    seqs = _as_index_tuples(targets)
    if len(seqs) != b:
        raise ValueError(f"{b} logit rows but {len(seqs)} labels")
    for seq in seqs:
        if not seq:
            raise ValueError("cannot score an empty label")
        if any(not (0 < v < k) for v in seq):
            raise ValueError(f"label index out of range for {k} classes: {seq}")
        need = ctc_min_frames(seq)
        if need > t:
            raise ValueError(
                f"label needs {need} frames but only {t} are available"
            )

    log_probs = torch.log_softmax(logits, dim=-1)
    device, dtype = logits.device, logits.dtype

    s_max = 2 * max(len(seq) for seq in seqs) + 1
    ext = torch.full((b, s_max), blank, dtype=torch.long, device=device)
    ends = torch.zeros(b, dtype=torch.long, device=device)
    for i, seq in enumerate(seqs):
        ext[i, 1 : 2 * len(seq) : 2] = torch.tensor(seq, device=device)
        ends[i] = 2 * len(seq)
    # A state may inherit from two back only when it is a non-blank label
    # position different from the label two states earlier.
    can_skip = torch.zeros(b, s_max, dtype=torch.bool, device=device)
    can_skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    positions = torch.arange(s_max, device=device).expand(b, s_max)
    valid = positions <= ends.unsqueeze(1)

    neg = torch.full((b, 1), _NEG_INF, dtype=dtype, device=device)
    alpha = torch.full((b, s_max), _NEG_INF, dtype=dtype, device=device)
    emit0 = log_probs[:, 0].gather(1, ext)
    alpha[:, 0] = emit0[:, 0]
    alpha[:, 1] = emit0[:, 1]
    for step in range(1, t):
        stay = alpha
        move = torch.cat([neg, alpha[:, :-1]], dim=1)
        skip = torch.cat([neg, neg, alpha[:, :-2]], dim=1)
        skip = torch.where(can_skip, skip, torch.as_tensor(_NEG_INF, dtype=dtype, device=device))
        alpha = torch.logsumexp(torch.stack([stay, move, skip]), dim=0)
        alpha = torch.where(valid, alpha, torch.as_tensor(_NEG_INF, dtype=dtype, device=device))
        alpha = alpha + log_probs[:, step].gather(1, ext)
    tail = torch.stack(
        [alpha.gather(1, (ends - 1).unsqueeze(1)), alpha.gather(1, ends.unsqueeze(1))],
        dim=0,
    )
    return -torch.logsumexp(tail, dim=0).squeeze(1)


def ctc_loss(logits: torch.Tensor, target, blank: int = 0) -> torch.Tensor:
    """CTC negative log-likelihood for a single (T, K) sequence."""
    if logits.dim() != 2:
        raise ValueError(f"expected (T, K) logits, got {tuple(logits.shape)}")
    return ctc_loss_batch(logits.unsqueeze(0), [target], blank=blank)[0]


@dataclass
class LossTerm:
    """One weighted summand of the objective."""

    name: str
    iteration: int
    weight: float
    value: float


@dataclass
class LossReport:
    """Differentiable loss values plus a per-term breakdown for logging."""

    sr: torch.Tensor
    rec: torch.Tensor
    total: torch.Tensor
    terms: list[LossTerm]

    def detached(self) -> "LossReport":
        return LossReport(
            sr=self.sr.detach(),
            rec=self.rec.detach(),
            total=self.total.detach(),
            terms=list(self.terms),
        )

    def to_dict(self) -> dict:
        return {
            "sr_loss": float(self.sr),
            "rec_loss": float(self.rec),
            "total": float(self.total),
            "terms": [
                {
                    "name": term.name,
                    "iteration": term.iteration,
                    "weight": term.weight,
                    "value": term.value,
                }
                for term in self.terms
            ],
        }


def _check_trace(trace) -> int:
    """Validates the census of a forward trace and returns the iteration count."""
    n_iter = len(trace.p_hat_list)
    if len(trace.sr_images) != n_iter + 1:
        raise ValueError(
            f"trace holds {len(trace.sr_images)} SR images but "
            f"{n_iter + 1} were expected for {n_iter} iterations"
        )
    if len(trace.p_list) != n_iter + 1:
        raise ValueError(
            f"trace holds {len(trace.p_list)} token distributions but "
            f"{n_iter + 1} were expected for {n_iter} iterations"
        )
    return n_iter


def sr_loss(trace, hr: torch.Tensor) -> tuple[torch.Tensor, list[LossTerm]]:
    """Weighted sum of gradient-profile losses over all SR outputs."""
    n_iter = _check_trace(trace)
    total = None
    terms = []
    for i, sr in enumerate(trace.sr_images, start=1):
        value = gradient_profile_loss(sr, hr)
        weight = float(2**i)
        total = weight * value if total is None else total + weight * value
        terms.append(LossTerm("gradient_profile", i, weight, float(value.detach())))
    assert total is not None and n_iter >= 1
    return total, terms


def rec_loss(trace, labels) -> tuple[torch.Tensor, list[LossTerm]]:
    """Weighted sum of CTC losses over all token distributions.

    Both the carried-token distributions (one per iteration plus the final
    head) and the pixel-clue distributions (one per iteration) contribute,
    each with weight 2**i. Batch reduction is the mean.
    """
    _check_trace(trace)
    seqs = _as_index_tuples(labels)
    total = None
    terms = []
    for i, p in enumerate(trace.p_list, start=1):
        value = ctc_loss_batch(p, seqs).mean()
        weight = float(2**i)
        total = weight * value if total is None else total + weight * value
        terms.append(LossTerm("ctc", i, weight, float(value.detach())))
    for i, p_hat in enumerate(trace.p_hat_list, start=1):
        value = ctc_loss_batch(p_hat, seqs).mean()
        weight = float(2**i)
        total = total + weight * value
        terms.append(LossTerm("ctc_pixel", i, weight, float(value.detach())))
    assert total is not None
    return total, terms


def total_loss(trace, hr: torch.Tensor, labels) -> LossReport:
    """Joint objective: sum of the SR and recognition weighted losses."""
    sr_total, sr_terms = sr_loss(trace, hr)
    rec_total, rec_terms = rec_loss(trace, labels)
    return LossReport(
        sr=sr_total,
        rec=rec_total,
        total=sr_total + rec_total,
        terms=sr_terms + rec_terms,
    )
