"""Training losses: base and sampler cross-entropy plus latent consistency.

The consistency term pulls each mask row's hidden state toward the hidden
state of the regular row that shares its target. The anchor side is
detached, so only the mask representations move.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    IGNORE_ID,
    Tensor,
    add,
    cross_entropy,
    detach,
    dot_const,
    mean_axis1,
    mul,
    scale,
    sub,
    take_rows,
)
from .batching import MaskedBatch
from .sampler import SamplerHead, sampler_logits_rows


@dataclass
class LossReport:
    base_ce: float
    sampler_ce: float
    lcm: float
    total: float
    n_ntp: int  # labeled regular rows contributing to the averages
    n_mtp: int  # labeled mask rows


def base_and_sampler_ce(
    batch: MaskedBatch,
    hidden: Tensor,
    base_logits: Tensor,
    sampler: SamplerHead | None = None,
    unembed: Tensor | None = None,
    embeddings: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Mean cross-entropies over every labeled row (regular and mask alike).

    The sampler term teacher-forces: each row's head input is the gold
    token preceding that row's target. Without a sampler the second term
    is a constant zero.
    """
    base = cross_entropy(base_logits, batch.base_labels)
    if sampler is None:
        return base, Tensor(np.zeros((), dtype=base_logits.data.dtype))
    rows = np.flatnonzero(batch.base_labels != IGNORE_ID)
    if rows.size == 0:
        return base, Tensor(np.zeros((), dtype=base_logits.data.dtype))
    prev_ids = batch.prev_token[rows]
    if (prev_ids < 0).any():
        raise ValueError("labeled row without a preceding gold token")
    logits = sampler_logits_rows(sampler, unembed, embeddings, prev_ids, take_rows(hidden, rows))
    samp = cross_entropy(logits, batch.base_labels[rows])
    return base, samp


def lcm_loss(hidden: Tensor, lcm_pairs: list[tuple[int, int]]) -> Tensor:
    """Mean over anchors of the mean squared gap to their paired mask rows.

    The squared gap is averaged over hidden dimensions as well, so the
    value does not scale with d. Anchors are detached: no gradient flows
    into the regular-row representations.
    """
    if not lcm_pairs:
        return Tensor(np.zeros((), dtype=hidden.data.dtype))
    mask_rows = np.array([p[0] for p in lcm_pairs], dtype=np.int64)
    anchor_rows = np.array([p[1] for p in lcm_pairs], dtype=np.int64)
    anchors = detach(take_rows(hidden, anchor_rows))
    mtp = take_rows(hidden, mask_rows)
    per_pair = mean_axis1(mul(sub(mtp, anchors), sub(mtp, anchors)))
    counts: dict[int, int] = {}
    for a in anchor_rows:
        counts[int(a)] = counts.get(int(a), 0) + 1
    n_anchors = len(counts)
    weights = np.array([1.0 / (n_anchors * counts[int(a)]) for a in anchor_rows])
    return dot_const(per_pair, weights)


def total_loss(base_ce: Tensor, sampler_ce: Tensor, lcm: Tensor, weights=(1.0, 1.0, 1.0)) -> Tensor:
    wb, ws, wl = weights
    if wb < 0 or ws < 0 or wl < 0:
        raise ValueError("loss weights must be nonnegative")
    return add(add(scale(base_ce, wb), scale(sampler_ce, ws)), scale(lcm, wl))


def ntp_only_ce(batch: MaskedBatch, base_logits: Tensor) -> Tensor:
    """Cross-entropy restricted to labeled regular rows (the quality metric
    that must stay flat while the adapters train)."""
    labels = batch.base_labels.copy()
    labels[batch.gate == 1] = IGNORE_ID
    return cross_entropy(base_logits, labels)


def make_report(
    batch: MaskedBatch, base_ce: Tensor, sampler_ce: Tensor, lcm: Tensor, total: Tensor
) -> LossReport:
    labeled = batch.base_labels != IGNORE_ID
    return LossReport(
        base_ce=base_ce.item(),
        sampler_ce=sampler_ce.item(),
        lcm=lcm.item(),
        total=total.item(),
        n_ntp=int((labeled & (batch.gate == 0)).sum()),
        n_mtp=int((labeled & (batch.gate == 1)).sum()),
    )
