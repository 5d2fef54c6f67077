"""Greedy reference decoding and speculative decoding with verification.

Every speculative step runs one forward pass over verified tokens, the
current speculation, and fresh mask blocks. Speculated tokens count only
after the model's own next-token argmax confirms them, which makes the
emitted stream identical to plain greedy decoding; speculation changes
speed, never content.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .batching import (
    build_linear_inference_input,
    build_quadratic_inference_input,
    causal_rows,
)
from .model import ModelBundle, forward
from .sampler import SamplerHead, sampler_chain
from .tensor import Tensor

STRATEGIES = ("linear", "quadratic")


@dataclass
class StepTrace:
    accepted: int
    emitted: int
    speculation_source: str  # "masks", "override", or "none"


@dataclass
class DecodeState:
    verified: list[int]
    speculated: list[int] = field(default_factory=list)
    steps: int = 0
    generated: int = 0
    trace: list[StepTrace] = field(default_factory=list)


@dataclass
class AcceptanceStats:
    generated: int  # G: tokens added beyond the prompt
    steps: int  # T: forward passes
    histogram: dict[int, int] = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return acceptance_rate(self)


def acceptance_rate(stats: AcceptanceStats) -> float:
    """Verified tokens per forward pass, G / T."""
    if stats.steps < 1:
        raise ValueError("acceptance rate needs at least one step")
    return stats.generated / stats.steps


def _run(model: ModelBundle, batch):
    return forward(model, batch.tokens, batch.position_ids, batch.attention_allowed, batch.gate)


def greedy_autoregressive(model: ModelBundle, prompt, max_new: int, eos: int | None = None) -> list[int]:
    """One token per full-prefix forward pass; the correctness baseline."""
    tokens = [int(t) for t in prompt]
    if not tokens:
        raise ValueError("prompt must be nonempty")
    for _ in range(max_new):
        out = _run(model, causal_rows(tokens))
        nxt = int(np.argmax(out.logits.data[-1]))
        tokens.append(nxt)
        if eos is not None and nxt == eos:
            break
    return tokens


def verify_speculated(chain_preds, speculated) -> tuple[int, list[int]]:
    """Longest verified prefix of the speculation, plus one free token.

    chain_preds c_0..c_s are the model's own argmax picks: c_0 at the last
    verified token, c_j at speculated token j. Acceptance stops at the
    first j with s_j != c_(j-1); the emitted tokens are the accepted
    prefix followed by c_a, all of them verified.
    """
    chain_preds = [int(t) for t in chain_preds]
    speculated = [int(t) for t in speculated]
    if len(chain_preds) != len(speculated) + 1:
        raise ValueError("need exactly one more chain prediction than speculated tokens")
    a = 0
    while a < len(speculated) and speculated[a] == chain_preds[a]:
        a += 1
    return a, speculated[:a] + [chain_preds[a]]


def speculative_decode(
    model: ModelBundle,
    sampler: SamplerHead | None,
    prompt,
    k_eval: int,
    strategy: str = "quadratic",
    max_steps: int = 100,
    eos: int | None = None,
    cover_reject_first: bool = True,
    speculation_override=None,
) -> tuple[list[int], AcceptanceStats]:
    """Decode up to max_steps forward passes; each pass emits 1..k_eval+1 tokens.

    Without a sampler, mask rows fall back to their base-head argmax.
    speculation_override(state, last_token, block_logits, block_hidden)
    replaces the speculation source (hook for adversarial-speculation
    tests; exactness holds for any speculation whatsoever).
    """
    cfg = model.config
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if not 1 <= k_eval <= cfg.k_masks:
        raise ValueError(f"k_eval must be in 1..{cfg.k_masks}")
    mask_ids = cfg.mask_ids[:k_eval]
    state = DecodeState(verified=[int(t) for t in prompt])
    if not state.verified:
        raise ValueError("prompt must be nonempty")
    stats = AcceptanceStats(generated=0, steps=0)

    for _ in range(max_steps):
        n_ver = len(state.verified)
        if not state.speculated:
            batch = build_linear_inference_input(state.verified, [], mask_ids)
        elif strategy == "linear":
            batch = build_linear_inference_input(state.verified, state.speculated, mask_ids)
        else:
            batch = build_quadratic_inference_input(
                state.verified, state.speculated, mask_ids, cover_reject_first
            )
        out = _run(model, batch)
        logits = out.logits.data

        #

        chain_rows = [r for r in np.flatnonzero(batch.gate == 0) if r >= n_ver]
        preds = [int(np.argmax(logits[n_ver - 1]))]
        preds += [int(np.argmax(logits[r])) for r in chain_rows]
        accepted, emitted = verify_speculated(preds, state.speculated)

        anchor_row = n_ver - 1 if accepted == 0 else chain_rows[accepted - 1]
        block = batch.block_rows(anchor_row)

        stats.steps += 1
        stats.histogram[accepted] = stats.histogram.get(accepted, 0) + 1

        hit_eos = False
        appended = 0
        for tok in emitted:
            state.verified.append(tok)
            appended += 1
            if eos is not None and tok == eos:
                hit_eos = True
                break
        stats.generated += appended
        state.generated = stats.generated
        state.steps = stats.steps

        if hit_eos:
            state.trace.append(StepTrace(accepted, appended, "none"))
            state.speculated = []
            break

        source = "none"
        if speculation_override is not None:
            state.speculated = [
                int(t)
                for t in speculation_override(state, emitted[-1], logits[block], out.hidden.data[block])
            ]
            source = "override"
        elif block.size:
            if sampler is not None:
                zs = [Tensor(out.hidden.data[r]) for r in block]
                state.speculated = sampler_chain(
                    sampler, model.unembed, model.embedding_table(), emitted[-1], zs
                )
            else:
                state.speculated = [int(np.argmax(logits[r])) for r in block]
            source = "masks"
        else:
            state.speculated = []
        state.trace.append(StepTrace(accepted, appended, source))

    return state.verified, stats


def future_rank_probe(model: ModelBundle, prompt, true_future, k: int) -> list[int]:
    """Rank (1-based) of each anticipated token in the base logits at the
    mask appended for it. Rank 1 means the mask row's argmax is the truth.

    The j-th appended mask forecasts the token j+1 positions past the
    prompt end (the immediate next token belongs to the prompt's own last
    row), so true_future[0] should be the second upcoming token.
    """
    true_future = [int(t) for t in true_future]
    if len(true_future) > k:
        raise ValueError("more future tokens than masks")
    batch = build_linear_inference_input(list(prompt), [], model.config.mask_ids[:k])
    logits = _run(model, batch).logits.data
    ranks = []
    for j, tok in enumerate(true_future):
        row = logits[len(prompt) + j]
        ranks.append(1 + int((row > row[tok]).sum()))
    return ranks
