"""Synthetic corpora, the fine-tuning loop, and AdamW.

Only the adapter factors, the mask-token embedding rows, and the sampler
head ever receive updates; the base transformer stays frozen. The loop
logs one comma-separated metrics record per step and tracks the regular
next-token loss on a frozen probe batch, which must not move while the
gate is honored.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .batching import MaskedBatch, build_training_batch, causal_rows
from .checkpoint import save_checkpoint
from .decoding import speculative_decode
from .losses import base_and_sampler_ce, lcm_loss, ntp_only_ce, total_loss
from .model import ModelBundle, ModelConfig, forward, init_model
from .sampler import SamplerHead, init_sampler
from .tensor import (
    IGNORE_ID,
    NumericsError,
    Tape,
    Tensor,
    add,
    backward,
    cross_entropy,
    derive_rng,
    scale,
)

METRICS_HEADER = "step,base_ce,sampler_ce,lcm,total,ntp_only_ce,lr,wall_ms"


class DivergenceError(RuntimeError):
    """Training loss went non-finite or blew past the divergence bound."""


# -----------------------------------------------------------------------------
# Vocabulary and corpora
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocab:
    """Character vocabulary plus reserved ids: charset, BOS, EOS, PAD, then
    the k mask ids at the very top."""

    charset: str
    k_masks: int

    @property
    def bos(self) -> int:
        return len(self.charset)

    @property
    def eos(self) -> int:
        return len(self.charset) + 1

    @property
    def pad(self) -> int:
        return len(self.charset) + 2

    @property
    def size(self) -> int:
        return len(self.charset) + 3 + self.k_masks

    @property
    def first_mask(self) -> int:
        return len(self.charset) + 3

    def encode(self, text: str, add_bos: bool = True, add_eos: bool = False) -> np.ndarray:
        ids = []
        if add_bos:
            ids.append(self.bos)
        for ch in text:
            j = self.charset.find(ch)
            if j < 0:
                raise ValueError(f"character {ch!r} not in the vocabulary")
            ids.append(j)
        if add_eos:
            ids.append(self.eos)
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids) -> str:
        pieces = []
        for t in ids:
            t = int(t)
            if t < len(self.charset):
                pieces.append(self.charset[t])
            elif t == self.bos:
                pieces.append("<bos>")
            elif t == self.eos:
                pieces.append("<eos>")
            elif t == self.pad:
                pieces.append("<pad>")
            else:
                pieces.append(f"<m{t - self.first_mask + 1}>")
        return "".join(pieces)


@dataclass(frozen=True)
class CorpusSpec:
    """What text to synthesize: repeating motifs, char-level addition, or a
    raw text file chopped into windows."""

    task: str = "pattern"
    size: int = 64
    seed: int = 0
    seq_len: int = 24
    period: int = 4  # pattern task
    alphabet: str = "abcdef"  # pattern task
    digits: int = 2  # arithmetic task
    path: str = ""  # file task

    def charset(self) -> str:
        if self.task == "pattern":
            return self.alphabet
        if self.task == "arithmetic":
            return "0123456789+="
        if self.task == "file":
            text = Path(self.path).read_text(encoding="utf-8")
            return "".join(sorted(set(text)))
        raise ValueError(f"unknown corpus task {self.task!r}")

    def vocab(self, k_masks: int) -> Vocab:
        return Vocab(self.charset(), k_masks)


def generate_corpus(spec: CorpusSpec, k_masks: int = 1) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic (token ids, loss flags) pairs. flags[i] == 1 means the
    row of token i carries a next-token loss (and spawns masks)."""
    vocab = spec.vocab(k_masks)
    out: list[tuple[np.ndarray, np.ndarray]] = []
    if spec.task == "pattern":
        for idx in range(spec.size):
            rng = derive_rng(spec.seed, f"pattern.{idx}")
            motif = rng.integers(0, len(spec.alphabet), size=spec.period)
            reps = int(np.ceil(spec.seq_len / spec.period))
            chars = np.tile(motif, reps)[: spec.seq_len]
            ids = np.concatenate([[vocab.bos], chars]).astype(np.int64)
            flags = np.ones(len(ids), dtype=np.int64)
            flags[-1] = 0
            out.append((ids, flags))
    elif spec.task == "arithmetic":
        hi = 10**spec.digits
        for idx in range(spec.size):
            rng = derive_rng(spec.seed, f"arithmetic.{idx}")
            a, b = int(rng.integers(0, hi)), int(rng.integers(0, hi))
            text = f"{a:0{spec.digits}d}+{b:0{spec.digits}d}={a + b:0{spec.digits + 1}d}"
            ids = vocab.encode(text, add_bos=True, add_eos=True)
            eq_pos = int(np.flatnonzero(ids == vocab.charset.find("="))[0])
            flags = np.zeros(len(ids), dtype=np.int64)
            flags[eq_pos : len(ids) - 1] = 1  # loss on the answer span and eos
            out.append((ids, flags))
    elif spec.task == "file":
        text = Path(spec.path).read_text(encoding="utf-8")
        if len(text) < spec.seq_len:
            raise ValueError("file shorter than one window")
        rng = derive_rng(spec.seed, "file.windows")
        for _ in range(spec.size):
            start = int(rng.integers(0, len(text) - spec.seq_len + 1))
            ids = vocab.encode(text[start : start + spec.seq_len], add_bos=True)
            flags = np.ones(len(ids), dtype=np.int64)
            flags[-1] = 0
            out.append((ids, flags))
    else:
        raise ValueError(f"unknown corpus task {spec.task!r}")
    return out


# -----------------------------------------------------------------------------
# AdamW
# -----------------------------------------------------------------------------


def adamw_step(p, g, m, v, t, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """In-place decoupled-weight-decay update for one parameter array.

    t is the 1-based step count. Bias correction makes the very first
    step move by roughly lr for a unit gradient.
    """
    if g.shape != p.shape:
        raise ValueError("gradient shape does not match parameter")
    b1, b2 = betas
    if weight_decay:
        p *= 1.0 - lr * weight_decay
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    p -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(self, params: list[tuple[str, Tensor]], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params}
        self.v = {n: np.zeros_like(p.data) for n, p in params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            adamw_step(
                p.data, p.grad, self.m[name], self.v[name], self.t,
                lr, self.betas, self.eps, self.weight_decay,
            )


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to base_lr, then flat. step is 0-based."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


# -----------------------------------------------------------------------------
# Training loop
# -----------------------------------------------------------------------------


@dataclass
class TrainConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    k_masks: int = 4
    lora_rank: int = 8
    max_position: int = 512
    tie_unembedding: bool = True
    train_mask_embeddings: bool = True

    learning_rate: float = 2e-4
    warmup_steps: int = 200
    total_steps: int = 2000
    batch_size: int = 8
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    loss_base: float = 1.0
    loss_sampler: float = 1.0
    loss_lcm: float = 1.0
    use_sampler: bool = True
    gated: bool = True  # False: adapters on every row (the ablation mode)
    sampler_prev_source: str = "gold"

    eval_every: int = 0  # 0 disables periodic acceptance evals
    eval_prompts: int = 4
    eval_prompt_len: int = 8
    eval_max_steps: int = 8

    # Acceptance measures agreement with the frozen base path, so the base
    # must be competent at the task before it is frozen. pretrain_steps > 0
    # fits all base weights on the plain causal objective first.
    pretrain_steps: int = 0
    pretrain_lr: float = 3e-3

    divergence_factor: float = 10.0
    divergence_patience: int = 50

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.sampler_prev_source != "gold":
            raise ValueError(
                "only gold (teacher-forced) sampler conditioning is implemented"
            )

    def model_config(self, charset: str) -> ModelConfig:
        return ModelConfig(
            vocab_size=len(charset) + 3 + self.k_masks,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            k_masks=self.k_masks,
            lora_rank=self.lora_rank,
            max_position=self.max_position,
            tie_unembedding=self.tie_unembedding,
            train_mask_embeddings=self.train_mask_embeddings,
        )

    @property
    def loss_weights(self) -> tuple[float, float, float]:
        return (self.loss_base, self.loss_sampler, self.loss_lcm)


@dataclass
class TrainResult:
    model: ModelBundle
    sampler: SamplerHead | None
    vocab: Vocab
    config: TrainConfig
    metrics: list[tuple]  # one row per step, METRICS_HEADER order
    probe_ntp_logits_initial: np.ndarray
    probe_ntp_logits_final: np.ndarray
    eval_history: list[tuple[int, float]]  # (step, mean acceptance rate)


def _forward_batch(model: ModelBundle, batch: MaskedBatch, gated: bool):
    gate = batch.gate if gated else np.ones(batch.size, dtype=np.int8)
    return forward(model, batch.tokens, batch.position_ids, batch.attention_allowed, gate)


def pretrain_base(config: TrainConfig, verbose: bool = False) -> ModelBundle:
    """Fit every base weight on the plain causal objective, then freeze.

    Returns a bundle ready for gated fine-tuning: competent frozen base,
    fresh random mask-embedding rows, zero-delta adapters. The unembedding
    trains independently here and is frozen afterwards, so later updates
    to the mask rows never touch it.
    """
    corpus = generate_corpus(config.corpus, config.k_masks)
    mcfg = config.model_config(config.corpus.charset())
    model = init_model(mcfg, config.seed)

    base_names = {"embed.base", "unembed", "final_ln.gain", "final_ln.bias"}
    base_params = []
    for name, t in model.named_params():
        core = name.split(".")[-1] in ("gain", "bias") or name.endswith(".W")
        if name in base_names or core:
            t.requires_grad = True
            base_params.append((name, t))
    opt = AdamW(base_params, weight_decay=0.0)

    batches = []
    for seq, flags in corpus:
        b = causal_rows(seq)
        labels = np.full(len(seq), IGNORE_ID, dtype=np.int64)
        live = np.flatnonzero(flags[:-1] == 1)
        labels[live] = seq[live + 1]
        b.base_labels = labels
        batches.append(b)

    order_rng = derive_rng(config.seed, "pretrain.order")
    for step in range(config.pretrain_steps):
        picks = order_rng.integers(0, len(batches), size=config.batch_size)
        with Tape() as tape:
            acc = None
            for si in picks:
                batch = batches[si]
                out = _forward_batch(model, batch, gated=True)
                loss = cross_entropy(out.logits, batch.base_labels)
                acc = loss if acc is None else add(acc, loss)
            loss = scale(acc, 1.0 / config.batch_size)
        backward(tape, loss)
        opt.step(warmup_lr(step, config.pretrain_lr, min(50, config.pretrain_steps // 10)))
        opt.zero_grad()
        if verbose and (step + 1) % 100 == 0:
            print(f"pretrain step {step}: ce {loss.item():.4f}")

    for _, t in base_params:
        t.requires_grad = False
        t.grad = None
    return model


def clone_base_with_rank(base: ModelBundle, rank: int, seed: int) -> ModelBundle:
    """Fresh fine-tuning bundle around an existing frozen base: new adapters
    at the requested rank, new random mask rows, base weights copied."""
    from dataclasses import replace as dc_replace

    cfg = dc_replace(base.config, lora_rank=rank)
    model = init_model(cfg, seed)
    fresh = dict(model.named_params())
    for name, t in base.named_params():
        if name == "embed.mask" or name.endswith(".A") or name.endswith(".B"):
            continue
        fresh[name].data = t.data.copy()
    return model


def _probe_ntp_logits(model, batch, gated) -> np.ndarray:
    out = _forward_batch(model, batch, gated)
    return out.logits.data[batch.ntp_rows].copy()


def eval_acceptance(model, sampler, vocab, corpus, config: TrainConfig) -> float:
    """Mean quadratic acceptance rate over a few held-out prompts."""
    rng = derive_rng(config.seed, "eval.prompts")
    rates = []
    for _ in range(config.eval_prompts):
        seq = corpus[int(rng.integers(0, len(corpus)))][0]
        prompt = seq[: config.eval_prompt_len].tolist()
        _, stats = speculative_decode(
            model, sampler, prompt, config.k_masks, "quadratic",
            max_steps=config.eval_max_steps, eos=vocab.eos,
        )
        rates.append(stats.rate)
    return float(np.mean(rates))


def train(
    config: TrainConfig,
    model: ModelBundle | None = None,
    sampler: SamplerHead | None = None,
    log_path=None,
    checkpoint_path=None,
    verbose: bool = False,
) -> TrainResult:
    """Run the fine-tuning loop; returns the trained bundle plus metrics.

    Aborts with DivergenceError when the loss goes non-finite or exceeds
    divergence_factor x the initial loss for divergence_patience
    consecutive steps.
    """
    corpus = generate_corpus(config.corpus, config.k_masks)
    vocab = config.corpus.vocab(config.k_masks)
    mcfg = config.model_config(vocab.charset)
    if model is None:
        if config.pretrain_steps > 0:
            model = pretrain_base(config, verbose=verbose)
        else:
            model = init_model(mcfg, config.seed)
    if sampler is None and config.use_sampler:
        sampler = init_sampler(config.d_model, config.seed + 1)

    trainable = model.trainable_params() + (sampler.trainable_params() if sampler else [])
    opt = AdamW(
        trainable,
        betas=(config.beta1, config.beta2),
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )

    batches = [build_training_batch(seq, flags, mcfg.mask_ids) for seq, flags in corpus]
    probe = batches[0]
    probe_initial = _probe_ntp_logits(model, probe, config.gated)

    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w")
        log_file.write(METRICS_HEADER + "\n")

    metrics: list[tuple] = []
    eval_history: list[tuple[int, float]] = []
    initial_total = None
    high_streak = 0
    order_rng = derive_rng(config.seed, "batch.order")

    try:
        for step in range(config.total_steps):
            t0 = time.perf_counter()
            lr_t = warmup_lr(step, config.learning_rate, config.warmup_steps)
            picks = order_rng.integers(0, len(batches), size=config.batch_size)
            inv = 1.0 / config.batch_size

            try:
                # Overflow to inf is caught as DivergenceError below; the
                # numpy warning on the way there is just noise.
                with np.errstate(over="ignore", invalid="ignore"):
                    with Tape() as tape:
                        acc = None
                        comp = [0.0, 0.0, 0.0]
                        for si in picks:
                            batch = batches[si]
                            out = _forward_batch(model, batch, config.gated)
                            base, samp = base_and_sampler_ce(
                                batch, out.hidden, out.logits, sampler,
                                model.unembed, model.embedding_table(),
                            )
                            lcm = lcm_loss(out.hidden, batch.lcm_pairs)
                            seq_total = total_loss(base, samp, lcm, config.loss_weights)
                            acc = seq_total if acc is None else add(acc, seq_total)
                            comp[0] += base.item()
                            comp[1] += samp.item()
                            comp[2] += lcm.item()
                        step_loss = scale(acc, inv)
                    backward(tape, step_loss)
                    opt.step(lr_t)
                    opt.zero_grad()
                    total_val = step_loss.item()
                    ntp_val = _ntp_probe_value(model, probe, config)
            except NumericsError as exc:
                raise DivergenceError(f"non-finite values at step {step}: {exc}") from exc
            wall_ms = (time.perf_counter() - t0) * 1e3
            row = (
                step,
                comp[0] * inv,
                comp[1] * inv,
                comp[2] * inv,
                total_val,
                ntp_val,
                lr_t,
                wall_ms,
            )
            metrics.append(row)
            if log_file:
                log_file.write(_format_metrics_row(row) + "\n")

            if initial_total is None:
                initial_total = total_val
            if not np.isfinite(total_val):
                raise DivergenceError(f"non-finite loss at step {step}")
            if total_val > config.divergence_factor * max(initial_total, 1e-8):
                high_streak += 1
                if high_streak >= config.divergence_patience:
                    raise DivergenceError(
                        f"loss {total_val:.4f} stayed above "
                        f"{config.divergence_factor}x initial for "
                        f"{config.divergence_patience} steps"
                    )
            else:
                high_streak = 0

            if config.eval_every and (step + 1) % config.eval_every == 0:
                rate = eval_acceptance(model, sampler, vocab, corpus, config)
                eval_history.append((step, rate))
                if verbose:
                    print(f"step {step}: total {total_val:.4f} acceptance {rate:.3f}")
    finally:
        if log_file:
            log_file.close()

    probe_final = _probe_ntp_logits(model, probe, config.gated)
    if checkpoint_path is not None:
        save_checkpoint(model, sampler, checkpoint_path, extra_meta=checkpoint_meta(config, vocab))
    return TrainResult(
        model=model,
        sampler=sampler,
        vocab=vocab,
        config=config,
        metrics=metrics,
        probe_ntp_logits_initial=probe_initial,
        probe_ntp_logits_final=probe_final,
        eval_history=eval_history,
    )


def _ntp_probe_value(model, probe, config) -> float:
    out = _forward_batch(model, probe, config.gated)
    return ntp_only_ce(probe, out.logits).item()


def _format_metrics_row(row) -> str:
    step, base, samp, lcm, total, ntp, lr, wall = row
    return (
        f"{step},{base:.10g},{samp:.10g},{lcm:.10g},{total:.10g},"
        f"{ntp:.10g},{lr:.10g},{wall:.3f}"
    )


def checkpoint_meta(config: TrainConfig, vocab: Vocab) -> dict[str, str]:
    """Key-values a checkpoint needs so the CLI can decode text with it."""
    return {
        "charset": vocab.charset,
        "task": config.corpus.task,
        "use_sampler": str(int(config.use_sampler)),
        "gated": str(int(config.gated)),
        "loss_weights": f"{config.loss_base},{config.loss_sampler},{config.loss_lcm}",
    }
