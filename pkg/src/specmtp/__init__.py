"""Multi-token prediction with mask tokens, gated low-rank adapters, and
speculative decoding, built on a small numpy autodiff engine."""

from .tensor import (
    IGNORE_ID,
    NumericsError,
    Tape,
    Tensor,
    backward,
    derive_rng,
    finite_diff_check,
    precision,
)
from .model import (
    GatedLoraLinear,
    ModelBundle,
    ModelConfig,
    forward,
    gated_lora_apply,
    init_model,
)
from .batching import (
    MaskedBatch,
    build_linear_inference_input,
    build_quadratic_inference_input,
    build_training_batch,
    causal_rows,
)
from .sampler import SamplerHead, init_sampler, sampler_chain, sampler_logits
from .losses import LossReport, base_and_sampler_ce, lcm_loss, make_report, ntp_only_ce, total_loss
from .decoding import (
    AcceptanceStats,
    DecodeState,
    acceptance_rate,
    future_rank_probe,
    greedy_autoregressive,
    speculative_decode,
    verify_speculated,
)
from .training import (
    AdamW,
    CorpusSpec,
    DivergenceError,
    TrainConfig,
    TrainResult,
    Vocab,
    adamw_step,
    checkpoint_meta,
    clone_base_with_rank,
    generate_corpus,
    pretrain_base,
    train,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "IGNORE_ID",
    "NumericsError",
    "Tape",
    "Tensor",
    "backward",
    "derive_rng",
    "finite_diff_check",
    "precision",
    "GatedLoraLinear",
    "ModelBundle",
    "ModelConfig",
    "forward",
    "gated_lora_apply",
    "init_model",
    "MaskedBatch",
    "build_linear_inference_input",
    "build_quadratic_inference_input",
    "build_training_batch",
    "causal_rows",
    "SamplerHead",
    "init_sampler",
    "sampler_chain",
    "sampler_logits",
    "LossReport",
    "base_and_sampler_ce",
    "lcm_loss",
    "make_report",
    "ntp_only_ce",
    "total_loss",
    "AcceptanceStats",
    "DecodeState",
    "acceptance_rate",
    "future_rank_probe",
    "greedy_autoregressive",
    "speculative_decode",
    "verify_speculated",
    "AdamW",
    "CorpusSpec",
    "DivergenceError",
    "TrainConfig",
    "TrainResult",
    "Vocab",
    "adamw_step",
    "checkpoint_meta",
    "clone_base_with_rank",
    "generate_corpus",
    "pretrain_base",
    "train",
    "CheckpointError",
    "load_checkpoint",
    "save_checkpoint",
]
