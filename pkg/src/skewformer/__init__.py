"""Relative self-attention with the memory-efficient skew transform.

Provides the attention kernels (global and blocked-local relative attention
with analytic backward passes), a small trainable autoregressive decoder for
symbolic music, two music token codecs, and a CLI for verification,
benchmarking, training, and sampling.
"""

from .attention import (
    CausalMask,
    LocalAttentionConfig,
    RelativeEmbeddingTable,
    multi_head_attention,
    naive_srel_global,
    relative_attention_global,
    relative_attention_local,
    skew_global,
    skew_local,
)
from .codec import (
    NoteEvent,
    PedalEvent,
    TokenSequence,
    apply_sustain_pedal,
    augment,
    ingest_notes,
    jsb_deserialize,
    jsb_serialize,
    performance_decode,
    performance_encode,
)
from .model import (
    AttentionTrace,
    ModelConfig,
    ModelWeights,
    load_checkpoint,
    save_checkpoint,
)
from .sampling import sample
from .tensor import AllocationMeter, Tensor
from .training import TrainSchedule, evaluate_nll, make_motif_corpus, train

__version__ = "0.1.0"

__all__ = [
    "AllocationMeter",
    "AttentionTrace",
    "CausalMask",
    "LocalAttentionConfig",
    "ModelConfig",
    "ModelWeights",
    "NoteEvent",
    "PedalEvent",
    "RelativeEmbeddingTable",
    "Tensor",
    "TokenSequence",
    "TrainSchedule",
    "apply_sustain_pedal",
    "augment",
    "evaluate_nll",
    "ingest_notes",
    "jsb_deserialize",
    "jsb_serialize",
    "load_checkpoint",
    "make_motif_corpus",
    "multi_head_attention",
    "naive_srel_global",
    "performance_decode",
    "performance_encode",
    "relative_attention_global",
    "relative_attention_local",
    "sample",
    "save_checkpoint",
    "skew_global",
    "skew_local",
    "train",
]
