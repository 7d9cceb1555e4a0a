"""meshlm: desk-scale networks of stripped transformers with trainable edges.

Vertices are transformers with their token embedding and de-embedding layers
detached so dense hidden-state sequences flow directly between models; edges
are trainable single-transformer-layer seq2seq modules. Networks are layered
and fully connected layer to layer, differentiable end to end, and train on a
two-phase schedule (edge-only, then joint).
"""

from .data import BOS_ID, EOS_ID, PAD_ID, VOCAB_SIZE, Batch, ByteTokenizer, SyntheticTask, gen_task
from .edge import EdgeConfig, EdgeModule, edge_attention, edge_forward, init_edge
from .engine import (
    GradRecord,
    ParamGroup,
    ParamRef,
    ParamRegistry,
    evaluate_and_backprop,
    finite_diff_grads,
)
from .topology import (
    Network,
    NetworkSpec,
    ParamCount,
    build_network,
    closed_form_counts,
    count_parameters,
    network_forward,
    parse_widths,
    profile_forward,
)
from .trainer import (
    LossReport,
    PeftMode,
    PhaseSpec,
    TrainPlan,
    apply_peft,
    autoregressive_loss,
    grad_check,
    run_phase,
    run_plan,
)
from .vertex import (
    DeEmbeddingLayer,
    EmbeddingLayer,
    LanguageModel,
    StrippedTransformer,
    VertexConfig,
    causal_mask,
    strip,
)

__version__ = "0.1.0"
