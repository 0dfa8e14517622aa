"""Pruned RNN-T loss: trivial joiner, occupation-derived pruning bounds, banded recursion."""

from .core import (
    BLANK,
    ConfigError,
    DomainError,
    LatticeLogProbs,
    LossOutput,
    ShapeError,
    TargetSequence,
    TransducerError,
    log_add,
)
from .lattice import OccupationGrads, backward_beta, forward_alpha, forward_backward, occupation_grads
from .pruned_loss import (
    CombinedLossConfig,
    JoinerParams,
    PrunedLogits,
    combined_loss,
    pruned_forward_backward,
    pruned_lattice_logprobs,
    pruned_rnnt_loss,
    toy_joiner_eval,
)
from .pruning import PruningBounds, adjust_bounds, locally_optimal_bounds, retained_mass
from .tensor_io import FormatError, load_tensor, save_tensor
from .trivial_joiner import (
    EmbeddingInputs,
    JoinerLogits,
    SmoothingConfig,
    compute_normalizers,
    decoder_prior,
    project_embeddings,
    smoothed_lattice_logprobs,
    trivial_lattice_logprobs,
)

__version__ = "0.1.0"
