"""ViT inference with attention-entropy patch pruning."""

from .cost import FlopsReport, benchmark, block_flops, model_flops
from .entropy import (
    Criterion,
    EntropyScores,
    attention_distance,
    evit_cls_score,
    head_averaged_scores,
    patch_attention_distribution,
    renyi_entropy,
    shannon_entropy,
)
from .model import ModelConfig, TokenMatrix, forward, load_params
from .pruning import PruneSchedule, PruneTrace, gather_tokens, pruned_forward, select_keep
from .weights import get_tensor, load_archive, save_archive

__version__ = "0.1.0"
