"""Prompt tuning for frozen message-passing graph encoders.

Learnable per-edge gates reweight messages inside each layer of a frozen
GCN or GIN, and additive message prompts (a shared vector, or a per-edge
mixture over a basis with a usage-balancing regularizer) adapt the encoder
to downstream few-shot tasks without touching its weights.
"""

from .autodiff import Tape, Tensor, backward, constant, parameter
from .backbone import (BackboneCheckpoint, forward, forward_with_trace,
                       graph_readout, init_backbone, load_backbone,
                       prepare_graph, pretrain_edgepred, save_backbone)
from .config import RunConfig, load_config
from .estimators import (GraphEmbedding, PromptTunedGraphClassifier,
                         PromptTunedNodeClassifier)
from .graph import (FewShotSplit, Graph, GraphDataset, Permutation,
                    add_self_loops, as_node_dataset, build_graph,
                    disjoint_union, gnp_synthesize, load_dataset,
                    permute_graph, sample_few_shot, save_dataset,
                    sbm_synthesize)
from .optim import Adam
from .prompt import (PromptState, count_prompt_params, init_prompt,
                     load_prompt, pc_loss, save_prompt, total_loss,
                     usage_vector)
from .trainer import (Head, Metrics, TuneResult, ablation_grid, cross_entropy,
                      evaluate, multi_seed, tune, tune_split, usage_cv)

__version__ = "0.1.0"

__all__ = [
    "Adam", "BackboneCheckpoint", "FewShotSplit", "Graph", "GraphDataset",
    "GraphEmbedding", "Head", "Metrics", "Permutation", "PromptState",
    "PromptTunedGraphClassifier", "PromptTunedNodeClassifier", "RunConfig",
    "Tape", "Tensor", "TuneResult", "ablation_grid", "add_self_loops",
    "as_node_dataset", "backward", "build_graph", "constant",
    "count_prompt_params", "cross_entropy", "disjoint_union", "evaluate",
    "forward", "forward_with_trace", "gnp_synthesize", "graph_readout",
    "init_backbone", "init_prompt", "load_backbone", "load_config",
    "load_dataset", "load_prompt", "multi_seed", "parameter", "pc_loss",
    "permute_graph", "prepare_graph", "pretrain_edgepred", "sample_few_shot",
    "save_backbone", "save_dataset", "save_prompt", "sbm_synthesize",
    "total_loss", "tune", "tune_split", "usage_cv", "usage_vector",
]
