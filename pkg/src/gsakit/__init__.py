"""Global sparse attention for multi-frame token grids, in numpy."""

from .compression import TopkResult, avg_pool_tokens, fused_compressed_attention_topk, upsample_nearest
from .errors import *  # noqa: F401,F403
from .gradients import Gradients, finite_difference_check, gsa_backward
from .kernels import KernelCounters, KernelTiling
from .layer import ForwardContext, LayerWeights, dense_forward, gsa_forward
from .layout import TokenLayout, build_token_layout, partition_qkv, tokens_of_window, window_of_token
from .params import GsaParams
from .selection import SelectionPlan, block_sparse_attention, build_selection_plan
from .workload import WorkloadConfig, generate_workload, load_config, selection_sparsity

__version__ = "0.1.0"
