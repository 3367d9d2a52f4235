"""Local self-attention with learnable per-head spans, with convolution and
fixed-span baselines, a CIFAR-100 training harness, and cost accounting."""

from .tensor import Tensor, GradTape, no_grad, backward, softmax_masked, unfold, conv2d
from .gradcheck import grad_check
from .mask import SpanParam, MaskGrid, kernel_extent, create_adaptive_mask, head_masks
from .attention import (
    AttentionLayer,
    AttentionLayerConfig,
    attention_forward,
    attention_forward_naive,
)
from .models import ModelConfig, build_model, report_learned_spans
from .checkpoint import save_checkpoint, load_checkpoint
from .training import TrainConfig, lr_schedule, SgdNesterov, train, evaluate
from .analysis import count_params, count_flops, cost_report, export_scaling_tables

__version__ = "0.1.0"
