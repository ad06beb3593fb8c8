"""MID-L: learned per-input Top-k interpolation between a lightweight and a rich path."""
from .layers import (
    GateConfig,
    GateTrace,
    LinearAnneal,
    MidlParams,
    dropout_fc_forward,
    fc_forward,
    gumbel_gate,
    midl_backward_check,
    midl_forward,
    random_topk_gate,
    topk_mask,
)
from .metrics import (
    MetricsRecord,
    SmiConfig,
    active_neuron_ratio,
    calibration_metrics,
    classification_metrics,
    flops_count,
    latency_probe,
    sliced_mutual_information,
)
from .models import Model, build_mlp
from .tensor import Tape, Tensor

__version__ = "0.1.0"
