"""Input-adaptive vision transformer: depth/head/token gating with FLOPs
accounting, adversarial evaluation and policy analytics."""

from ._mia import (
    Config,
    Model,
    block_flops,
    controller_flops,
    gumbel_binary,
    skip_ratio_stats,
    synth_generate,
    total_model_flops,
)

__all__ = [
    "Config",
    "Model",
    "block_flops",
    "controller_flops",
    "gumbel_binary",
    "skip_ratio_stats",
    "synth_generate",
    "total_model_flops",
]
