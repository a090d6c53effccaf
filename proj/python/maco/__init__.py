"""Masked-contrastive vision-language pretraining on a synthetic corpus.

Thin Python surface over the C++ core: configs are plain dicts (the same JSON the
``maco`` CLI reads), images are 2-D float64 arrays in [0, 1], embeddings come back
as numpy arrays.
"""

from ._maco import (
    CLASS_NAMES,
    Error,
    Model,
    bilinear_upsample,
    default_config,
    generate_sample,
    loss_infonce,
    loss_masked_contrastive,
    metric_auc,
    metric_cnr,
    metric_miou,
    metric_pointing_game,
    pretrain,
    run_command,
    softmax,
    softplus,
    validate_config,
    weight_map,
)

__all__ = [
    "CLASS_NAMES",
    "Error",
    "Model",
    "bilinear_upsample",
    "default_config",
    "generate_sample",
    "loss_infonce",
    "loss_masked_contrastive",
    "metric_auc",
    "metric_cnr",
    "metric_miou",
    "metric_pointing_game",
    "pretrain",
    "run_command",
    "softmax",
    "softplus",
    "validate_config",
    "weight_map",
]
