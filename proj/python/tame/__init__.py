"""Mixture-of-prompts test-time adaptation on a toy dual encoder."""

from ._tame import (
    Workspace,
    augment,
    axis_values,
    balance_loss,
    cell_id,
    class_names,
    default_config,
    derive_seed,
    diversity_loss,
    entropy_loss,
    render_shape,
    report,
    row_entropies,
    select_views,
    selection_size,
    validate_config,
    verify,
    warmup,
)

__all__ = [
    "Workspace",
    "augment",
    "axis_values",
    "balance_loss",
    "cell_id",
    "class_names",
    "default_config",
    "derive_seed",
    "diversity_loss",
    "entropy_loss",
    "render_shape",
    "report",
    "row_entropies",
    "select_views",
    "selection_size",
    "validate_config",
    "verify",
    "warmup",
]
