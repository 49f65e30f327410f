"""HDCAM architecture: configs, layers, model, parameter accounting, ablations."""
from .ablation import AblationRow, ablation_config, build_ablation_grid, table4_grid, table5_grid, table6_grid
from .config import (
    PUBLISHED_PARAMS,
    PUBLISHED_PARAMS_ALT,
    VARIANTS,
    WINDOWS_MS,
    LedgerToggles,
    ModelConfig,
    named_variant,
    require_valid,
    validate_config,
)
from .layers import hdconv_encoder, hierarchical_dwconv, mha, mhsatten_encoder
from .model import Block, HdcamModel, stage_program
from .params import ParamReport, count_config, count_parameters, format_report, reconcile

__all__ = [
    "AblationRow", "Block", "HdcamModel", "LedgerToggles", "ModelConfig", "PUBLISHED_PARAMS",
    "PUBLISHED_PARAMS_ALT", "ParamReport", "VARIANTS", "WINDOWS_MS", "ablation_config",
    "build_ablation_grid", "count_config", "count_parameters", "format_report",
    "hdconv_encoder", "hierarchical_dwconv", "mha", "mhsatten_encoder", "named_variant",
    "reconcile", "require_valid", "stage_program", "table4_grid", "table5_grid",
    "table6_grid", "validate_config",
]
