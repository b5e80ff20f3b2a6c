"""Weighted Gaussian process neural network for temporal knowledge graph forecasting."""

from wgpnn.graph import (
    GraphSlice,
    GraphStore,
    HistoryWindow,
    Quadruple,
    build_filter_index,
    build_slices,
    history_window,
    parse_quadruples,
)
from wgpnn.gp import (
    KernelParams,
    RegularizerConfig,
    gp_posterior,
    predict_scores,
    regularizer,
    uce_loss_approx,
    uce_loss_mc,
    weighted_kernel,
)

__version__ = "0.1.0"

__all__ = [
    "GraphSlice",
    "GraphStore",
    "HistoryWindow",
    "KernelParams",
    "Quadruple",
    "RegularizerConfig",
    "build_filter_index",
    "build_slices",
    "gp_posterior",
    "history_window",
    "parse_quadruples",
    "predict_scores",
    "regularizer",
    "uce_loss_approx",
    "uce_loss_mc",
    "weighted_kernel",
]
