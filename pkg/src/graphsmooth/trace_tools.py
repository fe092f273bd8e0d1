"""Diagnostics over forward traces: smoothness profiles and matrix exports."""

import numpy as np

from . import network
from .graphs import smoothness, write_matrix_csv
from .regularize import RegularizerConfig, layer_graph
from .signals import LabelSignalSet, SmoothnessProfile

__all__ = ["probe_profile", "class_contiguous_order", "export_layer_matrices"]


def probe_profile(model, batch, signals: LabelSignalSet,
                  reg_cfg: RegularizerConfig) -> SmoothnessProfile:
    """Per-class smoothness at every monitored point for one probe batch."""
    trace = network.forward_with_trace(model, batch)
    k = reg_cfg.effective_k(trace.batch_size)
    per_layer = []
    for pos, X in zip(trace.monitored_points, trace.representations):
        cache, frozen = layer_graph(X, reg_cfg.power_m, k,
                                    clamp_negative=reg_cfg.clamp_negative_similarities)
        P = cache["powers"][reg_cfg.power_m] / frozen.scale
        per_class = {c: smoothness(P, s) for c, s in signals.signals.items()}
        per_layer.append((pos, per_class, float(sum(per_class.values()))))
    return SmoothnessProfile(per_layer=per_layer, power=reg_cfg.power_m)


def class_contiguous_order(labels) -> np.ndarray:
    """Batch order sorting examples by (label, original index)."""
    labels = np.asarray(labels)
    return np.lexsort((np.arange(labels.shape[0]), labels))


def export_layer_matrices(model, batch, m: int, reg_cfg: RegularizerConfig, out_dir):
    """Write per-monitored-point Laplacian and normalized power CSVs.

    Returns the list of written file paths. The batch is expected to be
    ordered class-contiguously already; callers use class_contiguous_order.
    """
    trace = network.forward_with_trace(model, batch)
    k = reg_cfg.effective_k(trace.batch_size)
    written = []
    for pos, X in zip(trace.monitored_points, trace.representations):
        cache, frozen = layer_graph(X, m, k,
                                    clamp_negative=reg_cfg.clamp_negative_similarities)
        L = cache["powers"][1]
        Pn = cache["powers"][m] / frozen.scale
        lpath = out_dir / f"laplacian_layer{pos}.csv"
        ppath = out_dir / f"laplacian_pow{m}_layer{pos}.csv"
        write_matrix_csv(lpath, L)
        write_matrix_csv(ppath, Pn)
        written.extend([lpath, ppath])
    return written
