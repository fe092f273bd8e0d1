"""Smoothness-gap regularizer and Parseval training components.

The regularizer walks the monitored representations of a forward trace, builds
a similarity graph per point, and penalizes the mean absolute change of summed
label-signal smoothness between consecutive points, scaled by gamma^m. Its
gradient is exact under the fixed-support convention: cosine edge weights are
differentiated with respect to both endpoint representations, while the kNN
support set, the negative-similarity clamp mask, and the max-abs power
normalizer are frozen per batch (they are piecewise constant in the
representations, so the gradient is exact wherever they are locally stable).

All graph math here runs in float64; gradients are returned in float64 and
cast by the caller.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graphs import knn_support
from .signals import LabelSignalSet

__all__ = [
    "RegularizerConfig",
    "FrozenGraph",
    "layer_graph",
    "layer_graph_smoothness",
    "smoothness_regularizer",
    "smoothness_sums",
    "parseval_retraction",
    "conv_renormalization",
    "convex_combine",
]


@dataclass
class RegularizerConfig:
    """Knobs of the smoothness regularizer and the Parseval components.

    The effective loss coefficient is gamma**power_m: the scale is raised to
    the same power as the Laplacian. k = None means k equal to the batch size
    (complete graph).
    """

    gamma: float = 0.01
    power_m: int = 2
    k: int | None = None
    beta: float = 0.01
    alpha: float = 0.5
    parseval_enabled: bool = False
    clamp_negative_similarities: bool = True

    def validate(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.power_m < 1:
            raise ConfigError("power_m must be >= 1")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must be in (0, 1]")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        return self

    def effective_k(self, batch_size: int) -> int:
        return batch_size if self.k is None else min(self.k, batch_size)


@dataclass
class FrozenGraph:
    """Per-batch constants of one monitored point's graph: the active edge set
    (kNN support minus clamped negatives) and the power normalizer."""

    active: np.ndarray  # (b, b) bool, symmetric, zero diagonal
    scale: float        # max-abs normalizer of L^m (1.0 for m = 1)


def _normalize_rows(X):
    X = np.asarray(X, dtype=np.float64)
    norms = np.sqrt((X * X).sum(axis=1))
    alive = norms > 0.0
    Xn = np.zeros_like(X)
    Xn[alive] = X[alive] / norms[alive, None]
    return Xn, norms, alive


def layer_graph(X, m: int, k: int, clamp_negative: bool = True,
                frozen: FrozenGraph | None = None):
    """Graph quantities of one representation matrix.

    Returns (cache, frozen) where cache holds everything the smoothness and
    gradient computations need and frozen carries the per-batch constants.
    Dead (zero-norm) rows get similarity 0 against every node and never
    receive gradient. Passing a FrozenGraph pins the edge set and normalizer,
    which is how finite-difference checks stay consistent with the analytic
    gradient.
    """
    Xn, norms, alive = _normalize_rows(X)
    M = np.clip(Xn @ Xn.T, -1.0, 1.0)
    M = 0.5 * (M + M.T)
    np.fill_diagonal(M, 1.0)
    if frozen is None:
        support = knn_support(M, k)
        active = support & (M > 0.0) if clamp_negative else support
    else:
        active = frozen.active
    A = np.where(active, M, 0.0)
    L = np.diag(A.sum(axis=1)) - A
    powers = [np.eye(L.shape[0])]
    for _ in range(m):
        powers.append(powers[-1] @ L)
    if frozen is None:
        if m >= 2:
            scale = float(np.max(np.abs(powers[m])))
            if scale == 0.0:
                scale = 1.0
        else:
            scale = 1.0
        frozen = FrozenGraph(active=active, scale=scale)
    cache = {"Xn": Xn, "norms": norms, "alive": alive, "M": M,
             "powers": powers, "m": m}
    return cache, frozen


def layer_graph_smoothness(cache, frozen: FrozenGraph, signals: LabelSignalSet) -> float:
    """Summed label-signal smoothness on the normalized m-th Laplacian power."""
    P = cache["powers"][cache["m"]] / frozen.scale
    S = signals.stacked()
    return float(np.einsum("cb,bd,cd->", S, P, S, optimize=True))


def _smoothness_grad_X(cache, frozen: FrozenGraph, signals: LabelSignalSet) -> np.ndarray:
    """d(summed smoothness)/dX for one monitored point, fixed-support convention."""
    m = cache["m"]
    powers = cache["powers"]
    S = signals.stacked()                      # (C, b)
    V = [S @ powers[r] for r in range(m)]      # V[r][c] = s_c^T L^r
    b = powers[0].shape[0]
    G = np.zeros((b, b))
    for r in range(m):
        # sum_c outer(L^r s_c, L^(m-1-r) s_c); L symmetric so V rows apply.
        G += V[r].T @ V[m - 1 - r]
    G /= frozen.scale
    Gd = np.diag(G)
    # Sensitivity of the smoothness sum to each symmetric edge weight w_ij:
    # dL/dw_ij adds +1 at (i,i),(j,j) and -1 at (i,j),(j,i).
    E = Gd[:, None] + Gd[None, :] - G - G.T
    E[~frozen.active] = 0.0
    np.fill_diagonal(E, 0.0)

    Xn = cache["Xn"]
    M = cache["M"]
    # d cos(x_i, x_j)/dx_i = (Xn_j - M_ij Xn_i) / |x_i|
    row_coef = (E * M).sum(axis=1)
    grad = E @ Xn - row_coef[:, None] * Xn
    alive = cache["alive"]
    grad[alive] /= cache["norms"][alive, None]
    grad[~alive] = 0.0
    return grad


def smoothness_sums(representations, signals: LabelSignalSet, cfg: RegularizerConfig,
                    frozen_list=None):
    """Summed smoothness per monitored representation, plus caches and frozen
    per-batch constants. frozen_list pins graphs built earlier (oracle use)."""
    b = signals.batch_size
    k = cfg.effective_k(b)
    sums, caches, frozens = [], [], []
    for idx, X in enumerate(representations):
        frozen = frozen_list[idx] if frozen_list is not None else None
        cache, frozen = layer_graph(X, cfg.power_m, k,
                                    clamp_negative=cfg.clamp_negative_similarities,
                                    frozen=frozen)
        sums.append(layer_graph_smoothness(cache, frozen, signals))
        caches.append(cache)
        frozens.append(frozen)
    return sums, caches, frozens


def smoothness_regularizer(trace, signals: LabelSignalSet, cfg: RegularizerConfig,
                           frozen_list=None, want_grads: bool = True):
    """Regularizer value gamma^m * Delta and its gradients at monitored points.

    trace: a ForwardTrace (or any object with .representations and
    .monitored_points). Returns (value, grads, frozens) where grads maps
    monitored-point position -> (b, d) float64 gradient of the value with
    respect to that representation; entries with zero coefficient are omitted.
    The absolute values in Delta use subgradient 0 at 0, so a perfectly flat
    profile produces no gradient at all.
    """
    reps = trace.representations
    points = trace.monitored_points
    if len(reps) < 2:
        raise ConfigError("smoothness regularizer needs at least two monitored points")
    sums, caches, frozens = smoothness_sums(reps, signals, cfg, frozen_list)
    sums_arr = np.array(sums)
    gaps = np.diff(sums_arr)
    n_gaps = gaps.shape[0]
    delta = float(np.mean(np.abs(gaps)))
    coeff = cfg.gamma ** cfg.power_m
    value = coeff * delta
    if not want_grads:
        return value, {}, frozens

    signs = np.sign(gaps)
    grads = {}
    for i, pos in enumerate(points):
        # d Delta / d sigma_i from the gaps this sigma participates in.
        w = 0.0
        if i > 0:
            w += signs[i - 1]
        if i < n_gaps:
            w -= signs[i]
        w /= n_gaps
        if w == 0.0 or coeff == 0.0:
            continue
        grads[pos] = (coeff * w) * _smoothness_grad_X(caches[i], frozens[i], signals)
    return value, grads, frozens


def parseval_retraction(W: np.ndarray, beta: float) -> np.ndarray:
    """One Parseval tightness step W <- (1+beta) W - beta W W^T W, in place.

    Conv kernels are treated as their (out, fan-in) matrix view. Orthonormal
    matrices are fixed points; each step contracts |W^T W - I|.
    """
    view = W.reshape(W.shape[0], -1)
    dtype = view.dtype
    update = dtype.type(1.0 + beta) * view - dtype.type(beta) * (view @ view.T @ view)
    view[...] = update
    return W


def conv_renormalization(W, k_s: int = 3) -> np.ndarray:
    """Kernel view used by the forward pass under Parseval training: W / sqrt(2 k_s + 1)."""
    W = np.asarray(W)
    return W / W.dtype.type(np.sqrt(2.0 * k_s + 1.0))


def convex_combine(branches, alphas):
    """Elementwise convex combination of merged branches."""
    if len(branches) != len(alphas):
        raise ValueError("one coefficient per branch required")
    arrays = [np.asarray(b) for b in branches]
    if len({a.shape for a in arrays}) != 1:
        raise ValueError(f"branch shapes differ: {sorted(a.shape for a in arrays)}")
    out = np.zeros(arrays[0].shape, dtype=np.result_type(*arrays))
    for alpha, arr in zip(alphas, arrays):
        out += alpha * arr
    return out
