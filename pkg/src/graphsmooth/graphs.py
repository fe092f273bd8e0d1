"""Batch similarity graphs and their spectral machinery.

A batch of b intermediate representations becomes a weighted graph: cosine
similarities between all pairs, sparsified to a k-nearest-neighbor union
support. The combinatorial Laplacian L = D - A of that graph, its integer
powers, and its eigendecomposition give the smoothness and bandwidth
quantities the rest of the toolkit is built on.

All computations here run in float64 regardless of the training dtype;
the spectral identities and gradient checks downstream need the headroom.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError

__all__ = [
    "SimilarityMatrix",
    "SimilarityGraph",
    "Spectrum",
    "cosine_similarity",
    "build_similarity_matrix",
    "knn_adjacency",
    "knn_support",
    "laplacian",
    "laplacian_power",
    "laplacian_power_normalized",
    "eigendecompose",
    "gft",
    "smoothness",
    "bandwidth_estimate",
    "write_matrix_csv",
    "read_matrix_csv",
]


@dataclass
class SimilarityMatrix:
    """Symmetric b x b matrix of pairwise cosine similarities, unit diagonal."""

    values: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]


@dataclass
class SimilarityGraph:
    """kNN-union similarity graph: nonnegative-weighted unless clamping was
    disabled, symmetric, zero diagonal."""

    adjacency: np.ndarray
    k: int
    _laplacian: np.ndarray | None = field(default=None, repr=False)

    @property
    def batch_size(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)


@dataclass
class Spectrum:
    """Eigendecomposition of a symmetric matrix, eigenvalues ascending,
    eigenvectors as orthonormal columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def cosine_similarity(a, b) -> float:
    """Cosine similarity <a,b>/(|a||b|), clamped to [-1, 1].

    Raises DegenerateInputError when either vector has zero norm; callers
    that must survive dead activations substitute 0 instead (see
    build_similarity_matrix(zero_rows="substitute")).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(np.clip(a.dot(b) / (na * nb), -1.0, 1.0))


def build_similarity_matrix(representations, zero_rows: str = "raise") -> SimilarityMatrix:
    """All-pairs cosine similarity matrix of flattened batch representations.

    representations: (b, d) array, one row per example. zero_rows selects the
    treatment of zero-norm rows: "raise" (default, public API contract) or
    "substitute" (similarity 0 against every other node, used inside the
    training loop where dead ReLU rows must not abort a step).
    """
    X = np.asarray(representations, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need a (b, d) matrix with b >= 2")
    norms = np.linalg.norm(X, axis=1)
    dead = norms == 0.0
    if dead.any():
        if zero_rows != "substitute":
            idx = int(np.nonzero(dead)[0][0])
            raise DegenerateInputError(f"representation row {idx} has zero norm")
        norms = np.where(dead, 1.0, norms)
    Xn = X / norms[:, None]
    M = np.clip(Xn @ Xn.T, -1.0, 1.0)
    M = 0.5 * (M + M.T)
    np.fill_diagonal(M, 1.0)
    return SimilarityMatrix(values=M)


def knn_support(M: np.ndarray, k: int) -> np.ndarray:
    """Boolean support of the kNN union graph of a similarity matrix.

    Entry (i, j) is kept iff j is among the k largest off-diagonal entries of
    row i or i is among the k largest of row j. Ties prefer the smaller node
    index so the support is deterministic across platforms. k = b keeps every
    off-diagonal entry (complete graph).
    """
    b = M.shape[0]
    if not 1 <= k <= b:
        raise ValueError(f"k must be in [1, {b}], got {k}")
    keep = np.zeros((b, b), dtype=bool)
    if k >= b - 1:
        keep[:] = True
    else:
        work = M.copy()
        np.fill_diagonal(work, -np.inf)
        # argsort of the negated row is stable, so equal similarities fall
        # back to ascending index order.
        order = np.argsort(-work, axis=1, kind="stable")[:, :k]
        rows = np.repeat(np.arange(b), k)
        keep[rows, order.ravel()] = True
        keep |= keep.T
    np.fill_diagonal(keep, False)
    return keep


def knn_adjacency(matrix: SimilarityMatrix | np.ndarray, k: int,
                  clamp_negative: bool = True) -> SimilarityGraph:
    """kNN union graph from a similarity matrix.

    Kept edges carry their similarity as weight. With clamp_negative (the
    default) negative similarities are zeroed so the Laplacian stays positive
    semidefinite; disabling it keeps them signed.
    """
    M = matrix.values if isinstance(matrix, SimilarityMatrix) else np.asarray(matrix, dtype=np.float64)
    keep = knn_support(M, k)
    A = np.where(keep, M, 0.0)
    if clamp_negative:
        A = np.maximum(A, 0.0)
    return SimilarityGraph(adjacency=A, k=k)


def laplacian(graph: SimilarityGraph) -> np.ndarray:
    """Combinatorial Laplacian D - A, cached on the graph."""
    if graph._laplacian is None:
        A = graph.adjacency
        graph._laplacian = np.diag(A.sum(axis=1)) - A
    return graph._laplacian


def laplacian_power(L: np.ndarray, m: int) -> np.ndarray:
    """L^m, unnormalized."""
    if m < 1:
        raise ValueError(f"power must be >= 1, got {m}")
    return np.linalg.matrix_power(np.asarray(L, dtype=np.float64), m)


def laplacian_power_normalized(L: np.ndarray, m: int) -> np.ndarray:
    """L^m scaled by its max-abs entry for m >= 2; L itself for m = 1.

    The scale is a per-matrix monitoring normalization: it is recomputed for
    every graph and treated as a constant by gradient code. An all-zero power
    is passed through unscaled.
    """
    P, _ = laplacian_power_with_scale(L, m)
    return P


def laplacian_power_with_scale(L: np.ndarray, m: int) -> tuple[np.ndarray, float]:
    """Normalized L^m together with the max-abs normalizer that was applied."""
    P = laplacian_power(L, m)
    if m == 1:
        return P, 1.0
    scale = float(np.max(np.abs(P)))
    if scale == 0.0:
        return P, 1.0
    return P / scale, scale


_JACOBI_OFF_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 60


def eigendecompose(L: np.ndarray, sym_tol: float = 1e-9) -> Spectrum:
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps run until the off-diagonal Frobenius norm drops below 1e-12 (with a
    sweep cap as termination insurance at machine precision). Eigenvalues are
    returned ascending; each eigenvector's first nonzero component is made
    nonnegative so the basis is deterministic. Supported regime is b <= 512,
    i.e. batch-sized matrices.
    """
    A = np.asarray(L, dtype=np.float64)
    b = A.shape[0]
    if A.ndim != 2 or A.shape[1] != b:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if b > 1 and np.max(np.abs(A - A.T)) > sym_tol:
        raise ValueError("matrix is not symmetric within tolerance")
    A = 0.5 * (A + A.T)
    V = np.eye(b)

    def off_norm(mat):
        off = mat - np.diag(np.diag(mat))
        return np.sqrt(np.sum(off * off))

    for _ in range(_JACOBI_MAX_SWEEPS):
        if off_norm(A) < _JACOBI_OFF_TOL:
            break
        for p in range(b - 1):
            for q in range(p + 1, b):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                # Rotation angle that annihilates A[p, q] (Rutishauser form).
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                app, aqq = A[p, p], A[q, q]
                col_p = A[:, p].copy()
                col_q = A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                A[p, :] = A[:, p]
                A[q, :] = A[:, q]
                A[p, p] = app - t * apq
                A[q, q] = aqq + t * apq
                A[p, q] = 0.0
                A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq

    eigenvalues = np.diag(A).copy()
    order = np.argsort(eigenvalues, kind="stable")
    eigenvalues = eigenvalues[order]
    F = V[:, order]
    for j in range(b):
        nz = np.nonzero(np.abs(F[:, j]) > 1e-12)[0]
        if nz.size and F[nz[0], j] < 0.0:
            F[:, j] = -F[:, j]
    return Spectrum(eigenvalues=eigenvalues, eigenvectors=F)


def gft(spectrum: Spectrum, s) -> np.ndarray:
    """Graph Fourier transform F^T s."""
    s = np.asarray(s, dtype=np.float64).ravel()
    F = spectrum.eigenvectors
    if s.shape[0] != F.shape[0]:
        raise ValueError(f"signal length {s.shape[0]} does not match graph size {F.shape[0]}")
    return F.T @ s


def smoothness(L_power: np.ndarray, s) -> float:
    """Quadratic form s^T L_power s.

    For a first-power Laplacian this is the graph smoothness of the signal:
    zero for constant signals, growing with variation across strong edges.
    """
    s = np.asarray(s, dtype=np.float64).ravel()
    L_power = np.asarray(L_power, dtype=np.float64)
    if L_power.shape[0] != s.shape[0]:
        raise ValueError("dimension mismatch")
    return float(s @ L_power @ s)


def bandwidth_estimate(L: np.ndarray, s, m: int) -> float:
    """Bandwidth estimate (s^T L^m s / s^T s)^(1/m) using the unnormalized L^m.

    Nondecreasing in m and converging to the largest eigenvalue carrying
    nonzero signal energy.
    """
    s = np.asarray(s, dtype=np.float64).ravel()
    ss = float(s @ s)
    if ss == 0.0:
        raise DegenerateInputError("bandwidth of the zero signal is undefined")
    q = smoothness(laplacian_power(L, m), s) / ss
    # PSD quadratic form; tiny negative values are rounding noise.
    q = max(q, 0.0)
    return float(q ** (1.0 / m))


def write_matrix_csv(path, M) -> None:
    """Matrix export: CSV, row-major, 17 significant digits, no header."""
    M = np.asarray(M, dtype=np.float64)
    with open(path, "w") as fh:
        for row in np.atleast_2d(M):
            fh.write(",".join(f"{x:.17g}" for x in row))
            fh.write("\n")


def read_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
