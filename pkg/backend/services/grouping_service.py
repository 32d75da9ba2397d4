"""
Grouping Service
Pairwise task dissimilarity from FIM embeddings, spectral partitioning of the pool
into groups of mutually dissimilar models, an exhaustive oracle for small pools,
and linear CKA for the heterogeneity analysis.
"""

import logging
from typing import Iterator, List, Optional, Sequence

import numpy as np
import scipy.linalg
from sklearn.cluster import KMeans

from models.errors import RejectedInputError
from models.task import GroupAssignment, GroupingStrategy, TaskEmbedding
from models.zoo import ModelPool
from services.embedding_service import probe_from_record

logger = logging.getLogger(__name__)

DISSIMILARITY_EPS = 1e-12
ORACLE_MAX_N = 12
ORACLE_TIE_TOL = 1e-12


def cosine_similarity(vec1: np.ndarray, vec2: np.ndarray) -> float:
    """Compute cosine similarity between two vectors"""
    vec1_array = np.asarray(vec1, dtype=np.float64)
    vec2_array = np.asarray(vec2, dtype=np.float64)

    dot_product = np.dot(vec1_array, vec2_array)
    norm1 = np.linalg.norm(vec1_array)
    norm2 = np.linalg.norm(vec2_array)

    if norm1 == 0 or norm2 == 0:
        return 0.0

    return float(dot_product / (norm1 * norm2))


def dissimilarity_matrix(embeddings: Sequence[TaskEmbedding]) -> np.ndarray:
    """W_ij = 1 - cos(F_i / (F_i + F_j + eps), F_j / (F_i + F_j + eps)), elementwise division."""
    vectors = [np.asarray(e.fim_diag, dtype=np.float64) for e in embeddings]
    if not vectors:
        return np.zeros((0, 0))
    length = vectors[0].shape
    for i, (e, v) in enumerate(zip(embeddings, vectors)):
        if v.shape != length:
            raise RejectedInputError(f"embedding {e.task_id or i} has length {v.shape}, expected {length}")
        if np.any(v < 0):
            raise RejectedInputError(f"embedding {e.task_id or i} has negative entries")
        if not np.any(v > 0):
            raise RejectedInputError(f"embedding {e.task_id or i} is all zeros")

    n = len(vectors)
    w = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            denom = vectors[i] + vectors[j] + DISSIMILARITY_EPS
            sim = cosine_similarity(vectors[i] / denom, vectors[j] / denom)
            w[i, j] = w[j, i] = min(1.0, max(0.0, 1.0 - sim))
    return w


def similarity_matrix(w: np.ndarray) -> np.ndarray:
    """J - W off the diagonal: turns 'group dissimilar' into 'group similar'."""
    s = 1.0 - np.asarray(w, dtype=np.float64)
    np.fill_diagonal(s, 0.0)
    return s


def laplacian(w: np.ndarray):
    """Degree vector and unnormalized Laplacian L = D - W, W used as affinity."""
    degree = w.sum(axis=1)
    return degree, np.diag(degree) - w


def _sign_fix(vectors: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """
    Orient each eigenvector by a row-order-free rule: positive sum of cubes,
    or when that vanishes, a positive entry of largest magnitude.
    """
    fixed = vectors.copy()
    for k in range(fixed.shape[1]):
        col = fixed[:, k]
        skew = float(np.sum(col ** 3))
        if abs(skew) > tol:
            flip = skew < 0
        else:
            flip = col[np.argmax(np.abs(col))] < 0
        if flip:
            fixed[:, k] = -col
    return fixed


def spectral_embedding(w: np.ndarray, c: int) -> np.ndarray:
    """n x c eigenvectors of L for the c smallest eigenvalues (ascending)."""
    _, lap = laplacian(w)
    _, vectors = scipy.linalg.eigh(lap, subset_by_index=[0, c - 1])
    return _sign_fix(vectors)


def _check_matrix(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise RejectedInputError(f"dissimilarity matrix must be square, got {w.shape}")
    return w


def spectral_group(w: np.ndarray, c: int, seed: int, ids: Optional[Sequence[str]] = None) -> GroupAssignment:
    """k-means (k-means++, 10 restarts, lowest inertia) on the rows of the spectral embedding."""
    w = _check_matrix(w)
    n = w.shape[0]
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    if not 1 <= c <= n:
        raise RejectedInputError(f"group count c={c} must lie in [1, {n}]")
    if c == 1:
        return GroupAssignment(group_of={i: 0 for i in ids}, c=1)
    h = spectral_embedding(w, c)
    # k-means++ seeding depends on row order; cluster in a canonical order and map back
    order = np.lexsort(np.round(h, 9).T[::-1])
    kmeans = KMeans(n_clusters=c, init="k-means++", n_init=10, random_state=seed % (2**32))
    fitted = np.empty(n, dtype=np.int64)
    fitted[order] = kmeans.fit(h[order]).labels_
    labels = canonical_labels(fitted)
    return GroupAssignment(group_of={rid: int(g) for rid, g in zip(ids, labels)}, c=c)


def grouping_objective(w: np.ndarray, labels: Sequence[int]) -> float:
    """Sum of W over pairs i < j in the same group."""
    w = np.asarray(w, dtype=np.float64)
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    return float(np.triu(w * same, k=1).sum())


def _set_partitions(n: int, c: int) -> Iterator[List[int]]:
    """Restricted growth strings of length n using exactly c blocks, in lexicographic order."""
    labels = [0] * n

    def walk(pos: int, used: int):
        if n - pos < c - used:
            return
        if pos == n:
            if used == c:
                yield list(labels)
            return
        for g in range(min(used + 1, c)):
            labels[pos] = g
            yield from walk(pos + 1, max(used, g + 1))

    if n >= 1:
        labels[0] = 0
        yield from walk(1, 1)


def oracle_group(w: np.ndarray, c: int, ids: Optional[Sequence[str]] = None) -> GroupAssignment:
    """
    Exhaustive search for the partition into c nonempty groups maximizing intra-group W.
    Ties (within 1e-12) go to the most balanced partition, smallest sum of squared group sizes.
    """
    w = _check_matrix(w)
    n = w.shape[0]
    if n > ORACLE_MAX_N:
        raise RejectedInputError(f"oracle_group enumerates partitions for n <= {ORACLE_MAX_N}, got {n}")
    if not 1 <= c <= n:
        raise RejectedInputError(f"group count c={c} must lie in [1, {n}]")
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    upper = np.triu(w, k=1)
    best, best_value, best_spread = None, -np.inf, np.inf
    for labels in _set_partitions(n, c):
        arr = np.asarray(labels)
        value = float((upper * (arr[:, None] == arr[None, :])).sum())
        spread = int((np.bincount(arr, minlength=c) ** 2).sum())
        if value > best_value + ORACLE_TIE_TOL or (abs(value - best_value) <= ORACLE_TIE_TOL and spread < best_spread):
            best, best_value, best_spread = labels, max(value, best_value), spread
    return GroupAssignment(group_of={rid: int(g) for rid, g in zip(ids, best)}, c=c)


def random_group(ids: Sequence[str], c: int, seed: int) -> GroupAssignment:
    """Balanced random assignment, the grouping-strategy ablation baseline."""
    if not 1 <= c <= len(ids):
        raise RejectedInputError(f"group count c={c} must lie in [1, {len(ids)}]")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    labels = np.empty(len(ids), dtype=np.int64)
    labels[order] = np.arange(len(ids)) % c
    return GroupAssignment(group_of={rid: int(g) for rid, g in zip(ids, labels)}, c=c)


def canonical_labels(labels: Sequence[int]) -> np.ndarray:
    """Relabel groups in order of first appearance."""
    mapping = {}
    out = np.empty(len(labels), dtype=np.int64)
    for i, g in enumerate(labels):
        out[i] = mapping.setdefault(int(g), len(mapping))
    return out


def same_partition(a: Sequence[int], b: Sequence[int]) -> bool:
    """Equality up to group relabeling."""
    return np.array_equal(canonical_labels(a), canonical_labels(b))


def group_pool(
    w: np.ndarray,
    ids: Sequence[str],
    c: int,
    seed: int,
    strategy: GroupingStrategy = "dissimilar",
) -> GroupAssignment:
    """Dispatch on the grouping strategy; every path but `random` shares the spectral code."""
    if strategy == "random":
        groups = random_group(ids, c, seed)
    elif strategy == "similar":
        groups = spectral_group(similarity_matrix(w), c, seed, ids)
    else:
        groups = spectral_group(w, c, seed, ids)
    sizes = [len(groups.members(g)) for g in range(groups.c)]
    logger.info(
        f"[GroupingService] {strategy} grouping into {c} groups, sizes {sizes}, "
        f"intra-group dissimilarity {grouping_objective(w, groups.labels(list(ids))):.4f}"
    )
    return groups


def _center(feats: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    return feats - feats.mean(axis=0, keepdims=True)


def cka_linear(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Linear CKA = ||A_c^T B_c||_F^2 / (||A_c^T A_c||_F ||B_c^T B_c||_F)."""
    feats_a = np.asarray(feats_a, dtype=np.float64).reshape(len(feats_a), -1)
    feats_b = np.asarray(feats_b, dtype=np.float64).reshape(len(feats_b), -1)
    if feats_a.shape[0] != feats_b.shape[0]:
        raise RejectedInputError(f"CKA needs equal row counts, got {feats_a.shape[0]} and {feats_b.shape[0]}")
    if feats_a.shape[0] < 2:
        raise RejectedInputError("CKA needs at least 2 rows")
    a, b = _center(feats_a), _center(feats_b)
    norm_aa = np.linalg.norm(a.T @ a)
    norm_bb = np.linalg.norm(b.T @ b)
    if norm_aa == 0 or norm_bb == 0:
        raise RejectedInputError("CKA is undefined for zero-variance features")
    value = np.linalg.norm(a.T @ b) ** 2 / (norm_aa * norm_bb)
    return float(min(1.0, max(0.0, value)))


def cka_matrix(pool: ModelPool, batch: np.ndarray) -> np.ndarray:
    """Pairwise CKA of the teachers' penultimate features on one shared batch."""
    feats = [probe_from_record(record).features(batch).numpy() for record in pool.records]
    n = len(feats)
    sim = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = cka_linear(feats[i], feats[j])
    return sim
