"""Embedding analysis: PCA, elbow-selected k-means, agreement metrics, and
the exhaustive feature-subset search."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

POWER_TOL = 1e-10
MAX_KMEANS_ITERS = 300


@dataclass(frozen=True)
class EmbeddingMatrix:
    names: tuple[str, ...]
    rows: np.ndarray  # n x d

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        object.__setattr__(self, "rows", rows)
        if rows.ndim != 2 or rows.shape[0] < 2:
            raise ValueError("need an n x d matrix with n >= 2")
        if len(self.names) != rows.shape[0]:
            raise ValueError("one name per row")
        if not np.all(np.isfinite(rows)):
            raise ValueError("embeddings must be finite")


@dataclass(frozen=True)
class FeatureTable:
    items: tuple[str, ...]
    features: tuple[str, ...]
    values: np.ndarray  # n x m

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if vals.shape != (len(self.items), len(self.features)):
            raise ValueError("value matrix shape must match items x features")
        if len(set(self.features)) != len(self.features):
            raise ValueError("duplicate feature name")
        if not np.all(np.isfinite(vals)):
            raise ValueError("feature values must be finite")


@dataclass(frozen=True)
class ClusteringResult:
    assignments: np.ndarray  # int, length n
    k: int
    inertia: float

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=np.int64)
        object.__setattr__(self, "assignments", a)
        if a.min(initial=0) < 0 or (a.size and a.max() >= self.k):
            raise ValueError("cluster ids must lie in [0, k)")


@dataclass
class FeatureSearchResult:
    best_features: tuple[str, ...]
    best_ari: float
    nmi: float
    pairwise: float
    combinations_scored: int
    log: list[tuple[tuple[str, ...], float]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# PCA via power iteration with deflation

def _top_eigen(cov: np.ndarray, seed: int = 0):
    """All eigenpairs of a symmetric PSD matrix, largest first."""
    d = cov.shape[0]
    a = cov.copy()
    rng = np.random.default_rng(seed)
    vals, vecs = [], []
    for _ in range(d):
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(10000):
            w = a @ v
            norm = np.linalg.norm(w)
            if norm < POWER_TOL:
                lam = 0.0
                break
            w /= norm
            lam_new = float(w @ a @ w)
            if abs(lam_new - lam) < POWER_TOL and np.linalg.norm(w - v) < 1e-7:
                v, lam = w, lam_new
                break
            v, lam = w, lam_new
        vals.append(max(lam, 0.0))
        vecs.append(v)
        a = a - lam * np.outer(v, v)
    return np.array(vals), np.array(vecs).T  # vecs[:, i]


def pca_reduce(e: EmbeddingMatrix, variance_target: float):
    """Project mean-centered rows onto the fewest top principal components
    whose cumulative explained variance reaches the target.

    Returns (reduced n x c matrix, component count, eigenvalues).
    """
    if not 0 < variance_target <= 1:
        raise ValueError("variance_target must be in (0, 1]")
    x = e.rows - e.rows.mean(axis=0)
    n, d = x.shape
    cov = (x.T @ x) / (n - 1)
    vals, vecs = _top_eigen(cov)
    total = vals.sum()
    max_rank = min(n - 1, d)
    if total <= 0:
        warnings.warn("zero-variance data; returning a single component")
        return x @ vecs[:, :1], 1, vals
    cum = np.cumsum(vals) / total
    idx = np.searchsorted(cum, variance_target - 1e-12)
    c = min(int(idx) + 1, max_rank)
    if cum[c - 1] + 1e-12 < variance_target:
        warnings.warn("variance target unreachable; using full rank")
        c = max_rank
    return x @ vecs[:, :c], c, vals


# ---------------------------------------------------------------------------
# deterministic RNG shared with the numba kernel

def _splitmix64(state: int):
    state = (state + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return state, (z ^ (z >> 31)) & 0xFFFFFFFFFFFFFFFF


def _rand_unit(state: int):
    state, z = _splitmix64(state)
    return state, (z >> 11) * (1.0 / 9007199254740992.0)


# ---------------------------------------------------------------------------
# k-means

def _kmeans_once(x: np.ndarray, k: int, state: int):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    state, u = _rand_unit(state)
    centers[0] = x[int(u * n) % n]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        state, u = _rand_unit(state)
        if total <= 0:
            idx = int(u * n) % n
        else:
            target = u * total
            acc = 0.0
            idx = n - 1
            for i in range(n):
                acc += d2[i]
                if acc >= target:
                    idx = i
                    break
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(MAX_KMEANS_ITERS):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist.argmin(axis=1)
        for j in range(k):
            mask = new_assign == j
            if mask.any():
                centers[j] = x[mask].mean(axis=0)
            else:
                far = dist.min(axis=1).argmax()
                centers[j] = x[far]
                new_assign[far] = j
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    inertia = float(((x - centers[assign]) ** 2).sum())
    return assign, inertia, state


def kmeans(x: np.ndarray, k: int, seed: int = 0, restarts: int = 4) -> ClusteringResult:
    """k-means++ with Lloyd iterations; best of `restarts` inits by inertia."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    state = (seed * 0x9E3779B97F4A7C15 + 1) & 0xFFFFFFFFFFFFFFFF
    best = None
    for _ in range(max(1, restarts)):
        assign, inertia, state = _kmeans_once(x, k, state)
        if best is None or inertia < best[1]:
            best = (assign, inertia)
    return ClusteringResult(assignments=best[0], k=k, inertia=best[1])


def elbow_k(x: np.ndarray, k_range, seed: int = 0, restarts: int = 4) -> int:
    """k maximizing the second difference of the inertia curve; ties pick the
    smaller k."""
    ks = sorted(k_range)
    if len(ks) < 3:
        raise ValueError("elbow needs at least 3 candidate k values")
    inertias = [kmeans(x, k, seed=seed, restarts=restarts).inertia for k in ks]
    best_k, best_curv = None, -np.inf
    for i in range(1, len(ks) - 1):
        curv = inertias[i - 1] - 2 * inertias[i] + inertias[i + 1]
        if curv > best_curv:
            best_k, best_curv = ks[i], curv
    return best_k


# ---------------------------------------------------------------------------
# agreement metrics

def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((len(ua), len(ub)), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def _labels(c) -> np.ndarray:
    return np.asarray(c.assignments if isinstance(c, ClusteringResult) else c, dtype=np.int64)


def ari(a, b) -> float:
    """Adjusted Rand index via pair counting."""
    la, lb = _labels(a), _labels(b)
    if la.shape != lb.shape:
        raise ValueError("clusterings must cover the same items")
    t = _contingency(la, lb)
    n = la.size

    def comb2(v):
        return v * (v - 1) / 2.0

    sum_ij = comb2(t).sum()
    sum_a = comb2(t.sum(axis=1)).sum()
    sum_b = comb2(t.sum(axis=0)).sum()
    total = comb2(np.int64(n))
    expected = sum_a * sum_b / total if total else 0.0
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(a, b) -> float:
    """Mutual information over the arithmetic mean of entropies; both-trivial
    clusterings score 1.0 by convention."""
    la, lb = _labels(a), _labels(b)
    if la.shape != lb.shape:
        raise ValueError("clusterings must cover the same items")
    t = _contingency(la, lb)
    n = t.sum()
    ha = _entropy(t.sum(axis=1))
    hb = _entropy(t.sum(axis=0))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    mi = 0.0
    row = t.sum(axis=1)
    col = t.sum(axis=0)
    for i in range(t.shape[0]):
        for j in range(t.shape[1]):
            nij = t[i, j]
            if nij:
                mi += (nij / n) * math.log(n * nij / (row[i] * col[j]))
    return float(max(0.0, min(1.0, mi / ((ha + hb) / 2.0))))


def pairwise_accuracy(a, b) -> float:
    """Fraction of item pairs whose same/different-cluster relation agrees."""
    la, lb = _labels(a), _labels(b)
    if la.shape != lb.shape or la.size < 2:
        raise ValueError("need matching clusterings over >= 2 items")
    same_a = la[:, None] == la[None, :]
    same_b = lb[:, None] == lb[None, :]
    iu = np.triu_indices(la.size, k=1)
    return float((same_a[iu] == same_b[iu]).mean())


# ---------------------------------------------------------------------------
# exhaustive feature-subset search

def _zscore(cols: np.ndarray) -> np.ndarray:
    mu = cols.mean(axis=0)
    sd = cols.std(axis=0)
    sd = np.where(sd == 0, 1.0, sd)
    return (cols - mu) / sd


def _search_reference(values, target_labels, combos, k, seed, restarts):
    """Pure-python scorer used as the serial oracle."""
    out = np.empty(len(combos))
    for i, combo in enumerate(combos):
        sub = _zscore(values[:, list(combo)])
        res = kmeans(sub, k, seed=seed, restarts=restarts)
        out[i] = ari(res, target_labels)
    return out


def _make_numba_kernel():
    import numba

    @numba.njit(cache=True, parallel=True)
    def kernel(values, target, combos, sizes, k, seed, restarts, out):  # pragma: no cover
        n, m = values.shape
        for ci in numba.prange(combos.shape[0]):
            size = sizes[ci]
            x = np.empty((n, size))
            for fj in range(size):
                col = combos[ci, fj]
                mu = 0.0
                for i in range(n):
                    mu += values[i, col]
                mu /= n
                var = 0.0
                for i in range(n):
                    var += (values[i, col] - mu) ** 2
                sd = (var / n) ** 0.5
                if sd == 0.0:
                    sd = 1.0
                for i in range(n):
                    x[i, fj] = (values[i, col] - mu) / sd

            state = np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15) + np.uint64(1)
            best_inertia = np.inf
            best_assign = np.zeros(n, dtype=np.int64)
            centers = np.empty((k, size))
            d2 = np.empty(n)
            dist = np.empty((n, k))
            assign = np.empty(n, dtype=np.int64)
            for _ in range(restarts):
                # splitmix64 draw
                state = state + np.uint64(0x9E3779B97F4A7C15)
                z = state
                z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
                z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
                z = z ^ (z >> np.uint64(31))
                u = (z >> np.uint64(11)) * (1.0 / 9007199254740992.0)
                idx = int(u * n) % n
                for fj in range(size):
                    centers[0, fj] = x[idx, fj]
                for i in range(n):
                    s = 0.0
                    for fj in range(size):
                        s += (x[i, fj] - centers[0, fj]) ** 2
                    d2[i] = s
                for j in range(1, k):
                    total = 0.0
                    for i in range(n):
                        total += d2[i]
                    state = state + np.uint64(0x9E3779B97F4A7C15)
                    z = state
                    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
                    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
                    z = z ^ (z >> np.uint64(31))
                    u = (z >> np.uint64(11)) * (1.0 / 9007199254740992.0)
                    if total <= 0.0:
                        idx = int(u * n) % n
                    else:
                        tgt = u * total
                        acc = 0.0
                        idx = n - 1
                        for i in range(n):
                            acc += d2[i]
                            if acc >= tgt:
                                idx = i
                                break
                    for fj in range(size):
                        centers[j, fj] = x[idx, fj]
                    for i in range(n):
                        s = 0.0
                        for fj in range(size):
                            s += (x[i, fj] - centers[j, fj]) ** 2
                        if s < d2[i]:
                            d2[i] = s

                for i in range(n):
                    assign[i] = -1
                for _ in range(MAX_KMEANS_ITERS):
                    for i in range(n):
                        for j in range(k):
                            s = 0.0
                            for fj in range(size):
                                s += (x[i, fj] - centers[j, fj]) ** 2
                            dist[i, j] = s
                    changed = False
                    new_assign = np.empty(n, dtype=np.int64)
                    for i in range(n):
                        bj = 0
                        bd = dist[i, 0]
                        for j in range(1, k):
                            if dist[i, j] < bd:
                                bd = dist[i, j]
                                bj = j
                        new_assign[i] = bj
                    for j in range(k):
                        cnt = 0
                        for i in range(n):
                            if new_assign[i] == j:
                                cnt += 1
                        if cnt > 0:
                            for fj in range(size):
                                s = 0.0
                                for i in range(n):
                                    if new_assign[i] == j:
                                        s += x[i, fj]
                                centers[j, fj] = s / cnt
                        else:
                            far = 0
                            fd = -1.0
                            for i in range(n):
                                md = dist[i, 0]
                                for jj in range(1, k):
                                    if dist[i, jj] < md:
                                        md = dist[i, jj]
                                if md > fd:
                                    fd = md
                                    far = i
                            for fj in range(size):
                                centers[j, fj] = x[far, fj]
                            new_assign[far] = j
                    for i in range(n):
                        if new_assign[i] != assign[i]:
                            changed = True
                        assign[i] = new_assign[i]
                    if not changed:
                        break
                inertia = 0.0
                for i in range(n):
                    s = 0.0
                    for fj in range(size):
                        s += (x[i, fj] - centers[assign[i], fj]) ** 2
                    inertia += s
                if inertia < best_inertia:
                    best_inertia = inertia
                    for i in range(n):
                        best_assign[i] = assign[i]

            # ARI against the target via pair counting
            ka = k
            kb = 0
            for i in range(n):
                if target[i] + 1 > kb:
                    kb = target[i] + 1
            table = np.zeros((ka, kb), dtype=np.int64)
            for i in range(n):
                table[best_assign[i], target[i]] += 1
            sum_ij = 0.0
            for i in range(ka):
                for j in range(kb):
                    v = table[i, j]
                    sum_ij += v * (v - 1) / 2.0
            sum_a = 0.0
            for i in range(ka):
                v = 0
                for j in range(kb):
                    v += table[i, j]
                sum_a += v * (v - 1) / 2.0
            sum_b = 0.0
            for j in range(kb):
                v = 0
                for i in range(ka):
                    v += table[i, j]
                sum_b += v * (v - 1) / 2.0
            total_pairs = n * (n - 1) / 2.0
            expected = sum_a * sum_b / total_pairs if total_pairs > 0 else 0.0
            max_index = (sum_a + sum_b) / 2.0
            if max_index == expected:
                out[ci] = 1.0
            else:
                out[ci] = (sum_ij - expected) / (max_index - expected)

    return kernel


_KERNEL = None


def _kernel():
    global _KERNEL
    if _KERNEL is None:
        _KERNEL = _make_numba_kernel()
    return _KERNEL


def count_combinations(m: int, max_features: int) -> int:
    return sum(math.comb(m, s) for s in range(1, max_features + 1))


def feature_search(table: FeatureTable, target: ClusteringResult, max_features: int,
                   k: int, seed: int = 0, restarts: int = 2, chunk: int = 65536,
                   use_numba: bool = True, keep_log: int = 0,
                   progress=None) -> FeatureSearchResult:
    """Score every feature subset of size 1..max_features by the ARI between
    its z-scored k-means clustering and the target; the winner breaks ARI
    ties by lexicographically smallest feature-index tuple."""
    m = len(table.features)
    if not 1 <= max_features <= m:
        raise ValueError("need 1 <= max_features <= number of features")
    target_labels = _labels(target)
    if target_labels.size != len(table.items):
        raise ValueError("target clustering must cover the table items")
    values = np.ascontiguousarray(table.values)
    tgt = np.ascontiguousarray(target_labels)

    best_ari = -np.inf
    best_combo = None
    scored = 0
    log: list[tuple[tuple[str, ...], float]] = []

    def flush(combos):
        nonlocal best_ari, best_combo, scored
        if not combos:
            return
        if use_numba:
            arr = np.zeros((len(combos), max_features), dtype=np.int64)
            sizes = np.empty(len(combos), dtype=np.int64)
            for i, c in enumerate(combos):
                sizes[i] = len(c)
                arr[i, : len(c)] = c
            out = np.empty(len(combos))
            _kernel()(values, tgt, arr, sizes, k, seed, max(1, restarts), out)
        else:
            out = _search_reference(values, target_labels, combos, k, seed, max(1, restarts))
        for c, a in zip(combos, out):
            if a > best_ari or (a == best_ari and (best_combo is None or c < best_combo)):
                best_ari, best_combo = float(a), c
            if keep_log:
                log.append((tuple(table.features[i] for i in c), float(a)))
        scored += len(combos)
        if progress is not None:
            progress(scored)

    buf: list[tuple[int, ...]] = []
    for size in range(1, max_features + 1):
        for combo in itertools.combinations(range(m), size):
            buf.append(combo)
            if len(buf) >= chunk:
                flush(buf)
                buf = []
    flush(buf)

    sub = _zscore(values[:, list(best_combo)])
    win = kmeans(sub, k, seed=seed, restarts=max(1, restarts))
    names = tuple(table.features[i] for i in best_combo)
    if keep_log:
        log.sort(key=lambda t: (-t[1], t[0]))
        log = log[:keep_log]
    return FeatureSearchResult(
        best_features=names,
        best_ari=best_ari,
        nmi=nmi(win, target_labels),
        pairwise=pairwise_accuracy(win, target_labels),
        combinations_scored=scored,
        log=log,
    )


def score_feature_set(table: FeatureTable, target, features, k: int,
                      seed: int = 0, restarts: int = 2):
    """ARI/NMI/pairwise for one named feature subset."""
    idx = [table.features.index(f) for f in features]
    sub = _zscore(table.values[:, idx])
    res = kmeans(sub, k, seed=seed, restarts=max(1, restarts))
    t = _labels(target)
    return ari(res, t), nmi(res, t), pairwise_accuracy(res, t)
