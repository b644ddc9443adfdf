"""Density clustering for grouping features.

The main path is a from-scratch HDBSCAN: k-NN core distances, an exact
minimum spanning tree of the mutual-reachability graph (Prim, O(N^2) with the
distance matrix formed row by row), a condensed cluster tree, and
excess-of-mass cluster extraction. When no split survives the minimum cluster
size, the root is returned as a single cluster instead of calling everything
noise. A plain DBSCAN with eps picked from the knee of the k-distance curve
is available as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ClusterError(ValueError):
    """No cluster structure found."""


def _row_dists(x: np.ndarray, i: int) -> np.ndarray:
    d2 = ((x - x[i]) ** 2).sum(axis=1)
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


def core_distances(x: np.ndarray, k: int, chunk: int = 2048) -> np.ndarray:
    """Distance to the k-th nearest other point, for every point."""
    n = len(x)
    if k >= n:
        raise ValueError(f"k={k} must be < n={n}")
    out = np.empty(n, dtype=np.float64)
    sq = (x ** 2).sum(axis=1)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        d2 = sq[s:e, None] - 2.0 * (x[s:e] @ x.T) + sq[None, :]
        np.maximum(d2, 0.0, out=d2)
        d2[np.arange(e - s), np.arange(s, e)] = np.inf
        part = np.partition(d2, k - 1, axis=1)[:, k - 1]
        out[s:e] = np.sqrt(part)
    return out


def mutual_reachability_mst(x: np.ndarray, core: np.ndarray) -> np.ndarray:
    """Exact MST of the mutual-reachability graph; rows (a, b, weight)."""
    n = len(x)
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    best_from = np.zeros(n, dtype=np.int64)
    edges = np.empty((n - 1, 3), dtype=np.float64)
    cur = 0
    in_tree[0] = True
    for step in range(n - 1):
        d = _row_dists(x, cur)
        mr = np.maximum(np.maximum(core[cur], core), d)
        better = mr < best
        best[better] = mr[better]
        best_from[better] = cur
        best[in_tree] = np.inf
        nxt = int(np.argmin(best))
        edges[step] = (best_from[nxt], nxt, best[nxt])
        in_tree[nxt] = True
        cur = nxt
    return edges


@dataclass
class Dendrogram:
    """Single-linkage merge tree: internal node i merges children[i] at height[i]."""

    left: np.ndarray
    right: np.ndarray
    height: np.ndarray
    size: np.ndarray  # size of every node (points are nodes 0..n-1 of size 1)
    n_points: int


def single_linkage(edges: np.ndarray, n: int) -> Dendrogram:
    order = np.argsort(edges[:, 2], kind="stable")
    parent = np.arange(2 * n - 1)
    size = np.ones(2 * n - 1, dtype=np.int64)
    left = np.zeros(n - 1, dtype=np.int64)
    right = np.zeros(n - 1, dtype=np.int64)
    height = np.zeros(n - 1, dtype=np.float64)

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    nxt = n
    for ei in order:
        a, b, w = int(edges[ei, 0]), int(edges[ei, 1]), edges[ei, 2]
        ra, rb = find(a), find(b)
        left[nxt - n] = ra
        right[nxt - n] = rb
        height[nxt - n] = w
        size[nxt] = size[ra] + size[rb]
        parent[ra] = parent[rb] = nxt
        nxt += 1
    return Dendrogram(left, right, height, size, n)


@dataclass
class CondensedTree:
    """Clusters that survive the minimum size, plus point fall-out events."""

    cluster_parent: list[int]       # parent cluster id (root's parent = -1)
    cluster_birth: list[float]      # lambda at which the cluster appears
    point_cluster: np.ndarray       # (n,) cluster each point falls out of
    point_lambda: np.ndarray        # (n,) lambda at which it falls out


def _leaves_under(dg: Dendrogram, node: int) -> list[int]:
    out, stack = [], [node]
    while stack:
        v = stack.pop()
        if v < dg.n_points:
            out.append(v)
        else:
            stack.append(int(dg.left[v - dg.n_points]))
            stack.append(int(dg.right[v - dg.n_points]))
    return out


def condense(dg: Dendrogram, min_cluster_size: int) -> CondensedTree:
    n = dg.n_points
    root = 2 * n - 2
    point_cluster = np.zeros(n, dtype=np.int64)
    point_lambda = np.zeros(n, dtype=np.float64)
    cluster_parent = [-1]
    cluster_birth = [0.0]
    # (dendrogram node, condensed cluster id carrying it)
    stack = [(root, 0)]
    while stack:
        node, cid = stack.pop()
        if node < n:
            # A bare point at the top level falls out immediately at its merge height;
            # handled by the parent split below, so a leaf only lands here when the
            # whole dataset is a single point cluster.
            point_cluster[node] = cid
            point_lambda[node] = np.inf
            continue
        li = node - n
        l_node, r_node = int(dg.left[li]), int(dg.right[li])
        lam = 1.0 / max(dg.height[li], 1e-12)
        ln, rn = int(dg.size[l_node]), int(dg.size[r_node])
        if ln >= min_cluster_size and rn >= min_cluster_size:
            for child in (l_node, r_node):
                cluster_parent.append(cid)
                cluster_birth.append(lam)
                stack.append((child, len(cluster_parent) - 1))
        elif ln >= min_cluster_size or rn >= min_cluster_size:
            big, small = (l_node, r_node) if ln >= rn else (r_node, l_node)
            for p in _leaves_under(dg, small):
                point_cluster[p] = cid
                point_lambda[p] = lam
            stack.append((big, cid))
        else:
            for p in _leaves_under(dg, node):
                point_cluster[p] = cid
                point_lambda[p] = lam
    return CondensedTree(cluster_parent, cluster_birth, point_cluster, point_lambda)


def extract_excess_of_mass(ct: CondensedTree) -> np.ndarray:
    """Select clusters by excess of mass and label points; -1 marks noise.

    The root is never selected while real children exist; with no surviving
    split the root itself becomes the single cluster.
    """
    n_clusters = len(ct.cluster_parent)
    stability = np.zeros(n_clusters)
    finite_lam = np.where(np.isfinite(ct.point_lambda), ct.point_lambda, 0.0)
    np.add.at(stability, ct.point_cluster,
              finite_lam - np.asarray(ct.cluster_birth)[ct.point_cluster])
    children: list[list[int]] = [[] for _ in range(n_clusters)]
    sizes = np.zeros(n_clusters, dtype=np.int64)
    np.add.at(sizes, ct.point_cluster, 1)
    for c in range(n_clusters - 1, 0, -1):
        children[ct.cluster_parent[c]].append(c)
    subtree_size = sizes.copy()
    for c in range(n_clusters - 1, 0, -1):
        subtree_size[ct.cluster_parent[c]] += subtree_size[c]
        stability[ct.cluster_parent[c]] += \
            (ct.cluster_birth[c] - ct.cluster_birth[ct.cluster_parent[c]]) * subtree_size[c]

    s_hat = stability.copy()
    selected = np.zeros(n_clusters, dtype=bool)
    for c in range(n_clusters - 1, -1, -1):
        child_sum = sum(s_hat[k] for k in children[c])
        if c == 0:
            s_hat[c] = max(child_sum, 0.0)
        elif not children[c] or stability[c] >= child_sum:
            selected[c] = True
            s_hat[c] = stability[c]
        else:
            s_hat[c] = child_sum
    # Keep only the highest selected cluster on each root-to-leaf path.
    final = np.zeros(n_clusters, dtype=bool)
    stack = [(0, False)]
    while stack:
        c, covered = stack.pop()
        take = selected[c] and not covered and c != 0
        final[c] = take
        for k in children[c]:
            stack.append((k, covered or take))
    if not final.any():
        final[0] = True  # single-cluster fallback

    owner = np.full(n_clusters, -1, dtype=np.int64)
    order = list(range(n_clusters))
    for c in order:  # parents first: ids were assigned top-down
        if final[c]:
            owner[c] = c
        elif ct.cluster_parent[c] >= 0:
            owner[c] = owner[ct.cluster_parent[c]]
    labels_cluster = owner[ct.point_cluster]
    # Compact selected cluster ids to 0..k-1 in id order.
    sel_ids = np.nonzero(final)[0]
    remap = {int(c): i for i, c in enumerate(sel_ids)}
    labels = np.array([remap.get(int(c), -1) for c in labels_cluster], dtype=np.int64)
    return labels


def hdbscan_labels(x: np.ndarray, min_cluster_size: int) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = len(x)
    if n < min_cluster_size:
        raise ClusterError(f"{n} points < min_cluster_size {min_cluster_size}")
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    core = core_distances(x, min_cluster_size)
    edges = mutual_reachability_mst(x, core)
    dg = single_linkage(edges, n)
    ct = condense(dg, min_cluster_size)
    return extract_excess_of_mass(ct)


def _kdistance_knee(sorted_d: np.ndarray) -> int:
    n = len(sorted_d)
    if n < 3:
        return n - 1
    xs = np.arange(n, dtype=np.float64) / (n - 1)
    ys = sorted_d - sorted_d[0]
    span = max(ys[-1], 1e-12)
    ys = ys / span
    # Max perpendicular distance from the chord (0,0)-(1,1).
    return int(np.argmax(ys - xs))


def dbscan_labels(x: np.ndarray, min_cluster_size: int, eps: float | None = None,
                  chunk: int = 2048) -> np.ndarray:
    """Classic DBSCAN; eps defaults to the knee of the k-distance curve."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = len(x)
    core = core_distances(x, min(min_cluster_size, n - 1))
    if eps is None:
        eps = float(np.sort(core)[_kdistance_knee(np.sort(core))])
    sq = (x ** 2).sum(axis=1)
    neighbor_lists: list[np.ndarray] = []
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        d2 = sq[s:e, None] - 2.0 * (x[s:e] @ x.T) + sq[None, :]
        for r in range(e - s):
            nb = np.nonzero(d2[r] <= eps * eps)[0]
            neighbor_lists.append(nb)
    is_core = np.array([len(nb) >= min_cluster_size for nb in neighbor_lists])
    labels = np.full(n, -1, dtype=np.int64)
    cid = 0
    for i in range(n):
        if labels[i] != -1 or not is_core[i]:
            continue
        labels[i] = cid
        queue = [i]
        while queue:
            v = queue.pop()
            for u in neighbor_lists[v]:
                if labels[u] == -1:
                    labels[u] = cid
                    if is_core[u]:
                        queue.append(int(u))
        cid += 1
    return labels


def cluster(features: np.ndarray, min_cluster_size: int,
            method: str = "hdbscan") -> np.ndarray:
    """Density clustering entry point; -1 labels noise points.

    Raises ClusterError when every point comes out as noise.
    """
    if method == "hdbscan":
        labels = hdbscan_labels(features, min_cluster_size)
    elif method == "dbscan":
        labels = dbscan_labels(features, min_cluster_size)
    else:
        raise ValueError(f"unknown clustering method {method!r}")
    if (labels == -1).all():
        raise ClusterError("no clusters at this scale")
    return labels
