"""Two-level semantic IDs: fusion, residual K-means, collision handling.

Items are quantized to an ordered code pair (c1, c2): c1 indexes the nearest
level-1 centroid, c2 the nearest level-2 centroid of the residual. Colliding
items are then moved to nearby unoccupied pairs by a greedy re-assignment
pass.
"""

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import io, kernels, rng
from .data import ItemCatalog


class SemanticID(NamedTuple):
    c1: int
    c2: int


@dataclass
class FusedEmbeddingMatrix:
    vectors: np.ndarray  # [n_items, d], unit-norm float64 rows
    item_ids: list[int]

    def __post_init__(self):
        if self.vectors.shape[0] != len(self.item_ids):
            raise ValueError("vectors/item_ids length mismatch")


@dataclass
class Codebook:
    level1: np.ndarray  # [K, d]
    level2: np.ndarray  # [K, d]

    @property
    def K(self) -> int:
        return self.level1.shape[0]

    @property
    def dim(self) -> int:
        return self.level1.shape[1]

    def __post_init__(self):
        if self.level1.shape != self.level2.shape:
            raise ValueError("codebook levels must share shape")
        if self.K < 2:
            raise ValueError("codebook size must be >= 2")
        if not (np.isfinite(self.level1).all() and np.isfinite(self.level2).all()):
            raise ValueError("codebook contains non-finite entries")

    def save(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(json.dumps({"K": self.K, "d": self.dim, "levels": 2}).encode("ascii") + b"\n")
            io.write_matrix(f, self.level1)
            io.write_matrix(f, self.level2)

    @classmethod
    def load(cls, path: str) -> "Codebook":
        with open(path, "rb") as f:
            meta = json.loads(f.readline())
            if meta.get("levels") != 2:
                raise ValueError("expected a 2-level codebook file")
            level1 = io.read_matrix(f).astype(np.float64)
            level2 = io.read_matrix(f).astype(np.float64)
        if level1.shape != (meta["K"], meta["d"]):
            raise ValueError("codebook header does not match matrix shape")
        return cls(level1, level2)


@dataclass
class AssignmentTable:
    forward: dict[int, SemanticID]
    reverse: dict[SemanticID, list[int]] = field(init=False)

    def __post_init__(self):
        rev: dict[SemanticID, list[int]] = {}
        for item, sid in self.forward.items():
            rev.setdefault(sid, []).append(item)
        for items in rev.values():
            items.sort()
        self.reverse = rev

    def save_csv(self, path: str) -> None:
        rows = ((i, sid.c1, sid.c2) for i, sid in sorted(self.forward.items()))
        io.write_csv(path, ["item_id", "c1", "c2"], rows)

    @classmethod
    def load_csv(cls, path: str) -> "AssignmentTable":
        forward = {}
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().strip()
            if header != "item_id,c1,c2":
                raise ValueError(f"unexpected assignment header: {header}")
            for line in f:
                item, c1, c2 = line.strip().split(",")
                forward[int(item)] = SemanticID(int(c1), int(c2))
        return cls(forward)


@dataclass
class CollisionReport:
    conflicts: int
    conflict_rate: float  # fraction in [0, 1]
    unique_pairs: int


@dataclass
class FitReport:
    loss1: float  # final level-1 quantization MSE
    loss2: float
    mse_history1: list[float]
    mse_history2: list[float]


def fuse_embeddings(catalog: ItemCatalog) -> FusedEmbeddingMatrix:
    """Normalized mean of the item's available modality vectors.

    Each present vector is L2-normalized, zero-padded to the largest modality
    dimension, averaged, and re-normalized. Items with no modalities (or a
    degenerate zero mean) get a deterministic unit vector seeded by item_id.
    """
    if catalog.total_items == 0:
        raise ValueError("fuse_embeddings: empty catalog")
    dims = catalog.modality_dims()
    if not dims:
        raise ValueError("fuse_embeddings: no modality present anywhere in the catalog")
    d = max(dims.values())
    out = np.zeros((catalog.total_items, d), dtype=np.float64)
    ids = []
    for row, it in enumerate(catalog.items):
        ids.append(it.item_id)
        acc = np.zeros(d, dtype=np.float64)
        k = 0
        for _, v in sorted(it.modality_embeddings.items()):
            v = np.asarray(v, dtype=np.float64)
            n = np.linalg.norm(v)
            if n == 0.0:
                continue
            acc[: v.shape[0]] += v / n
            k += 1
        if k:
            acc /= k
            n = np.linalg.norm(acc)
            if n > 1e-12:
                out[row] = acc / n
                continue
        out[row] = rng.unit_vector(0, it.item_id, d)
    return FusedEmbeddingMatrix(out, ids)


def _kmeans_pp_init(x: np.ndarray, k: int, gen) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    first = int(gen.integers(0, n))
    centroids[0] = x[first]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all mass already covered; spread over arbitrary points
            centroids[j] = x[int(gen.integers(0, n))]
            continue
        pick = int(gen.choice(n, p=d2 / total))
        centroids[j] = x[pick]
        d2 = np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1))
    return centroids


def lloyd(x: np.ndarray, k: int, iters: int, gen) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's K-means with k-means++ seeding and empty-cluster re-seeding.

    Returns (centroids [k, d], assignments [n], per-iteration MSE history).
    The history is measured after each assignment step, so it is
    non-increasing by construction. Empty centroids are re-seeded to the
    points currently farthest from their assigned centroid.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    centroids = _kmeans_pp_init(x, k, gen)
    assign_idx, dist = kernels.nearest_centroid(x, centroids)
    history = [float(dist.mean())]
    for _ in range(iters):
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign_idx, x)
        counts = np.bincount(assign_idx, minlength=k).astype(np.float64)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.where(~nonempty)[0]
        if empty.size:
            # hand each empty centroid a distinct farthest point
            order = np.argsort(-dist, kind="stable")
            for slot, j in enumerate(empty[: n]):
                centroids[j] = x[order[slot % n]]
        assign_idx, dist = kernels.nearest_centroid(x, centroids)
        history.append(float(dist.mean()))
    return centroids, assign_idx, history


def residual_kmeans_fit(
    emb: FusedEmbeddingMatrix, k: int, iters: int, seed: int
) -> tuple[Codebook, FitReport]:
    """Level 1 on the vectors, level 2 on the residuals to level-1 centroids."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if k > emb.vectors.shape[0]:
        import warnings

        warnings.warn(f"codebook size {k} exceeds item count {emb.vectors.shape[0]}")
    x = np.ascontiguousarray(emb.vectors, dtype=np.float64)
    level1, a1, hist1 = lloyd(x, k, iters, rng.make_rng(seed, rng.KMEANS, 1))
    residual = x - level1[a1]
    level2, _, hist2 = lloyd(residual, k, iters, rng.make_rng(seed, rng.KMEANS, 2))
    report = FitReport(hist1[-1], hist2[-1], hist1, hist2)
    return Codebook(level1, level2), report


def assign(emb: FusedEmbeddingMatrix, cb: Codebook) -> AssignmentTable:
    """Nearest level-1 centroid, then nearest level-2 centroid of the residual."""
    x = np.ascontiguousarray(emb.vectors, dtype=np.float64)
    if x.shape[1] != cb.dim:
        raise ValueError(f"embedding dim {x.shape[1]} != codebook dim {cb.dim}")
    c1, _ = kernels.nearest_centroid(x, cb.level1)
    c2, _ = kernels.nearest_centroid(x - cb.level1[c1], cb.level2)
    forward = {
        item: SemanticID(int(a), int(b))
        for item, a, b in zip(emb.item_ids, c1, c2)
    }
    return AssignmentTable(forward)


def collision_report(table: AssignmentTable, n_items: int) -> CollisionReport:
    singles = sum(1 for items in table.reverse.values() if len(items) == 1)
    conflicts = n_items - singles
    return CollisionReport(
        conflicts=conflicts,
        conflict_rate=conflicts / n_items if n_items else 0.0,
        unique_pairs=len(table.reverse),
    )


def _top_by_distance(d2: np.ndarray, top_n: int) -> np.ndarray:
    """Indices of the top_n smallest entries, ties to the lowest index."""
    order = np.lexsort((np.arange(d2.shape[0]), d2))
    return order[:top_n]


def greedy_reassign(
    table: AssignmentTable,
    emb: FusedEmbeddingMatrix,
    cb: Codebook,
    top_n: int = 50,
) -> AssignmentTable:
    """Move colliding items to nearby unoccupied SID pairs.

    Per occupied SID (ascending): the item closest to the reconstructed
    codeword level1[c1] + level2[c2] keeps it; the others, in ascending
    item-id order, take their best unoccupied candidate from the cross
    product of their top_n nearest level-1 centroids and, per level-1
    choice, the top_n nearest level-2 centroids of the residual, ranked by
    reconstruction distance with (distance, c1, c2) tie-breaks. An item with
    no free candidate keeps its colliding SID.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    x = np.ascontiguousarray(emb.vectors, dtype=np.float64)
    row_of = {item: i for i, item in enumerate(emb.item_ids)}
    l1, l2 = cb.level1, cb.level2
    l2_sq = np.einsum("kd,kd->k", l2, l2)
    n_cand = min(top_n, cb.K)

    forward = dict(table.forward)
    occupied = set(table.reverse.keys())

    def candidate_pairs(vec: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d1 = np.sum((l1 - vec) ** 2, axis=1)
        top_a = _top_by_distance(d1, n_cand)
        resid = vec[None, :] - l1[top_a]  # [n_cand, d]
        d2 = (
            np.einsum("nd,nd->n", resid, resid)[:, None]
            - 2.0 * (resid @ l2.T)
            + l2_sq[None, :]
        )
        a_idx = np.repeat(top_a, n_cand)
        b_idx = np.empty(n_cand * n_cand, dtype=np.int64)
        dist = np.empty(n_cand * n_cand, dtype=np.float64)
        for r in range(n_cand):
            top_b = _top_by_distance(d2[r], n_cand)
            b_idx[r * n_cand : (r + 1) * n_cand] = top_b
            dist[r * n_cand : (r + 1) * n_cand] = d2[r, top_b]
        order = np.lexsort((b_idx, a_idx, dist))
        return dist[order], a_idx[order], b_idx[order]

    for sid in sorted(table.reverse.keys()):
        group = table.reverse[sid]
        if len(group) < 2:
            continue
        recon = l1[sid.c1] + l2[sid.c2]
        dist_to_recon = [
            (float(np.sum((x[row_of[i]] - recon) ** 2)), i) for i in group
        ]
        keeper = min(dist_to_recon)[1]
        for item in sorted(i for i in group if i != keeper):
            _, a_idx, b_idx = candidate_pairs(x[row_of[item]])
            for a, b in zip(a_idx, b_idx):
                cand = SemanticID(int(a), int(b))
                if cand not in occupied:
                    forward[item] = cand
                    occupied.add(cand)
                    break
            # no free candidate: keep the colliding SID
    return AssignmentTable(forward)


def inverted_index(table: AssignmentTable) -> dict[SemanticID, list[int]]:
    """SID -> ascending item ids; exact inverse of the forward map."""
    return {sid: list(items) for sid, items in table.reverse.items()}


def write_collision_csv(path: str, rows: list[dict]) -> None:
    """Rows mirror Table-2-style columns; conflict_rate is written in percent."""
    header = ["modality", "variant", "loss1", "loss2", "conflicts", "conflict_rate", "unique_pairs"]
    out = []
    for r in rows:
        out.append(
            [
                r["modality"],
                r["variant"],
                f"{r['loss1']:.6f}",
                f"{r['loss2']:.6f}",
                r["conflicts"],
                f"{100.0 * r['conflict_rate']:.4f}",
                r["unique_pairs"],
            ]
        )
    io.write_csv(path, header, out)
