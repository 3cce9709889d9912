"""Dataset ingestion, synthetic generation, sequence preprocessing and coverage stats.

Item files are JSON-lines ``{"item_id": int, "static": [f32...], "mm": {"81": [...]}}``
with absent ``mm`` keys meaning a missing modality; sequence files are JSON-lines
``{"user_id": int, "history": [int...], "target": int}``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import io, rng


@dataclass
class ItemRecord:
    item_id: int
    modality_embeddings: dict[int, np.ndarray]  # modality id -> vector; absent = missing
    static_features: np.ndarray
    popularity_count: int = 0


@dataclass
class ItemCatalog:
    items: list[ItemRecord]

    @property
    def total_items(self) -> int:
        return len(self.items)

    def __post_init__(self):
        ids = [it.item_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate item_id in catalog")

    def by_id(self) -> dict[int, ItemRecord]:
        return {it.item_id: it for it in self.items}

    def modality_dims(self) -> dict[int, int]:
        dims: dict[int, int] = {}
        for it in self.items:
            for m, v in it.modality_embeddings.items():
                d = int(v.shape[0])
                if dims.setdefault(m, d) != d:
                    raise ValueError(f"modality {m} has inconsistent dimensions")
        return dims


@dataclass
class UserSequence:
    user_id: int
    history: list[int]
    target: int | None = None


@dataclass
class PaddedRow:
    token_ids: np.ndarray  # [L_max] int64, PAD id in padded slots
    valid_mask: np.ndarray  # [L_max] bool
    target: int | None = None


@dataclass
class PaddedBatch:
    token_ids: np.ndarray  # [B, L_max]
    valid_mask: np.ndarray  # [B, L_max]
    targets: np.ndarray  # [B]
    user_ids: np.ndarray = field(default=None)


def load_catalog(path: str) -> ItemCatalog:
    items = []
    seen: set[int] = set()
    for lineno, obj in io.read_jsonl(path):
        try:
            item_id = int(obj["item_id"])
            static = np.asarray(obj.get("static", []), dtype=np.float32)
            mm = {
                int(k): np.asarray(v, dtype=np.float32)
                for k, v in obj.get("mm", {}).items()
            }
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: malformed item record on line {lineno}: {exc}") from exc
        if item_id < 0:
            raise ValueError(f"{path}: negative item_id on line {lineno}")
        if item_id in seen:
            raise ValueError(f"{path}: duplicate item_id {item_id} on line {lineno}")
        seen.add(item_id)
        items.append(ItemRecord(item_id, mm, static))
    catalog = ItemCatalog(items)
    catalog.modality_dims()  # validates per-modality dimension consistency
    return catalog


def write_catalog(path: str, catalog: ItemCatalog) -> None:
    def as_record(it: ItemRecord) -> dict:
        rec = {"item_id": it.item_id, "static": [float(x) for x in it.static_features]}
        if it.modality_embeddings:
            rec["mm"] = {
                str(m): [float(x) for x in v]
                for m, v in sorted(it.modality_embeddings.items())
            }
        return rec

    io.write_jsonl(path, (as_record(it) for it in catalog.items))


def load_sequences(path: str) -> list[UserSequence]:
    seqs = []
    for lineno, obj in io.read_jsonl(path):
        try:
            seqs.append(
                UserSequence(
                    user_id=int(obj["user_id"]),
                    history=[int(i) for i in obj["history"]],
                    target=int(obj["target"]) if obj.get("target") is not None else None,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: malformed sequence on line {lineno}: {exc}") from exc
    return seqs


def write_sequences(path: str, seqs: list[UserSequence]) -> None:
    def as_record(s: UserSequence) -> dict:
        rec = {"user_id": s.user_id, "history": list(s.history)}
        if s.target is not None:
            rec["target"] = s.target
        return rec

    io.write_jsonl(path, (as_record(s) for s in seqs))


def coverage_report(catalog: ItemCatalog) -> list[tuple[int, int, int, float]]:
    """Per-modality (modality, covered_items, total_items, coverage percent to 3 dp)."""
    if catalog.total_items == 0:
        raise ValueError("coverage_report: empty catalog")
    total = catalog.total_items
    covered: dict[int, int] = {}
    for it in catalog.items:
        for m in it.modality_embeddings:
            covered[m] = covered.get(m, 0) + 1
    return [
        (m, c, total, round(100.0 * c / total, 3))
        for m, c in sorted(covered.items())
    ]


def coverage_rate(covered: int, total: int) -> float:
    return round(100.0 * covered / total, 3)


def generate_synthetic(
    n_items: int,
    n_users: int,
    n_modalities: int,
    dim: int,
    n_latent_clusters: int,
    seq_len_range: tuple[int, int],
    missing_rate_per_modality: list[float],
    seed: int,
    static_dim: int = 4,
    cluster_noise: float = 0.25,
    popularity_skew: float = 0.4,
    sequences_per_user: int = 1,
    modality_ids: list[int] | None = None,
) -> tuple[ItemCatalog, list[UserSequence]]:
    """Clustered synthetic catalog plus cluster-biased user histories.

    Items are drawn around ``n_latent_clusters`` shared latent centroids; each
    modality sees them through its own random linear distortion, and vectors
    are dropped i.i.d. at the per-modality missing rates. Users prefer one or
    two clusters and their histories are biased random walks over those
    clusters, so next-item prediction is learnable. Fully deterministic in
    ``seed`` (Philox streams).
    """
    if n_latent_clusters > n_items:
        raise ValueError("n_latent_clusters must be <= n_items")
    if seq_len_range[0] < 2:
        raise ValueError("seq_len_range min must be >= 2 (one history item plus target)")
    if len(missing_rate_per_modality) != n_modalities:
        raise ValueError("missing_rate_per_modality must have one entry per modality")
    if any(not 0.0 <= p <= 1.0 for p in missing_rate_per_modality):
        raise ValueError("missing rates must lie in [0, 1]")
    if modality_ids is None:
        modality_ids = list(range(81, 81 + n_modalities))

    g = rng.make_rng(seed, rng.SYNTH)
    centroids = g.standard_normal((n_latent_clusters, dim)) * 2.0
    distortions = [
        np.eye(dim) + 0.15 * g.standard_normal((dim, dim)) for _ in range(n_modalities)
    ]
    static_proj = g.standard_normal((dim, static_dim)) * 0.5

    clusters = g.integers(0, n_latent_clusters, size=n_items)
    latent = centroids[clusters] + cluster_noise * g.standard_normal((n_items, dim))

    # mild popularity skew inside each cluster: weight ~ rank^(-skew)
    pop_weight = (1.0 + g.permuted(np.arange(n_items)).astype(np.float64)) ** (-popularity_skew)

    items = []
    for i in range(n_items):
        mm = {}
        for m in range(n_modalities):
            if g.random() >= missing_rate_per_modality[m]:
                v = distortions[m] @ latent[i] + 0.05 * g.standard_normal(dim)
                mm[modality_ids[m]] = v.astype(np.float32)
        static = (latent[i] @ static_proj + 0.1 * g.standard_normal(static_dim)).astype(np.float32)
        items.append(ItemRecord(i, mm, static))
    catalog = ItemCatalog(items)

    # per-cluster item pools and sampling weights
    pools = [np.where(clusters == c)[0] for c in range(n_latent_clusters)]
    pool_w = []
    for c in range(n_latent_clusters):
        w = pop_weight[pools[c]]
        pool_w.append(w / w.sum() if w.size else w)

    def draw_item(cluster: int) -> int:
        if pools[cluster].size == 0:
            return int(g.integers(0, n_items))
        return int(g.choice(pools[cluster], p=pool_w[cluster]))

    sequences = []
    lo, hi = seq_len_range
    for u in range(n_users):
        n_pref = 1 + int(g.random() < 0.5)
        prefs = g.choice(n_latent_clusters, size=n_pref, replace=False)
        for _ in range(max(1, sequences_per_user)):
            total_len = int(g.integers(lo, hi + 1))  # history + target
            walk = []
            for _ in range(total_len):
                if g.random() < 0.85:
                    c = int(prefs[int(g.integers(0, n_pref))])
                else:
                    c = int(g.integers(0, n_latent_clusters))
                walk.append(draw_item(c))
            sequences.append(UserSequence(u, walk[:-1], walk[-1]))
    return catalog, sequences


def pad_truncate(seq: UserSequence, l_max: int, pad_id: int) -> PaddedRow:
    """Left-pad / recency-truncate one history to ``l_max`` positions.

    Real tokens are right-aligned so the final position always holds the most
    recent item.
    """
    if l_max < 1:
        raise ValueError("l_max must be >= 1")
    hist = seq.history[-l_max:]
    if pad_id in hist or pad_id == seq.target:
        raise ValueError(f"pad_id {pad_id} collides with a real item_id")
    n = len(hist)
    token_ids = np.full(l_max, pad_id, dtype=np.int64)
    valid = np.zeros(l_max, dtype=bool)
    if n:
        token_ids[l_max - n :] = hist
        valid[l_max - n :] = True
    return PaddedRow(token_ids, valid, seq.target)


def collate(rows: list[PaddedRow], user_ids: list[int] | None = None) -> PaddedBatch:
    return PaddedBatch(
        token_ids=np.stack([r.token_ids for r in rows]),
        valid_mask=np.stack([r.valid_mask for r in rows]),
        targets=np.asarray([-1 if r.target is None else r.target for r in rows], dtype=np.int64),
        user_ids=None if user_ids is None else np.asarray(user_ids, dtype=np.int64),
    )


def split_users(
    sequences: list[UserSequence],
    seed: int,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> dict[str, list[UserSequence]]:
    """User-level disjoint train/valid/test split; all windows of a user stay together."""
    users = sorted({s.user_id for s in sequences})
    order = rng.make_rng(seed, rng.SPLIT).permutation(len(users))
    shuffled = [users[i] for i in order]
    n = len(shuffled)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    buckets = {
        u: "train" if i < n_train else ("valid" if i < n_train + n_valid else "test")
        for i, u in enumerate(shuffled)
    }
    out: dict[str, list[UserSequence]] = {"train": [], "valid": [], "test": []}
    for s in sequences:
        out[buckets[s.user_id]].append(s)
    return out


def interaction_counts(sequences: list[UserSequence], targets_only: bool = False) -> dict[int, int]:
    """Raw interaction counts over a (training) split; history and targets both count."""
    counts: dict[int, int] = {}
    for s in sequences:
        seen = [] if targets_only else list(s.history)
        if s.target is not None:
            seen.append(s.target)
        for i in seen:
            counts[i] = counts.get(i, 0) + 1
    return counts


def attach_popularity(catalog: ItemCatalog, counts: dict[int, int]) -> None:
    """Fill popularity_count from training interactions (never shipped in the item file)."""
    for it in catalog.items:
        it.popularity_count = counts.get(it.item_id, 0)
