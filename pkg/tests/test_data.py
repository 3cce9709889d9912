import json

import numpy as np
import pytest
from scipy import stats

from cascaderec import data


def small_catalog(tmp_path, records):
    path = tmp_path / "items.jsonl"
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    return str(path)


class TestLoadCatalog:
    def test_three_well_formed_lines(self, tmp_path):
        path = small_catalog(
            tmp_path,
            [
                {"item_id": 0, "static": [1.0], "mm": {"81": [0.5, 0.5]}},
                {"item_id": 1, "static": [2.0], "mm": {"81": [1.0, 0.0], "85": [1.0]}},
                {"item_id": 2, "static": [3.0]},
            ],
        )
        cat = data.load_catalog(path)
        assert cat.total_items == 3
        assert 85 in cat.items[1].modality_embeddings

    def test_duplicate_id_error(self, tmp_path):
        path = small_catalog(
            tmp_path,
            [{"item_id": 7, "static": []}, {"item_id": 7, "static": []}],
        )
        with pytest.raises(ValueError, match="duplicate item_id 7"):
            data.load_catalog(path)

    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"item_id": 0, "static": []}\n{not json\n')
        with pytest.raises(ValueError, match="line 2"):
            data.load_catalog(str(path))

    def test_missing_modality_stored_absent(self, tmp_path):
        path = small_catalog(
            tmp_path,
            [
                {"item_id": 1, "static": [], "mm": {"85": [1.0, 2.0]}},
                {"item_id": 2, "static": [], "mm": {}},
            ],
        )
        cat = data.load_catalog(path)
        assert 85 not in cat.by_id()[2].modality_embeddings

    def test_roundtrip_reproduces_file(self, tmp_path):
        cat, _ = data.generate_synthetic(20, 5, 2, 6, 4, (3, 5), [0.2, 0.5], seed=3)
        p1 = tmp_path / "a.jsonl"
        p2 = tmp_path / "b.jsonl"
        data.write_catalog(str(p1), cat)
        data.write_catalog(str(p2), data.load_catalog(str(p1)))
        assert p1.read_bytes() == p2.read_bytes()

    def test_sequence_roundtrip(self, tmp_path):
        seqs = [data.UserSequence(1, [3, 4, 5], 6), data.UserSequence(2, [9], 3)]
        p = tmp_path / "s.jsonl"
        data.write_sequences(str(p), seqs)
        back = data.load_sequences(str(p))
        assert [(s.user_id, s.history, s.target) for s in back] == [
            (1, [3, 4, 5], 6),
            (2, [9], 3),
        ]


class TestCoverage:
    def test_paper_rates(self):
        # Table-1 style arithmetic at full precision
        assert data.coverage_rate(16_693_655, 19_099_627) == 87.403
        assert data.coverage_rate(7_534_474, 19_099_627) == 39.448

    def test_full_coverage(self):
        cat, _ = data.generate_synthetic(50, 5, 2, 6, 4, (3, 5), [0.0, 0.0], seed=1)
        for _, covered, total, rate in data.coverage_report(cat):
            assert covered == total == 50
            assert rate == 100.0

    def test_empty_catalog_error(self):
        with pytest.raises(ValueError):
            data.coverage_report(data.ItemCatalog([]))

    def test_rates_bounded(self):
        cat, _ = data.generate_synthetic(80, 5, 3, 6, 4, (3, 5), [0.1, 0.5, 0.9], seed=2)
        for _, covered, total, rate in data.coverage_report(cat):
            assert covered <= total
            assert 0.0 <= rate <= 100.0


class TestGenerateSynthetic:
    def test_determinism_byte_identical(self, tmp_path):
        out = []
        for run in range(2):
            cat, seqs = data.generate_synthetic(40, 10, 2, 6, 4, (3, 6), [0.2, 0.4], seed=9)
            pc = tmp_path / f"c{run}.jsonl"
            ps = tmp_path / f"s{run}.jsonl"
            data.write_catalog(str(pc), cat)
            data.write_sequences(str(ps), seqs)
            out.append((pc.read_bytes(), ps.read_bytes()))
        assert out[0] == out[1]

    def test_missing_rate_binomial_interval(self):
        # covered ~ Binomial(n_items, 0.4); 99% interval from the scipy oracle
        n = 10_000
        cat, _ = data.generate_synthetic(n, 1, 1, 4, 10, (2, 3), [0.6], seed=17)
        covered = sum(1 for it in cat.items if it.modality_embeddings)
        lo = stats.binom.ppf(0.005, n, 0.4)
        hi = stats.binom.ppf(0.995, n, 0.4)
        assert lo <= covered <= hi

    def test_preconditions(self):
        with pytest.raises(ValueError, match="seq_len_range"):
            data.generate_synthetic(10, 2, 1, 4, 2, (1, 3), [0.0], seed=0)
        with pytest.raises(ValueError, match="n_latent_clusters"):
            data.generate_synthetic(10, 2, 1, 4, 20, (2, 3), [0.0], seed=0)
        with pytest.raises(ValueError, match="missing"):
            data.generate_synthetic(10, 2, 1, 4, 2, (2, 3), [1.5], seed=0)

    def test_history_plus_target_learnable_shape(self):
        _, seqs = data.generate_synthetic(40, 12, 1, 4, 4, (3, 6), [0.0], seed=4)
        for s in seqs:
            assert len(s.history) >= 2
            assert s.target is not None


class TestPadTruncate:
    def test_truncation_keeps_most_recent(self):
        seq = data.UserSequence(0, list(range(150)), target=999)
        row = data.pad_truncate(seq, 101, pad_id=5000)
        assert row.valid_mask.all()
        assert list(row.token_ids) == list(range(49, 150))

    def test_padding_left_aligned_pads(self):
        seq = data.UserSequence(0, [10, 11, 12], target=999)
        row = data.pad_truncate(seq, 101, pad_id=5000)
        assert row.valid_mask.sum() == 3
        assert (row.token_ids[:98] == 5000).all()
        assert list(row.token_ids[98:]) == [10, 11, 12]
        assert not row.valid_mask[:98].any() and row.valid_mask[98:].all()

    def test_exact_length_unchanged(self):
        seq = data.UserSequence(0, list(range(101)), target=999)
        row = data.pad_truncate(seq, 101, pad_id=5000)
        assert row.valid_mask.all()
        assert list(row.token_ids) == list(range(101))

    def test_pad_collision_error(self):
        with pytest.raises(ValueError, match="pad_id"):
            data.pad_truncate(data.UserSequence(0, [1, 2, 3], 9), 10, pad_id=2)

    def test_order_preserved_no_fabrication(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            hist = rng.integers(0, 1000, size=rng.integers(1, 40)).tolist()
            l_max = int(rng.integers(1, 30))
            row = data.pad_truncate(data.UserSequence(0, hist, None), l_max, pad_id=2000)
            kept = row.token_ids[row.valid_mask].tolist()
            assert kept == hist[-l_max:]


class TestSplits:
    def test_user_level_disjoint(self):
        _, seqs = data.generate_synthetic(50, 40, 1, 4, 5, (3, 5), [0.0], seed=5, sequences_per_user=3)
        splits = data.split_users(seqs, seed=5)
        users = {k: {s.user_id for s in v} for k, v in splits.items()}
        assert not (users["train"] & users["valid"])
        assert not (users["train"] & users["test"])
        assert not (users["valid"] & users["test"])
        assert sum(len(v) for v in splits.values()) == len(seqs)

    def test_popularity_counts(self):
        seqs = [data.UserSequence(0, [1, 1, 2], 3), data.UserSequence(1, [2], 1)]
        counts = data.interaction_counts(seqs)
        assert counts == {1: 3, 2: 2, 3: 1}
        assert data.interaction_counts(seqs, targets_only=True) == {3: 1, 1: 1}
