import numpy as np
import pytest

from energyadapt.data import (
    BenchmarkSpec,
    DomainDataset,
    FeatureFileError,
    batch_iter,
    class_means,
    epoch_batches,
    generate_rotated_benchmark,
    load_feature_csv,
    make_benchmark,
    rotate_plane,
    save_feature_csv,
    split_dataset,
)


def logistic_probe_accuracy(x, y, num_classes, iters=300, lr=0.5):
    """Full-batch softmax regression by gradient descent; returns training accuracy."""
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    x = np.hstack([x, np.ones((len(x), 1))])
    W = np.zeros((x.shape[1], num_classes))
    onehot = np.eye(num_classes)[y]
    for _ in range(iters):
        logits = x @ W
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        W -= lr * x.T @ (p - onehot) / len(x)
    return float(np.mean((x @ W).argmax(axis=1) == y))


class TestRotation:
    def test_zero_angle_is_identity(self, rng):
        x = rng.standard_normal((5, 4))
        np.testing.assert_array_equal(rotate_plane(x, 0.0), x)

    def test_ninety_degrees(self):
        np.testing.assert_allclose(rotate_plane(np.array([[1.0, 0.0, 7.0]]), 90.0), [[0.0, 1.0, 7.0]], atol=1e-15)

    def test_preserves_plane_norm(self, rng):
        x = rng.standard_normal((50, 3))
        r = rotate_plane(x, 37.0)
        np.testing.assert_allclose(np.linalg.norm(r[:, :2], axis=1), np.linalg.norm(x[:, :2], axis=1), rtol=1e-14)
        np.testing.assert_array_equal(r[:, 2], x[:, 2])


class TestBenchmark:
    def test_shapes_and_ids(self):
        spec = BenchmarkSpec(per_class=10)
        src, tgt = generate_rotated_benchmark(spec, 0)
        assert [d.angle for d in src] == [15.0, 30.0, 45.0, 60.0, 75.0]
        assert [d.domain for d in src + tgt] == list(range(7))
        for d in src + tgt:
            assert d.features.shape == (40, 16)
            np.testing.assert_array_equal(np.bincount(d.labels), [10] * 4)

    def test_reproducible(self):
        spec = BenchmarkSpec(per_class=5)
        a, _ = generate_rotated_benchmark(spec, 3)
        b, _ = generate_rotated_benchmark(spec, 3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.features, y.features)

    def test_cluster_geometry(self):
        spec = BenchmarkSpec(per_class=2000, source_angles=(0.0,), target_angles=())
        (d,), _ = generate_rotated_benchmark(spec, 1)
        means = class_means(spec)
        for c in range(4):
            rows = d.features[d.labels == c]
            np.testing.assert_allclose(rows[:, :2].mean(axis=0), means[c], atol=0.05)
            np.testing.assert_allclose(rows[:, 2:].var(axis=0), 0.25, rtol=0.15)

    def test_default_domains_linearly_separable(self):
        src, tgt = generate_rotated_benchmark(BenchmarkSpec(), 0)
        for d in src + tgt:
            assert logistic_probe_accuracy(d.features, d.labels, 4) > 0.95

    @pytest.mark.parametrize("kw", [{"num_classes": 1}, {"dim": 1}, {"target_angles": (15.0,)}, {"source_angles": ()}])
    def test_degenerate_spec(self, kw):
        with pytest.raises(ValueError):
            generate_rotated_benchmark(BenchmarkSpec(**kw), 0)

    def test_split_is_stratified_partition(self):
        bench = make_benchmark(BenchmarkSpec(per_class=20), 0, holdout=0.25)
        for a, b in zip(bench.sources, bench.held_out):
            np.testing.assert_array_equal(np.bincount(b.labels), [5] * 4)
            assert len(a) + len(b) == 80

    def test_split_rows_disjoint(self, rng):
        ds = DomainDataset(0, np.arange(40.0)[:, None], np.arange(40) % 2)
        a, b = split_dataset(ds, 0.3, rng)
        assert set(a.features[:, 0]).isdisjoint(b.features[:, 0])


class TestDataset:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            DomainDataset(0, np.array([[np.nan]]), np.array([0]))

    def test_rejects_row_mismatch(self):
        with pytest.raises(ValueError):
            DomainDataset(0, np.zeros((2, 3)), np.zeros(3))


class TestBatching:
    def test_single_batch_when_large(self, rng):
        ds = DomainDataset(0, np.arange(7.0)[:, None], np.zeros(7))
        (b,) = epoch_batches(ds, 50, rng)
        assert sorted(b.features[:, 0]) == list(range(7))

    def test_epoch_is_partition(self, rng):
        ds = DomainDataset(2, np.arange(23.0)[:, None], np.zeros(23))
        batches = epoch_batches(ds, 5, rng)
        assert [len(b) for b in batches] == [5, 5, 5, 5, 3]
        seen = np.concatenate([b.features[:, 0] for b in batches])
        np.testing.assert_array_equal(np.sort(seen), np.arange(23))
        assert all((b.domains == 2).all() for b in batches)

    def test_same_seed_same_sequence(self):
        ds = DomainDataset(0, np.arange(10.0)[:, None], np.zeros(10))
        a = batch_iter(ds, 3, np.random.default_rng(5))
        b = batch_iter(ds, 3, np.random.default_rng(5))
        for _ in range(9):
            np.testing.assert_array_equal(next(a).features, next(b).features)

    def test_bad_batch_size(self, rng):
        ds = DomainDataset(0, np.zeros((2, 1)), np.zeros(2))
        with pytest.raises(ValueError):
            next(batch_iter(ds, 0, rng))


class TestFeatureCsv:
    def test_round_trip(self, tmp_path, rng):
        sets = [DomainDataset(k, rng.standard_normal((6, 3)), rng.integers(0, 4, 6)) for k in (3, 1)]
        save_feature_csv(tmp_path / "f.csv", sets)
        back = load_feature_csv(tmp_path / "f.csv", dim=3)
        assert [d.domain for d in back] == [3, 1]
        for a, b in zip(sets, back):
            np.testing.assert_array_equal(a.features, b.features)
            np.testing.assert_array_equal(a.labels, b.labels)

    def test_empty_data_section(self, tmp_path):
        (tmp_path / "e.csv").write_text("domain,label,f0,f1\n")
        (d,) = load_feature_csv(tmp_path / "e.csv")
        assert len(d) == 0 and d.dim == 2

    def test_bad_arity_names_line(self, tmp_path):
        (tmp_path / "b.csv").write_text("domain,label,f0,f1\n0,1,0.5,0.5\n0,1,0.5\n")
        with pytest.raises(FeatureFileError, match="line 3"):
            load_feature_csv(tmp_path / "b.csv")

    @pytest.mark.parametrize("value", ["nan", "inf", "abc"])
    def test_bad_values(self, tmp_path, value):
        (tmp_path / "b.csv").write_text(f"domain,label,f0\n0,1,{value}\n")
        with pytest.raises(FeatureFileError, match="line 2"):
            load_feature_csv(tmp_path / "b.csv")

    def test_bad_header(self, tmp_path):
        (tmp_path / "h.csv").write_text("label,domain,f0\n")
        with pytest.raises(FeatureFileError):
            load_feature_csv(tmp_path / "h.csv")

    def test_dim_mismatch(self, tmp_path):
        (tmp_path / "d.csv").write_text("domain,label,f0\n0,0,1.0\n")
        with pytest.raises(FeatureFileError):
            load_feature_csv(tmp_path / "d.csv", dim=2)
