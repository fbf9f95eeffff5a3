import numpy as np
import pytest

from energyadapt.inference import (
    LatentMode,
    NotTrained,
    aggregate,
    predict,
    predict_sample,
    step_sweep,
    write_predictions_csv,
    write_sweep_csv,
)
from energyadapt.sgld import SgldConfig
from energyadapt.trainer import ModelBundle, ModelConfig

from conftest import tiny_setup

CFG = SgldConfig(step_size=2.0, num_steps=4)


@pytest.fixture(scope="module")
def trained():
    bench, bundle, _, _ = tiny_setup(iterations=3)
    target = bench.targets[0]
    return bundle, target.features[:10], target.labels[:10]


class TestAggregate:
    def test_ensemble_mean(self):
        np.testing.assert_allclose(aggregate([[0.9, 0.1], [0.5, 0.5]]), [0.7, 0.3])

    def test_most_confident(self):
        np.testing.assert_allclose(aggregate([[0.9, 0.1], [0.6, 0.4]], "most_confident"), [0.9, 0.1])

    @pytest.mark.parametrize("mode", ["ensemble", "closest_cosine", "weighted_cosine", "most_confident"])
    def test_unanimity(self, mode):
        p = np.array([[0.2, 0.5, 0.3]] * 3)
        out = aggregate(p, mode, features=np.array([1.0, 0.0]), centroids=np.eye(3, 2))
        np.testing.assert_allclose(out, p[0])

    def test_closest_cosine_picks_aligned_domain(self):
        p = np.array([[0.9, 0.1], [0.2, 0.8]])
        out = aggregate(p, "closest_cosine", features=np.array([0.1, 2.0]), centroids=np.eye(2))
        np.testing.assert_allclose(out, [0.2, 0.8])

    def test_weighted_cosine_is_convex(self, rng):
        p = rng.dirichlet(np.ones(3), size=(5, 4))
        out = aggregate(p, "weighted_cosine", features=rng.standard_normal((5, 6)),
                        centroids=rng.standard_normal((4, 6)))
        np.testing.assert_allclose(out.sum(axis=1), 1.0)
        assert np.all(out >= p.min(axis=1) - 1e-12) and np.all(out <= p.max(axis=1) + 1e-12)

    def test_cosine_needs_centroids(self):
        with pytest.raises(ValueError):
            aggregate([[1.0, 0.0]], "closest_cosine")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            aggregate([[1.0, 0.0]], "vote")


class TestPredict:
    def test_probabilities_normalized(self, trained):
        bundle, x, y = trained
        p = predict(bundle, x, CFG, num_chains=2, labels=y)
        for arr in (p.pre, p.post, p.ensemble()):
            np.testing.assert_allclose(arr.sum(axis=-1), 1.0, atol=1e-9)

    def test_zero_steps_pre_equals_post(self, trained):
        bundle, x, y = trained
        p = predict(bundle, x, SgldConfig(num_steps=0), num_chains=2, labels=y)
        np.testing.assert_array_equal(p.pre, p.post)
        assert p.accuracy(adapted=True) == p.accuracy(adapted=False)

    def test_bundle_untouched(self, trained):
        bundle, x, y = trained
        before = bundle.checksum()
        buffers = [dm.buffer.features.copy() for dm in bundle.domains]
        for mode in LatentMode:
            predict(bundle, x, CFG, num_chains=2, mode=mode, labels=y)
        assert bundle.checksum() == before
        for b, dm in zip(buffers, bundle.domains):
            np.testing.assert_array_equal(b, dm.buffer.features)

    def test_order_and_batch_independence(self, trained):
        bundle, x, y = trained
        ids = np.arange(len(x))
        full = predict(bundle, x, CFG, num_chains=2, seed=4, sample_ids=ids)
        perm = np.random.default_rng(0).permutation(len(x))
        shuffled = predict(bundle, x[perm], CFG, num_chains=2, seed=4, sample_ids=ids[perm])
        np.testing.assert_array_equal(full.post[perm], shuffled.post)
        one = predict_sample(x[3], bundle, CFG, num_chains=2, seed=4, sample_id=3)
        # a one-row batch takes a different BLAS kernel, so allow rounding here
        np.testing.assert_allclose(one.post, full.post[3], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(one.ensemble, full.ensemble()[3], rtol=1e-12, atol=1e-15)

    @pytest.mark.filterwarnings("ignore:single source")
    def test_single_source_single_chain_no_steps_is_plain_classifier(self):
        from energyadapt import autodiff as ad
        bench, bundle, _, _ = tiny_setup(num_sources=1, iterations=1)
        x = bench.targets[0].features[:4]
        rec = predict_sample(x[0], bundle, SgldConfig(num_steps=0), num_chains=1, mode="none")
        feats = bundle.features(x[:1])
        logits = bundle.domains[0].classifier.logits(feats, np.zeros_like(feats), frozen=True)
        np.testing.assert_allclose(rec.ensemble, ad.softmax(logits).value[0], rtol=1e-12)

    def test_mode_none_ignores_latent_heads(self, trained):
        bundle, x, _ = trained
        a = predict(bundle, x, CFG, num_chains=1, mode="none")
        saved = [dm.prior.mean_head.biases[0].value.copy() for dm in bundle.domains]
        for dm in bundle.domains:
            dm.prior.mean_head.biases[0].value = dm.prior.mean_head.biases[0].value + 5.0
        b = predict(bundle, x, CFG, num_chains=1, mode="none")
        for dm, s in zip(bundle.domains, saved):
            dm.prior.mean_head.biases[0].value = s
        np.testing.assert_array_equal(a.post, b.post)

    def test_oracle_needs_labels(self, trained):
        bundle, x, _ = trained
        with pytest.raises(ValueError):
            predict(bundle, x, CFG, mode="oracle")

    def test_untrained_bundle(self):
        bundle = ModelBundle(ModelConfig(input_dim=4, feature_dim=4, trunk_hidden=()), 2)
        with pytest.raises(NotTrained):
            predict(bundle, np.zeros((1, 4)), CFG)

    def test_trace_has_every_step(self, trained):
        bundle, x, _ = trained
        rec = predict_sample(x[0], bundle, CFG, num_chains=1, record_trace=True)
        assert len(rec.traces) == bundle.num_domains
        assert rec.traces[0]["features"].shape == (CFG.num_steps + 1, bundle.feature_dim)
        np.testing.assert_allclose(rec.traces[0]["features"][0], bundle.features(x[:1])[0])


class TestSweep:
    def test_rows_and_zero_step(self, trained, tmp_path):
        bundle, x, y = trained
        rows = step_sweep(x, y, bundle, [0, 2, 4], modes=("none", "prior"), cfg=CFG, num_chains=2)
        assert [(r["mode"], r["steps"]) for r in rows] == [(m, s) for m in ("none", "prior") for s in (0, 2, 4)]
        plain = predict(bundle, x, SgldConfig(num_steps=0), num_chains=2, mode="prior", labels=y)
        assert rows[3]["accuracy"] == plain.accuracy(adapted=False)
        assert rows[3]["mean_energy"] == pytest.approx(plain.energy_pre.mean(), rel=1e-12)
        write_sweep_csv(tmp_path / "s.csv", rows)
        assert len((tmp_path / "s.csv").read_text().splitlines()) == 7

    def test_prefix_of_long_chain(self, trained):
        bundle, x, y = trained
        rows = step_sweep(x, y, bundle, [2, 4], cfg=CFG, num_chains=2)
        short = predict(bundle, x, SgldConfig(2.0, 2), num_chains=2, labels=y)
        assert rows[0]["accuracy"] == short.accuracy()
        assert rows[0]["mean_energy"] == pytest.approx(short.energy_post.mean(), rel=1e-12)


def test_predictions_csv(trained, tmp_path):
    bundle, x, y = trained
    p = predict(bundle, x, CFG, num_chains=1, labels=y)
    write_predictions_csv(tmp_path / "p.csv", p)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    S, C = bundle.num_domains, bundle.num_classes
    assert lines[0].split(",")[:3] == ["sample_id", "true_label", "pre_src0"]
    assert len(lines[0].split(",")) == 2 + 2 * S + 1 + C
    assert len(lines) == len(x) + 1
