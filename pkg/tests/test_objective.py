import numpy as np
import pytest

from energyadapt import autodiff as ad
from energyadapt.objective import (
    ClassAbsent,
    LossWeights,
    center_matrix,
    class_center,
    loss_no_latent,
    loss_with_latent,
    negative_centers,
)
from energyadapt.trainer import DomainModel, ModelConfig

from conftest import analytic_grads, numeric_grad, rel_err

F, C = 4, 3


def toy(seed, n_pos=6, n_neg=5):
    rng = np.random.default_rng(seed)
    dm = DomainModel(0, ModelConfig(input_dim=F, feature_dim=F, num_classes=C, trunk_hidden=()), rng)
    for p in {**dm.phi_parameters(), **dm.theta_parameters()}.values():
        p.value = p.value + 0.1 * rng.standard_normal(p.shape)
    pos_y = np.arange(n_pos) % C
    neg_y = rng.integers(0, C, n_neg)
    return dict(
        dm=dm,
        pos_x=ad.parameter(rng.standard_normal((n_pos, F))),
        pos_y=pos_y,
        neg=ad.parameter(rng.standard_normal((n_neg, F))),
        neg_y=neg_y,
        centers=rng.standard_normal((n_neg, F)),
        z=rng.standard_normal((n_neg, F)),
        noise=rng.standard_normal((n_pos, F)),
    )


def latent_loss(t, weights=None):
    return loss_with_latent(t["pos_x"], t["pos_y"], t["neg"], t["neg_y"], t["centers"], t["z"], t["dm"],
                            None, weights, pos_noise=t["noise"])


def plain_loss(t, weights=None):
    return loss_no_latent(t["pos_x"], t["pos_y"], t["neg"], t["neg_y"], t["dm"], weights)


def only(term):
    w = dict(classification=0.0, kl=0.0, pos_energy=0.0, neg_energy=0.0, adapted=0.0)
    w[term] = 1.0
    return LossWeights(**w)


def all_params(dm):
    return {**dm.phi_parameters(), **dm.theta_parameters()}


def grads_after(root, tensors):
    ad.backward(root)
    return {k: (np.zeros(v.shape) if v.grad is None else v.grad.copy()) for k, v in tensors.items()}


class TestCenters:
    def test_example(self):
        np.testing.assert_allclose(class_center([[1.0, 0.0], [3.0, 0.0]], [0, 0], 0), [2.0, 0.0])

    def test_absent_class(self):
        with pytest.raises(ClassAbsent):
            class_center(np.ones((2, 2)), [0, 0], 1)

    def test_matrix_matches_loop(self, rng):
        x = rng.standard_normal((9, 3))
        y = rng.integers(0, 3, 9)
        m, covered = center_matrix(y)
        assert covered.all()
        for r in range(9):
            np.testing.assert_allclose((m @ x)[r], x[y == y[r]].mean(axis=0))

    def test_negative_centers_fall_back_to_own_batch(self):
        pos_x = np.array([[1.0, 0.0], [3.0, 0.0]])
        neg_x = np.array([[0.0, 4.0], [0.0, 8.0], [5.0, 5.0]])
        out = negative_centers([0, 1, 1], neg_x, [0, 0], pos_x)
        np.testing.assert_allclose(out, [[2.0, 0.0], [2.5, 6.5], [2.5, 6.5]])


class TestRouting:
    """Each loss term must reach exactly the parameters it is meant to train."""

    @pytest.mark.parametrize("loss", [latent_loss, plain_loss])
    def test_bracket_only_moves_adapted_features(self, loss):
        t = toy(0)
        g = grads_after(loss(t, only("adapted")).total, {**all_params(t["dm"]), "neg": t["neg"]})
        assert np.abs(g.pop("neg")).sum() > 0
        for name, v in g.items():
            assert not v.any(), name

    @pytest.mark.parametrize("loss", [latent_loss, plain_loss])
    def test_negative_energy_stops_at_chain_output(self, loss):
        t = toy(1)
        g = grads_after(loss(t, only("neg_energy")).total, {**all_params(t["dm"]), "neg": t["neg"]})
        assert not g["neg"].any()
        assert all(np.abs(v.grad).sum() > 0 for v in t["dm"].theta_parameters().values())
        assert not any(g[k].any() for k in t["dm"].phi_parameters())

    def test_classification_leaves_energy_alone(self):
        t = toy(2)
        g = grads_after(latent_loss(t, only("classification")).total, all_params(t["dm"]))
        assert not any(g[k].any() for k in t["dm"].theta_parameters())
        assert any(g[k].any() for k in t["dm"].posterior.parameters())

    def test_kl_reaches_both_heads_and_inputs(self):
        t = toy(3)
        g = grads_after(latent_loss(t, only("kl")).total, {**all_params(t["dm"]), "x": t["pos_x"]})
        assert g["x"].any()
        assert any(g[k].any() for k in t["dm"].prior.parameters())
        assert any(g[k].any() for k in t["dm"].posterior.parameters())
        assert not any(g[k].any() for k in t["dm"].theta_parameters())


class TestFiniteDifferences:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("loss", [latent_loss, plain_loss])
    def test_total_gradient(self, seed, loss):
        t = toy(10 + seed)
        leaves = list(all_params(t["dm"]).values()) + [t["pos_x"], t["neg"]]
        root = loss(t).total
        got = analytic_grads(root, leaves)
        for leaf, g in zip(leaves, got):
            assert rel_err(g, numeric_grad(root, leaf)) < 1e-5, leaf.name


class TestBreakdown:
    def test_total_is_signed_sum(self):
        t = toy(4)
        w = LossWeights(0.5, 2.0, 1.5, 0.7, 3.0)
        br = latent_loss(t, w)
        assert br.values()["total"] == pytest.approx(br.signed_sum(), rel=1e-12)

    def test_plain_loss_has_zero_kl(self):
        assert plain_loss(toy(5)).values()["kl"] == 0.0

    def test_rejects_raw_array(self):
        t = toy(6)
        t["neg"] = t["neg"].value
        with pytest.raises(TypeError):
            plain_loss(t)

    def test_kl_sign_flips_bracket_kl(self):
        t = toy(7)
        plus = latent_loss(t, LossWeights(adapted_kl_sign=1.0)).values()["adapted"]
        zero = latent_loss(t, LossWeights(adapted_kl_sign=0.0)).values()["adapted"]
        minus = latent_loss(t, LossWeights(adapted_kl_sign=-1.0)).values()["adapted"]
        assert plus > zero > minus
        assert plus - zero == pytest.approx(zero - minus, rel=1e-12)
