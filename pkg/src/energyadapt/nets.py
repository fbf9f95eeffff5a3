"""Networks of the discriminative energy-based model.

Every network owns its parameters as ``Tensor`` leaves. Calling a network with
``frozen=True`` routes its weights through ``stop_grad`` so the output still
depends on the inputs but contributes nothing to the weight gradients; the
training objective uses this for its stop-gradient terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

STD_FLOOR = 1e-4

_ACTIVATIONS = {
    "relu": ad.relu,
    "swish": ad.swish,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    None: None,
}


def _init_weight(rng, n_in, n_out):
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


class Mlp:
    """Fully connected stack ``x @ W + b`` with one activation tag per layer.

    ``sizes`` lists the layer widths including input and output. A single
    entry gives the identity map.
    """

    def __init__(self, sizes, activations, rng, name="mlp"):
        sizes = [int(s) for s in sizes]
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation tag per layer")
        for a in activations:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.sizes = sizes
        self.activations = list(activations)
        self.name = name
        self.weights = []
        self.biases = []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.weights.append(ad.parameter(_init_weight(rng, n_in, n_out), f"{name}.W{k}"))
            self.biases.append(ad.parameter(np.zeros(n_out), f"{name}.b{k}"))

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def parameters(self):
        out = {}
        for W, b in zip(self.weights, self.biases):
            out[W.name] = W
            out[b.name] = b
        return out

    def _layer(self, k, frozen):
        W, b = self.weights[k], self.biases[k]
        if frozen:
            return ad.stop_grad(W), ad.stop_grad(b)
        return W, b

    def __call__(self, x, frozen=False, dropout=0.0, rng=None, dropout_layers=()):
        x = ad.as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"{self.name}: input dim {x.shape[-1]} != {self.in_dim}")
        for k, act in enumerate(self.activations):
            W, b = self._layer(k, frozen)
            x = ad.bias_add(ad.matmul(x, W), b)
            if act is not None:
                x = _ACTIVATIONS[act](x)
            if dropout > 0.0 and k in dropout_layers:
                x = _dropout(x, dropout, rng)
        return x


def _dropout(x, p, rng):
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return ad.mul(x, ad.constant(keep))


def make_trunk(in_dim, feature_dim, hidden, rng, output_activation=None):
    """Shared feature extractor. ``hidden=()`` with equal dims gives the identity."""
    sizes = [in_dim, *hidden, feature_dim] if (hidden or in_dim != feature_dim) else [in_dim]
    acts = ["relu"] * len(hidden) + ([output_activation] if len(sizes) > 1 else [])
    return Mlp(sizes, acts, rng, name="trunk")


def trunk_forward(inputs, trunk, frozen=False):
    return trunk(inputs, frozen=frozen)


class Classifier(Mlp):
    """Logits of p(y | z, x) from the concatenation [x; z]."""

    def __init__(self, feature_dim, num_classes, hidden, rng, name="clf"):
        sizes = [2 * feature_dim, *hidden, num_classes]
        super().__init__(sizes, ["relu"] * len(hidden) + [None], rng, name=name)
        self.feature_dim = feature_dim

    def logits(self, x, z, frozen=False):
        return self(ad.concat(x, z), frozen=frozen)


def classify(x, z, clf, frozen=False):
    """Class probabilities; rows sum to one."""
    return ad.softmax(clf.logits(x, z, frozen=frozen))


@dataclass
class GaussianParams:
    """Diagonal Gaussian over the latent code. Fields are ``Tensor``s."""

    mean: Tensor
    std: Tensor

    def detach(self):
        return GaussianParams(ad.stop_grad(self.mean), ad.stop_grad(self.std))


class LatentHead:
    """Four fully connected ReLU layers; the last one splits into mean and std."""

    def __init__(self, feature_dim, hidden, rng, name="head"):
        self.body = Mlp([feature_dim, hidden, hidden, hidden], ["relu"] * 3, rng, name=f"{name}.body")
        self.mean_head = Mlp([hidden, feature_dim], [None], rng, name=f"{name}.mu")
        self.std_head = Mlp([hidden, feature_dim], [None], rng, name=f"{name}.sd")

    def parameters(self):
        out = self.body.parameters()
        out.update(self.mean_head.parameters())
        out.update(self.std_head.parameters())
        return out

    def __call__(self, x, frozen=False):
        h = self.body(x, frozen=frozen)
        mean = self.mean_head(h, frozen=frozen)
        std = ad.add(ad.softplus(self.std_head(h, frozen=frozen)), STD_FLOOR)
        return GaussianParams(mean, std)


def infer_prior(x, head, frozen=False):
    """p(z | x) from a single unadapted representation (or a batch of them)."""
    return head(x, frozen=frozen)


def infer_posterior(d_x, head, frozen=False):
    """q(z | d_x) from a class-center representation."""
    return head(d_x, frozen=frozen)


def reparam_sample(g, noise):
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != g.mean.shape[-1]:
        raise ShapeError(f"reparam: noise dim {noise.shape[-1]} != latent dim {g.mean.shape[-1]}")
    return ad.add(g.mean, ad.mul(g.std, ad.constant(noise)))


def kl_diag_gauss(q, p):
    """KL(q || p) for diagonal Gaussians, summed over the last axis.

    Returns one value per row for batched parameters.
    """
    if np.any(q.std.value <= 0) or np.any(p.std.value <= 0):
        raise ValueError("kl_diag_gauss: standard deviations must be positive")
    if q.mean.shape != p.mean.shape:
        raise ShapeError(f"kl_diag_gauss: shapes {q.mean.shape} vs {p.mean.shape}")
    var_ratio = ad.square(ad.div(q.std, p.std))
    mean_term = ad.square(ad.div(ad.sub(q.mean, p.mean), p.std))
    per_dim = ad.mul(0.5, ad.sub(ad.sub(ad.add(var_ratio, mean_term), 1.0), ad.log(var_ratio)))
    return ad.sum(per_dim, axis=-1)


class EnergyNet(Mlp):
    """E(x | z): three linear layers on [x; z], swish, two dropout slots, sigmoid output.

    Each weight carries a persistent power-iteration vector for spectral
    normalization.
    """

    def __init__(self, feature_dim, hidden, rng, dropout=0.1, name="energy"):
        super().__init__([2 * feature_dim, hidden, hidden, 1], ["swish", "swish", "sigmoid"], rng, name=name)
        self.feature_dim = feature_dim
        self.dropout = dropout
        self.sn_vectors = []
        for W in self.weights:
            u = rng.standard_normal(W.shape[1])
            self.sn_vectors.append(u / np.linalg.norm(u))

    def energy(self, x, z, frozen=False, train=False, rng=None):
        """Per-row energy in [0, 1]. Dropout runs only when ``train`` is set."""
        p = self.dropout if train else 0.0
        out = self(ad.concat(x, z), frozen=frozen, dropout=p, rng=rng, dropout_layers=(0, 1))
        return ad.sum(out, axis=-1)

    def energy_and_input_grad(self, x, z):
        """Energies and dE/dx for plain arrays, with frozen weights and no dropout.

        Gives the same numbers as differentiating ``energy(..., frozen=True)``
        but skips the graph; the Langevin chain calls it once per step.
        """
        F = self.feature_dim
        W0, W1, W2 = (W.value for W in self.weights)
        b0, b1, b2 = (b.value for b in self.biases)
        a0 = x @ W0[:F] + z @ W0[F:] + b0
        s0 = expit(a0)
        a1 = (a0 * s0) @ W1 + b1
        s1 = expit(a1)
        e = expit((a1 * s1) @ W2 + b2)[:, 0]
        g = (e * (1.0 - e))[:, None] * W2[:, 0]
        g = (g * s1 * (1.0 + a1 * (1.0 - s1))) @ W1.T
        g = (g * s0 * (1.0 + a0 * (1.0 - s0))) @ W0[:F].T
        return e, g


def energy(x, z, net, frozen=False):
    return net.energy(x, z, frozen=frozen)


def power_iteration(W, u, iterations):
    """Estimate the top singular value of ``W`` (in x out) starting from ``u`` (out,).

    Returns ``(sigma, u)`` with ``u`` the refined right singular vector.
    """
    v = None
    for _ in range(iterations):
        v = W @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0, u
        v /= nv
        u = W.T @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0, u
        u /= nu
    if v is None:
        v = W @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0, u
        v /= nv
    return float(v @ W @ u), u


def spectral_norm_estimates(net):
    """Current power-iteration estimate for each weight, without updating state."""
    return [power_iteration(W.value, u.copy(), 1)[0] for W, u in zip(net.weights, net.sn_vectors)]


def spectral_normalize(net, iterations=1):
    """Divide every weight of ``net`` by its estimated spectral norm, in place."""
    if iterations < 1:
        raise ValueError("spectral_normalize needs at least one iteration")
    for k, W in enumerate(net.weights):
        sigma, u = power_iteration(W.value, net.sn_vectors[k], iterations)
        net.sn_vectors[k] = u
        if sigma > 0.0:
            W.value = W.value / sigma
    return net
