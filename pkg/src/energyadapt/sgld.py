"""Langevin dynamics in feature space and the replay buffer for chain starts."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError
from .data import DomainBatch
from .nets import EnergyNet


class ChainDiverged(FloatingPointError):
    """A Langevin chain produced a non-finite energy gradient."""


@dataclass
class SgldConfig:
    step_size: float = 50.0
    num_steps: int = 20
    noise_std: float = 0.001
    grad_clip: float = 0.01
    record_trace: bool = False

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")
        if self.num_steps < 0:
            raise ValueError("num_steps must be non-negative")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def _energy_fn(energy):
    if isinstance(energy, EnergyNet):
        return lambda x, z: energy.energy(x, z, frozen=True)
    return energy


def energy_and_grad(x, z, energy):
    """Per-row energies and their gradient with respect to ``x``.

    ``energy`` is an ``EnergyNet`` (weights are frozen) or any callable
    ``(x_tensor, z) -> per-row Tensor``. Rows are independent, so the
    gradient of the summed energy is the per-row gradient.
    """
    if isinstance(energy, EnergyNet):
        return energy.energy_and_input_grad(np.asarray(x, dtype=np.float64), np.asarray(z, dtype=np.float64))
    fn = _energy_fn(energy)
    xt = ad.Tensor(x, requires_grad=True)
    e = fn(xt, ad.constant(z) if z is not None else None)
    ad.backward(ad.sum(e))
    g = xt.grad if xt.grad is not None else np.zeros_like(xt.value)
    return e.value, g


def langevin_step(x, z, energy, cfg, noise):
    """One update ``x - step/2 * clip(dE/dx) + noise_std * noise``; z and weights untouched."""
    x = np.asarray(x, dtype=np.float64)
    _, g = energy_and_grad(x, z, energy)
    if not np.all(np.isfinite(g)):
        raise ChainDiverged("non-finite energy gradient during Langevin step")
    g = np.clip(g, -cfg.grad_clip, cfg.grad_clip)
    return x - 0.5 * cfg.step_size * g + cfg.noise_std * np.asarray(noise)


@dataclass
class AdaptationTrace:
    features: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    probs: list = field(default_factory=list)

    def __len__(self):
        return len(self.features)

    def record(self, x, e, p=None):
        self.features.append(np.array(x, copy=True))
        self.energies.append(np.array(e, copy=True))
        if p is not None:
            self.probs.append(np.array(p, copy=True))

    def to_csv(self, path, row=0, max_features=None):
        """Write one chain (``row`` of a batched trace) as step, energy, f*, p*."""
        feats = [np.atleast_2d(f)[row] for f in self.features]
        d = feats[0].size if max_features is None else min(max_features, feats[0].size)
        n_cls = np.atleast_2d(self.probs[0]).shape[-1] if self.probs else 0
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "energy", *[f"f{k}" for k in range(d)], *[f"p{c}" for c in range(n_cls)]])
            for k, f in enumerate(feats):
                e = np.atleast_1d(self.energies[k])[row]
                p = np.atleast_2d(self.probs[k])[row] if self.probs else []
                w.writerow([k, repr(float(e)), *[repr(float(v)) for v in f[:d]], *[repr(float(v)) for v in p]])


def adapt(x0, z, energy, cfg, rng=None, noise=None, classifier=None):
    """Run ``cfg.num_steps`` Langevin steps from ``x0`` with ``z`` held fixed.

    Noise comes from ``noise`` (shape ``(num_steps, *x0.shape)``) when given,
    otherwise from ``rng``. ``classifier(x) -> probs`` adds class
    probabilities to the trace.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(x)):
        raise ValueError("adapt: initial features must be finite")
    trace = AdaptationTrace() if cfg.record_trace else None
    for k in range(cfg.num_steps + 1):
        if trace is not None:
            e, _ = energy_and_grad(x, z, energy)
            trace.record(x, e, classifier(x) if classifier is not None else None)
        if k == cfg.num_steps:
            break
        eps = noise[k] if noise is not None else rng.standard_normal(x.shape)
        x = langevin_step(x, z, energy, cfg, eps)
    return x, trace


def quadratic_energy(x, z=None):
    """Test energy 0.5 * ||x||^2 per row."""
    return ad.mul(0.5, ad.sum(ad.square(x), axis=-1))


class ReplayBuffer:
    """Bounded FIFO of adapted features with their labels and origin domains."""

    def __init__(self, capacity, feature_dim, sample_probability=0.5):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if not 0.0 <= sample_probability <= 1.0:
            raise ValueError("sample_probability must lie in [0, 1]")
        self.capacity = int(capacity)
        self.feature_dim = int(feature_dim)
        self.sample_probability = float(sample_probability)
        self.features = np.zeros((0, feature_dim))
        self.labels = np.zeros(0, dtype=np.int64)
        self.domains = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def entries(self):
        return DomainBatch(self.features.copy(), self.labels.copy(), self.domains.copy())


def buffer_push(adapted, buffer):
    feats = np.asarray(adapted.features, dtype=np.float64)
    if len(adapted) == 0:
        return
    if feats.ndim != 2 or feats.shape[1] != buffer.feature_dim:
        raise ShapeError(f"buffer_push: features {feats.shape} do not match dim {buffer.feature_dim}")
    cap = buffer.capacity
    buffer.features = np.concatenate([buffer.features, feats])[-cap:]
    buffer.labels = np.concatenate([buffer.labels, adapted.labels])[-cap:]
    buffer.domains = np.concatenate([buffer.domains, adapted.domains])[-cap:]


def buffer_init(batch, buffer, rng):
    """Replace each row of ``batch`` by a random buffer entry with the buffer's probability.

    Returns ``(mixed_batch, from_buffer)`` where ``from_buffer`` marks the
    replaced rows.
    """
    n = len(batch)
    mask = np.zeros(n, dtype=bool)
    if len(buffer) == 0 or buffer.sample_probability == 0.0 or n == 0:
        return batch, mask
    mask = rng.random(n) < buffer.sample_probability
    pick = rng.integers(len(buffer), size=n)
    feats = np.array(batch.features, dtype=np.float64, copy=True)
    labels = batch.labels.copy()
    domains = batch.domains.copy()
    feats[mask] = buffer.features[pick[mask]]
    labels[mask] = buffer.labels[pick[mask]]
    domains[mask] = buffer.domains[pick[mask]]
    return DomainBatch(feats, labels, domains), mask
