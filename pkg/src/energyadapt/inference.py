"""Test-time sample adaptation and ensemble prediction.

Each test sample is moved by Langevin dynamics under every source domain's
energy net, with a latent code drawn once per chain from the unadapted
sample, and then classified by that domain's classifier. Model parameters
are only read.

Randomness is drawn from a generator seeded by ``(seed, sample_id, domain,
chain)``, so a sample's record does not depend on which other samples are
evaluated alongside it or in which order. Because each chain's noise is one
sequential draw, the first ``k`` steps of a long chain equal a ``k``-step
chain; the step sweep relies on this.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .nets import reparam_sample
from .sgld import SgldConfig, energy_and_grad, langevin_step


class LatentMode(str, Enum):
    NONE = "none"
    PRIOR = "prior"
    ORACLE = "oracle"


AGGREGATIONS = ("ensemble", "closest_cosine", "weighted_cosine", "most_confident")


class NotTrained(RuntimeError):
    pass


@dataclass
class PredictionRecord:
    pre: np.ndarray          # (S, C) per-source probabilities before adaptation
    post: np.ndarray         # (S, C) after adaptation
    ensemble: np.ndarray     # (C,)
    label: int
    true_label: int | None = None
    traces: list = field(default_factory=list)


@dataclass
class Predictions:
    """Batched predictions. Shapes: pre/post (n, S, C), energies (n, S)."""

    pre: np.ndarray
    post: np.ndarray
    energy_pre: np.ndarray
    energy_post: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    sample_ids: np.ndarray | None = None

    def __len__(self):
        return self.pre.shape[0]

    def ensemble(self, adapted=True):
        return (self.post if adapted else self.pre).mean(axis=1)

    def record(self, k):
        ens = self.post[k].mean(axis=0)
        lab = None if self.labels is None else int(self.labels[k])
        return PredictionRecord(self.pre[k], self.post[k], ens, int(np.argmax(ens)), lab)

    def accuracy(self, adapted=True, aggregation="ensemble", centroids=None):
        probs = aggregate(self.post if adapted else self.pre, aggregation, self.features, centroids)
        return float(np.mean(np.argmax(probs, axis=-1) == self.labels))

    def per_source_accuracy(self, adapted=True):
        probs = self.post if adapted else self.pre
        return (np.argmax(probs, axis=-1) == self.labels[:, None]).mean(axis=0)


def _chain_rng(seed, sample_id, domain, chain):
    return np.random.default_rng([int(seed), 3, int(sample_id), int(domain), int(chain)])


def _draw_noise(seed, sample_ids, domain, chain, dim, num_steps):
    """Per-sample noise: one latent draw followed by ``num_steps`` chain draws."""
    z = np.empty((len(sample_ids), dim))
    steps = np.empty((num_steps, len(sample_ids), dim))
    for r, sid in enumerate(sample_ids):
        g = _chain_rng(seed, sid, domain, chain)
        z[r] = g.standard_normal(dim)
        steps[:, r] = g.standard_normal((num_steps, dim))
    return z, steps


def _latent_codes(dm, x, mode, eps, class_centers=None, labels=None):
    if mode == LatentMode.NONE:
        return np.zeros_like(x)
    if mode == LatentMode.PRIOR:
        g = dm.prior(ad.constant(x), frozen=True)
    else:
        if labels is None:
            raise ValueError("oracle latent mode needs true labels")
        g = dm.posterior(ad.constant(class_centers[labels]), frozen=True)
    return reparam_sample(g, eps).value


def _probs(dm, x, z):
    return ad.softmax(dm.classifier.logits(ad.constant(x), ad.constant(z), frozen=True)).value


def domain_energy(bundle, i, inputs, mode=LatentMode.PRIOR, labels=None):
    """Energy of unadapted inputs under domain ``i``, with the latent code at its mean."""
    x = bundle.features(inputs)
    dm = bundle.domains[i]
    centers = bundle.class_centroids[i] if bundle.class_centroids is not None else None
    z = _latent_codes(dm, x, LatentMode(mode), np.zeros_like(x), centers, labels)
    return energy_and_grad(x, z, dm.energy)[0]


def _check_bundle(bundle, mode):
    if bundle.iteration == 0:
        raise NotTrained("bundle has not been trained")
    if mode == LatentMode.ORACLE and bundle.class_centroids is None:
        raise NotTrained("oracle mode needs class centroids stored in the bundle")


def run_chains(bundle, inputs, cfg, num_chains, mode, seed, labels=None, sample_ids=None,
               checkpoints=None, record_trace=False):
    """Adapt every sample under every source model.

    Returns a dict mapping each step count in ``checkpoints`` (default:
    ``{0, cfg.num_steps}``) to ``(probs, energies)`` averaged over chains,
    with shapes (n, S, C) and (n, S). With ``record_trace`` the per-step
    features/energies/probs of chain 0 are also returned under ``"trace"``.
    """
    mode = LatentMode(mode)
    _check_bundle(bundle, mode)
    if num_chains < 1:
        raise ValueError("need at least one chain per source domain")
    inputs = np.asarray(inputs, dtype=np.float64)
    x0 = bundle.features(inputs)
    n, S, C = len(x0), bundle.num_domains, bundle.num_classes
    if sample_ids is None:
        sample_ids = np.arange(n)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
    K = cfg.num_steps
    checkpoints = sorted(set(checkpoints if checkpoints is not None else (0, K)))
    if checkpoints[-1] > K:
        raise ValueError("checkpoint beyond the chain length")
    out = {k: (np.zeros((n, S, C)), np.zeros((n, S))) for k in checkpoints}
    trace = {"features": np.zeros((K + 1, n, S, x0.shape[1])), "energy": np.zeros((K + 1, n, S)),
             "probs": np.zeros((K + 1, n, S, C))} if record_trace else None
    for i, dm in enumerate(bundle.domains):
        centers = bundle.class_centroids[i] if bundle.class_centroids is not None else None
        for c in range(num_chains):
            eps_z, eps_steps = _draw_noise(seed, sample_ids, i, c, x0.shape[1], K)
            z = _latent_codes(dm, x0, mode, eps_z, centers, labels)
            x = x0.copy()
            for k in range(K + 1):
                want = k in out
                if want or (trace is not None and c == 0):
                    e, _ = energy_and_grad(x, z, dm.energy)
                    p = _probs(dm, x, z)
                    if want:
                        out[k][0][:, i] += p / num_chains
                        out[k][1][:, i] += e / num_chains
                    if trace is not None and c == 0:
                        trace["features"][k, :, i] = x
                        trace["energy"][k, :, i] = e
                        trace["probs"][k, :, i] = p
                if k < K:
                    x = langevin_step(x, z, dm.energy, cfg, eps_steps[k])
    if trace is not None:
        out["trace"] = trace
    out["features"] = x0
    return out


def predict(bundle, inputs, cfg, num_chains=5, mode=LatentMode.PRIOR, seed=0, labels=None, sample_ids=None):
    """Batched version of ``predict_sample``."""
    res = run_chains(bundle, inputs, cfg, num_chains, mode, seed, labels, sample_ids)
    K = cfg.num_steps
    return Predictions(res[0][0], res[K][0], res[0][1], res[K][1], res["features"],
                       None if labels is None else np.asarray(labels), sample_ids)


def predict_sample(raw_input, bundle, cfg, num_chains=5, mode=LatentMode.PRIOR, seed=0,
                   sample_id=0, label=None, record_trace=False):
    """Adapt one sample to every source domain and return its ``PredictionRecord``."""
    inputs = np.asarray(raw_input, dtype=np.float64).reshape(1, -1)
    labels = None if label is None else np.array([label])
    res = run_chains(bundle, inputs, cfg, num_chains, mode, seed, labels, np.array([sample_id]),
                     record_trace=record_trace)
    K = cfg.num_steps
    pre, post = res[0][0][0], res[K][0][0]
    ens = post.mean(axis=0)
    rec = PredictionRecord(pre, post, ens, int(np.argmax(ens)), label)
    if record_trace:
        rec.traces = [{k: v[:, 0, i] for k, v in res["trace"].items()} for i in range(bundle.num_domains)]
    return rec


def _cosine(x, c):
    xn = x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)
    cn = c / np.maximum(np.linalg.norm(c, axis=-1, keepdims=True), 1e-12)
    return xn @ cn.T


def aggregate(per_source, mode="ensemble", features=None, centroids=None, temperature=1.0):
    """Combine per-source probabilities, shape (S, C) or (n, S, C)."""
    probs = np.asarray(per_source, dtype=np.float64)
    single = probs.ndim == 2
    if single:
        probs = probs[None]
    n, S, _ = probs.shape
    if mode == "ensemble":
        out = probs.mean(axis=1)
    elif mode == "most_confident":
        best = probs.max(axis=-1).argmax(axis=1)
        out = probs[np.arange(n), best]
    elif mode in ("closest_cosine", "weighted_cosine"):
        if centroids is None or features is None:
            raise ValueError(f"{mode} aggregation needs features and per-domain centroids")
        sims = _cosine(np.atleast_2d(features), np.asarray(centroids))
        if mode == "closest_cosine":
            out = probs[np.arange(n), sims.argmax(axis=1)]
        else:
            w = np.exp((sims - sims.max(axis=1, keepdims=True)) / temperature)
            w /= w.sum(axis=1, keepdims=True)
            out = np.einsum("ns,nsc->nc", w, probs)
    else:
        raise ValueError(f"unknown aggregation {mode!r}")
    return out[0] if single else out


def step_sweep(inputs, labels, bundle, steps, modes=(LatentMode.PRIOR,), cfg=None, num_chains=5, seed=0,
               sample_ids=None):
    """Mean energy and ensemble accuracy after each step count, per latent mode.

    Runs one chain per (sample, domain, draw) up to ``max(steps)`` and reads
    off intermediate states; row order is modes outer, steps inner.
    """
    cfg = cfg or SgldConfig()
    steps = [int(s) for s in steps]
    long_cfg = SgldConfig(cfg.step_size, max(steps), cfg.noise_std, cfg.grad_clip)
    labels = np.asarray(labels)
    rows = []
    for mode in modes:
        mode = LatentMode(mode)
        res = run_chains(bundle, inputs, long_cfg, num_chains, mode, seed, labels, sample_ids, checkpoints=steps)
        for s in steps:
            probs, energies = res[s]
            acc = float(np.mean(probs.mean(axis=1).argmax(axis=-1) == labels))
            rows.append({"mode": mode.value, "steps": s, "mean_energy": float(energies.mean()), "accuracy": acc})
    return rows


def write_sweep_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "steps", "mean_energy", "accuracy"])
        for r in rows:
            w.writerow([r["mode"], r["steps"], repr(r["mean_energy"]), repr(r["accuracy"])])


def write_predictions_csv(path, preds, target_ids=None):
    """sample_id, true_label, per-source argmax before/after, ensemble argmax, ensemble probs."""
    n, S, C = preds.post.shape
    ens = preds.ensemble()
    sids = preds.sample_ids if preds.sample_ids is not None else np.arange(n)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["sample_id", "true_label"]
        header += [f"pre_src{i}" for i in range(S)] + [f"post_src{i}" for i in range(S)]
        header += ["ensemble"] + [f"p{c}" for c in range(C)]
        w.writerow(header)
        for k in range(n):
            row = [int(sids[k]), "" if preds.labels is None else int(preds.labels[k])]
            row += [int(v) for v in preds.pre[k].argmax(axis=-1)]
            row += [int(v) for v in preds.post[k].argmax(axis=-1)]
            row += [int(ens[k].argmax())] + [repr(float(v)) for v in ens[k]]
            w.writerow(row)
