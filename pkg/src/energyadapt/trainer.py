"""Training loop: round-robin over source domains with Langevin negatives."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import load_arrays, save_arrays
from .data import DomainBatch
from .nets import Classifier, EnergyNet, LatentHead, make_trunk, reparam_sample, spectral_normalize
from .objective import LossWeights, loss_no_latent, loss_with_latent, negative_centers
from .sgld import ChainDiverged, ReplayBuffer, SgldConfig, adapt, buffer_init, buffer_push

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    input_dim: int = 16
    feature_dim: int = 16
    num_classes: int = 4
    trunk_hidden: tuple = (64, 64)
    trunk_output: str | None = None    # activation on the trunk output; None keeps it linear
    classifier_hidden: tuple = ()
    latent_hidden: int | None = None   # defaults to feature_dim
    energy_hidden: int | None = None   # defaults to 2 * feature_dim
    dropout: float = 0.1
    sn_init_iterations: int = 20

    def __post_init__(self):
        self.trunk_hidden = tuple(self.trunk_hidden)
        self.classifier_hidden = tuple(self.classifier_hidden)


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 64
    lr_trunk: float = 1e-4
    lr_heads: float = 1e-4
    sgld: SgldConfig = field(default_factory=SgldConfig)
    buffer_capacity: int = 500
    buffer_probability: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    use_latent: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    sn_iterations: int = 1
    checkpoint_every: int = 500

    def __post_init__(self):
        if isinstance(self.sgld, dict):
            self.sgld = SgldConfig(**self.sgld)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.lr_trunk > 0 and self.lr_heads > 0):
            raise ValueError("learning rates must be positive")

    def to_dict(self):
        return asdict(self)


class DomainModel:
    """Classifier, latent heads, energy net and replay buffer of one source domain."""

    def __init__(self, index, mcfg, rng, buffer_capacity=500, buffer_probability=0.5):
        f = mcfg.feature_dim
        lh = mcfg.latent_hidden or f
        eh = mcfg.energy_hidden or 2 * f
        p = f"d{index}"
        self.index = index
        self.classifier = Classifier(f, mcfg.num_classes, mcfg.classifier_hidden, rng, name=f"{p}.clf")
        self.prior = LatentHead(f, lh, rng, name=f"{p}.prior")
        self.posterior = LatentHead(f, lh, rng, name=f"{p}.post")
        self.energy = EnergyNet(f, eh, rng, dropout=mcfg.dropout, name=f"{p}.energy")
        spectral_normalize(self.energy, mcfg.sn_init_iterations)
        self.buffer = ReplayBuffer(buffer_capacity, f, buffer_probability)

    def phi_parameters(self):
        out = self.classifier.parameters()
        out.update(self.prior.parameters())
        out.update(self.posterior.parameters())
        return out

    def theta_parameters(self):
        return self.energy.parameters()


class ModelBundle:
    """Shared trunk plus one ``DomainModel`` per source domain."""

    def __init__(self, mcfg, num_domains, seed=0, buffer_capacity=500, buffer_probability=0.5):
        rng = np.random.default_rng([seed, 7919])
        self.config = mcfg
        self.trunk = make_trunk(mcfg.input_dim, mcfg.feature_dim, mcfg.trunk_hidden, rng, mcfg.trunk_output)
        self.domains = [DomainModel(i, mcfg, rng, buffer_capacity, buffer_probability) for i in range(num_domains)]
        self.optim = Adam()
        self.iteration = 0
        self.domain_centroids = None
        self.class_centroids = None
        self.source_ids = list(range(num_domains))

    @property
    def num_domains(self):
        return len(self.domains)

    @property
    def num_classes(self):
        return self.config.num_classes

    @property
    def feature_dim(self):
        return self.config.feature_dim

    def parameters(self):
        out = dict(self.trunk.parameters())
        for dm in self.domains:
            out.update(dm.phi_parameters())
            out.update(dm.theta_parameters())
        return out

    def features(self, inputs):
        """Trunk features as a plain array (no graph)."""
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.shape[-1] != self.config.input_dim:
            raise ValueError(f"input dim {inputs.shape[-1]} does not match model input dim {self.config.input_dim}")
        return self.trunk(inputs, frozen=True).value

    def checksum(self):
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.parameters()):
            h.update(name.encode())
            h.update(self.parameters()[name].value.tobytes())
        for dm in self.domains:
            for u in dm.energy.sn_vectors:
                h.update(u.tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------------
    def state_arrays(self):
        arrays = {f"param/{k}": v.value for k, v in self.parameters().items()}
        for dm in self.domains:
            for k, u in enumerate(dm.energy.sn_vectors):
                arrays[f"sn/d{dm.index}/{k}"] = u
            arrays[f"buffer/d{dm.index}/features"] = dm.buffer.features
            arrays[f"buffer/d{dm.index}/labels"] = dm.buffer.labels
            arrays[f"buffer/d{dm.index}/domains"] = dm.buffer.domains
        for name, st in self.optim.state.items():
            arrays[f"adam/m/{name}"] = st[0]
            arrays[f"adam/v/{name}"] = st[1]
        if self.domain_centroids is not None:
            arrays["centroids/domain"] = self.domain_centroids
            arrays["centroids/class"] = self.class_centroids
        return arrays

    def save(self, path, extra_meta=None):
        meta = {
            "model": asdict(self.config),
            "num_domains": self.num_domains,
            "iteration": self.iteration,
            "adam_steps": self.optim.steps,
            "source_ids": self.source_ids,
            "buffer": {"capacity": self.domains[0].buffer.capacity if self.domains else 0,
                       "probability": self.domains[0].buffer.sample_probability if self.domains else 0.0},
        }
        if extra_meta:
            meta.update(extra_meta)
        save_arrays(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_arrays(path)
        mcfg = ModelConfig(**meta["model"])
        b = cls(mcfg, meta["num_domains"], buffer_capacity=meta["buffer"]["capacity"] or 1,
                buffer_probability=meta["buffer"]["probability"])
        for k, p in b.parameters().items():
            p.value = arrays[f"param/{k}"]
        for dm in b.domains:
            dm.energy.sn_vectors = [arrays[f"sn/d{dm.index}/{k}"] for k in range(len(dm.energy.weights))]
            dm.buffer.features = arrays[f"buffer/d{dm.index}/features"].reshape(-1, mcfg.feature_dim)
            dm.buffer.labels = arrays[f"buffer/d{dm.index}/labels"]
            dm.buffer.domains = arrays[f"buffer/d{dm.index}/domains"]
        for key, v in arrays.items():
            if key.startswith("adam/m/"):
                name = key[len("adam/m/"):]
                b.optim.state[name] = [v, arrays[f"adam/v/{name}"]]
        b.optim.steps = {k: int(v) for k, v in meta.get("adam_steps", {}).items()}
        b.iteration = meta["iteration"]
        b.source_ids = meta.get("source_ids", list(range(b.num_domains)))
        if "centroids/domain" in arrays:
            b.domain_centroids = arrays["centroids/domain"]
            b.class_centroids = arrays["centroids/class"]
        b.meta = meta
        return b


class Adam:
    """Adam with per-parameter state keyed by parameter name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {}
        self.steps = {}

    def update(self, params, lr):
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            if p.grad is None:
                continue
            m, v = self.state.get(name, (np.zeros_like(p.value), np.zeros_like(p.value)))
            t = self.steps.get(name, 0) + 1
            m = b1 * m + (1 - b1) * p.grad
            v = b2 * v + (1 - b2) * p.grad * p.grad
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.value = p.value - lr * mhat / (np.sqrt(vhat) + self.eps)
            self.state[name] = [m, v]
            self.steps[name] = t


def step_rng(seed, iteration, domain):
    return np.random.default_rng([int(seed), 1, int(iteration), int(domain)])


def batch_at(ds, batch_size, seed, step):
    """Batch ``step`` of an epoch-wise shuffled stream (epoch permutation derived from the seed)."""
    n = len(ds)
    per_epoch = max(1, -(-n // batch_size))
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([int(seed), 2, int(ds.domain), int(epoch)]).permutation(n)
    return DomainBatch.from_dataset(ds, perm[k * batch_size:(k + 1) * batch_size])


def _build_negatives(bundle, dm, pos_x, pos, others, cfg, rng):
    """Buffer mixing, chain codes, and the Langevin chains for one step."""
    feats_t = bundle.trunk(others.features)
    mixed, from_buf = buffer_init(DomainBatch(feats_t.value, others.labels, others.domains), dm.buffer, rng)
    keep = (~from_buf).astype(np.float64)[:, None]
    init_t = ad.add(ad.mul(feats_t, ad.constant(keep)), ad.constant(mixed.features * (1.0 - keep)))

    centers = negative_centers(mixed.labels, mixed.features, pos.labels, pos_x.value)
    if cfg.use_latent:
        q = dm.posterior(ad.constant(centers), frozen=True)
        z = reparam_sample(q, rng.standard_normal(centers.shape)).value
    else:
        z = np.zeros_like(centers)

    x_k, _ = adapt(mixed.features, z, dm.energy, cfg.sgld, rng)
    adapted_t = ad.add(init_t, ad.constant(x_k - mixed.features))
    return mixed, adapted_t, centers, z, x_k


def negative_pool(batches, i, size):
    """About ``size`` rows spread evenly over the batches of the domains other than ``i``."""
    others = [b for j, b in enumerate(batches) if j != i and len(b)]
    if not others:
        return []
    per = -(-size // len(others))
    return [DomainBatch(b.features[:per], b.labels[:per], b.domains[:per]) for b in others]


def train_step(bundle, i, batches, cfg, rng):
    """One update of the shared trunk and domain ``i``'s networks. Returns loss values.

    ``batches`` holds one batch per source domain; positives are ``batches[i]``
    and the negatives are drawn from the others (see ``negative_pool``).
    """
    dm = bundle.domains[i]
    pos = batches[i]
    others = negative_pool(batches, i, cfg.batch_size)
    pos_x = bundle.trunk(pos.features)

    if not others:
        warnings.warn("single source domain: no negatives, training the classifier only", stacklevel=2)
        if cfg.use_latent:
            loss = _classifier_only_latent(pos_x, pos, dm, rng)
        else:
            loss = ad.mean(ad.softmax_cross_entropy(dm.classifier.logits(pos_x, np.zeros(pos_x.shape)), pos.labels))
        values = {"classification": float(loss.value), "kl": 0.0, "pos_energy": 0.0,
                  "neg_energy": 0.0, "adapted": 0.0, "total": float(loss.value)}
        total = loss
    else:
        others = DomainBatch.concat(others)
        try:
            mixed, adapted_t, centers, z, x_k = _build_negatives(bundle, dm, pos_x, pos, others, cfg, rng)
        except ChainDiverged as exc:
            log.error("Langevin chain diverged at iteration %d domain %d", bundle.iteration, i)
            raise TrainingDiverged(f"chain diverged at iteration {bundle.iteration}, domain {i}") from exc
        if cfg.use_latent:
            br = loss_with_latent(pos_x, pos.labels, adapted_t, mixed.labels, centers, z, dm,
                                  rng, cfg.weights, train=True)
        else:
            br = loss_no_latent(pos_x, pos.labels, adapted_t, mixed.labels, dm, cfg.weights, rng, train=True)
        values = br.values()
        total = br.total

    if not np.isfinite(values["total"]):
        log.error("non-finite loss at iteration %d domain %d: %s", bundle.iteration, i, values)
        raise TrainingDiverged(f"non-finite loss at iteration {bundle.iteration}, domain {i}")

    ad.backward(total)
    trunk_params = bundle.trunk.parameters()
    grads = [p.grad for p in trunk_params.values()] + [p.grad for p in dm.phi_parameters().values()]
    grads += [p.grad for p in dm.theta_parameters().values()]
    if any(g is not None and not np.all(np.isfinite(g)) for g in grads):
        raise TrainingDiverged(f"non-finite gradient at iteration {bundle.iteration}, domain {i}")
    bundle.optim.update(trunk_params, cfg.lr_trunk)
    bundle.optim.update(dm.phi_parameters(), cfg.lr_heads)
    bundle.optim.update(dm.theta_parameters(), cfg.lr_heads)
    if others:
        spectral_normalize(dm.energy, cfg.sn_iterations)
        buffer_push(DomainBatch(x_k, mixed.labels, mixed.domains), dm.buffer)
    return values


def _classifier_only_latent(pos_x, pos, dm, rng):
    from .nets import kl_diag_gauss
    from .objective import center_matrix
    m, _ = center_matrix(pos.labels)
    q = dm.posterior(ad.matmul(ad.constant(m), pos_x))
    z = reparam_sample(q, rng.standard_normal(pos_x.shape))
    ce = ad.mean(ad.softmax_cross_entropy(dm.classifier.logits(pos_x, z), pos.labels))
    return ad.add(ce, ad.mean(kl_diag_gauss(q, dm.prior(pos_x))))


def compute_centroids(bundle, datasets):
    """Store per-domain feature means and per-domain class means of the training data."""
    S, C, F = bundle.num_domains, bundle.num_classes, bundle.feature_dim
    dom = np.zeros((S, F))
    cls = np.zeros((S, C, F))
    for i, ds in enumerate(datasets):
        x = bundle.features(ds.features)
        dom[i] = x.mean(axis=0)
        for c in range(C):
            rows = ds.labels == c
            cls[i, c] = x[rows].mean(axis=0) if rows.any() else dom[i]
    bundle.domain_centroids = dom
    bundle.class_centroids = cls


def train(bundle, datasets, cfg, checkpoint_path=None, on_step=None):
    """Run ``cfg.iterations`` rounds, each visiting every source domain in index order.

    Continues from ``bundle.iteration``, so a bundle loaded from a checkpoint
    resumes the same sequence of batches and random draws. Returns the list of
    per-step loss records.
    """
    if len(datasets) != bundle.num_domains:
        raise ValueError(f"{len(datasets)} datasets for {bundle.num_domains} domain models")
    if len(datasets) < 2:
        log.warning("fewer than two source domains: no negatives will be available")
    history = []
    start = bundle.iteration
    for it in range(start, start + cfg.iterations):
        batches = [batch_at(ds, cfg.batch_size, cfg.seed, it) for ds in datasets]
        for i in range(bundle.num_domains):
            rng = step_rng(cfg.seed, it, i)
            values = train_step(bundle, i, batches, cfg, rng)
            rec = {"iteration": it, "domain": i, **values}
            history.append(rec)
            if on_step is not None:
                on_step(rec)
        bundle.iteration = it + 1
        if checkpoint_path and cfg.checkpoint_every and bundle.iteration % cfg.checkpoint_every == 0:
            compute_centroids(bundle, datasets)
            bundle.save(checkpoint_path)
    if cfg.iterations > 0:
        compute_centroids(bundle, datasets)
    if checkpoint_path:
        bundle.save(checkpoint_path)
    return history
