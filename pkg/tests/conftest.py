import numpy as np
import pytest

from energyadapt import autodiff as ad

H = 1e-5


def numeric_grad(root, leaf, h=H):
    """Central differences of the scalar ``root`` with respect to ``leaf``.

    The leaf's value is rebound to perturbed copies and the graph is re-run.
    Nodes made by ``stop_grad`` keep the array they captured, so frozen
    copies of a parameter do not move with it.
    """
    graph = ad.Graph(root)
    base = leaf.value
    out = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        vals = []
        for sign in (1.0, -1.0):
            v = base.copy()
            v[idx] += sign * h
            leaf.value = v
            vals.append(float(graph.forward().value))
        out[idx] = (vals[0] - vals[1]) / (2 * h)
    leaf.value = base
    graph.forward()
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def analytic_grads(root, leaves):
    ad.backward(root)
    return [np.zeros_like(l.value) if l.grad is None else l.grad.copy() for l in leaves]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance summary: each criterion test attaches an "acceptance" user property.
def pytest_terminal_summary(terminalreporter):
    lines = {}
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            for name, value in getattr(rep, "user_properties", ()):
                if name == "acceptance":
                    lines[value[0]] = value[1]
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])


def tiny_setup(seed=0, num_sources=3, iterations=3, **train_kw):
    """Small benchmark plus a bundle trained for a few iterations."""
    from energyadapt.data import BenchmarkSpec, make_benchmark
    from energyadapt.sgld import SgldConfig
    from energyadapt.trainer import ModelBundle, ModelConfig, TrainConfig, train

    angles = (15.0, 30.0, 45.0, 60.0, 75.0)[:num_sources]
    bench = make_benchmark(BenchmarkSpec(dim=4, per_class=12, source_angles=angles), seed)
    mcfg = ModelConfig(input_dim=4, feature_dim=4, trunk_hidden=(8,))
    cfg = TrainConfig(iterations=iterations, batch_size=8, seed=seed,
                      sgld=SgldConfig(step_size=2.0, num_steps=3), **train_kw)
    bundle = ModelBundle(mcfg, num_sources, seed=seed, buffer_capacity=20)
    history = train(bundle, bench.sources, cfg)
    return bench, bundle, cfg, history
