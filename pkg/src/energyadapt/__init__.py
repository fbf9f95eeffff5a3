"""Test-time sample adaptation with per-domain energy-based models.

Submodules are imported on first attribute access so that the command-line
entry point can cap BLAS threads before numpy is loaded.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "Tensor": "autodiff",
    "BenchmarkSpec": "data",
    "make_benchmark": "data",
    "load_feature_csv": "data",
    "save_feature_csv": "data",
    "SgldConfig": "sgld",
    "adapt": "sgld",
    "ReplayBuffer": "sgld",
    "LossWeights": "objective",
    "loss_no_latent": "objective",
    "loss_with_latent": "objective",
    "ModelConfig": "trainer",
    "TrainConfig": "trainer",
    "ModelBundle": "trainer",
    "train": "trainer",
    "LatentMode": "inference",
    "predict": "inference",
    "domain_energy": "inference",
    "predict_sample": "inference",
    "step_sweep": "inference",
    "aggregate": "inference",
    "RunConfig": "config",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(importlib.import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
