"""Energy and accuracy as a function of the number of Langevin steps.

Trains a short model (M = 300 by default) and sweeps the chain length under
three latent-code choices: none (zero code), prior (code inferred from the
sample) and oracle (code from the true class centroid).

Run:  python3 demos/04_step_sweep.py [M]
"""

import sys

import numpy as np

from energyadapt.config import BENCHMARK_STEP_SIZE
from energyadapt.data import BenchmarkSpec, make_benchmark
from energyadapt.inference import step_sweep
from energyadapt.sgld import SgldConfig
from energyadapt.trainer import ModelBundle, ModelConfig, TrainConfig, train

M = int(sys.argv[1]) if len(sys.argv) > 1 else 300
bench = make_benchmark(BenchmarkSpec(), 0)
sgld = SgldConfig(step_size=BENCHMARK_STEP_SIZE)
bundle = ModelBundle(ModelConfig(), len(bench.sources), seed=0)
train(bundle, bench.sources, TrainConfig(iterations=M, seed=0, sgld=sgld))

x = np.concatenate([d.features for d in bench.targets])[::4]
y = np.concatenate([d.labels for d in bench.targets])[::4]
rows = step_sweep(x, y, bundle, [0, 5, 10, 20, 50, 100], ("none", "prior", "oracle"), sgld, num_chains=3)

print(f"{'mode':>7} {'steps':>5} {'energy':>8} {'accuracy':>8}")
for r in rows:
    print(f"{r['mode']:>7} {r['steps']:>5} {r['mean_energy']:8.4f} {r['accuracy']:8.4f}")
