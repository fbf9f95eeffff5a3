"""Train per-domain models on the rotated benchmark, then adapt target samples.

A short run (M = 300 by default) keeps this to about a minute. Pass a
larger M as the first argument for numbers comparable to the test suite,
which uses M = 2000.

Run:  python3 demos/03_train_and_adapt.py [M]
"""

import sys
import time

import numpy as np

from energyadapt.config import BENCHMARK_STEP_SIZE
from energyadapt.data import BenchmarkSpec, make_benchmark
from energyadapt.inference import domain_energy, predict
from energyadapt.sgld import SgldConfig
from energyadapt.trainer import ModelBundle, ModelConfig, TrainConfig, train

M = int(sys.argv[1]) if len(sys.argv) > 1 else 300
seed = 0
bench = make_benchmark(BenchmarkSpec(), seed)
print("source angles:", [d.angle for d in bench.sources], " target angles:", [d.angle for d in bench.targets])

sgld = SgldConfig(step_size=BENCHMARK_STEP_SIZE, num_steps=20)
bundle = ModelBundle(ModelConfig(), len(bench.sources), seed=seed)
t0 = time.time()
history = train(bundle, bench.sources, TrainConfig(iterations=M, seed=seed, sgld=sgld))
print(f"trained {M} iterations x {bundle.num_domains} domains in {time.time() - t0:.0f}s")
last = history[-bundle.num_domains:]
print("last-round losses:", {k: round(float(np.mean([r[k] for r in last])), 4)
                             for k in ("classification", "kl", "pos_energy", "neg_energy")})

# each energy net should prefer its own domain
print("\nenergy of held-out features (rows: energy net, cols: data domain)")
for i in range(bundle.num_domains):
    row = [domain_energy(bundle, i, d.features).mean() for d in bench.held_out]
    print(f"  E_{i}: " + " ".join(f"{v:.3f}" for v in row))

x = np.concatenate([d.features for d in bench.targets])
y = np.concatenate([d.labels for d in bench.targets])
preds = predict(bundle, x, sgld, num_chains=5, mode="prior", seed=seed, labels=y)
print(f"\ntarget accuracy before adaptation {preds.accuracy(False):.4f}, after {preds.accuracy(True):.4f}")
print("per-source after:", np.round(preds.per_source_accuracy(True), 4))
print(f"mean energy before {preds.energy_pre.mean():.4f}, after {preds.energy_post.mean():.4f}")
