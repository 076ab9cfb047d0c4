"""
SNES training of an MNIST classifier
====================================

A 784-32-10 MLP with batch norm (about 25k parameters) trained purely by
SNES with semi-updates and a per-worker fixed batch (WFixB). Set MNIST_DIR to
the directory holding the four IDX files.
"""

import os

import numpy as np

from hybrid_es import ExecPlan, GaussianSearchDist
from hybrid_es.nn import MLP, supervised_fitness
from hybrid_es.runners import snes_supervised_evaluator, train_snes
from hybrid_es.tasks import load_mnist

data = load_mnist(os.environ.get("MNIST_DIR", "/root/data/mnist")).subset(10_000, None, seed=0)
arch = MLP((784, 32, 10), use_batch_norm=True)

# the search starts from the usual truncated-normal initialisation with sigma 0.1
dist = GaussianSearchDist.create(arch.init_params(np.random.default_rng(0)), sigma=0.1)
plan = ExecPlan("semi", workers=4, generation_size=400, master_seed=0, batch_regime="wfixb")

res = train_snes(dist, supervised_fitness(arch, data, 256), plan, generations=100,
                 evaluate_mean=snes_supervised_evaluator(arch, data), eval_every=25,
                 on_record=lambda r: "test_acc" in r and print(r["step"], round(r["test_acc"], 4)))
print("final test accuracy", res.final["test_acc"])
