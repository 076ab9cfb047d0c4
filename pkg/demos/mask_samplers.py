"""
Sampling sparsity masks from a categorical distribution
=======================================================

A mask keeps k of d indices. Drawing k times with replacement (WR) loses
indices to duplicates; WR+u tops the set up with uniform indices; WoRb draws
in rounds without replacement; TopN draws M*k times and keeps the k most
frequent indices.
"""

import time

import numpy as np

from hybrid_es import SamplerStrategy, build_cdf, sample_mask

d, k = 1000, 500
uniform = build_cdf(np.full(d, 1 / d))
peaked = build_cdf(np.random.default_rng(0).dirichlet(np.full(d, 0.1)))

# expected distinct indices for WR on the uniform distribution
print("closed form WR cardinality:", d * (1 - (1 - 1 / d) ** k))

for label in ("wr", "wr+u", "worb:1", "worb:8", "tn:5"):
    strategy = SamplerStrategy.parse(label)
    for name, dist in (("uniform", uniform), ("peaked", peaked)):
        t = time.perf_counter()
        sizes = [len(sample_mask(dist, k, strategy, seed)) for seed in range(50)]
        ms = (time.perf_counter() - t) / 50 * 1e3
        print(f"{label:>7} {name:>8}: mean |mask| {np.mean(sizes):6.1f}  {ms:6.2f} ms/mask")
