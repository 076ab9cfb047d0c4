"""
Learning a sparsity mask with C-ES on two moons
===============================================

The weights are trained with SGD on masked copies of the network while an
ES update moves the mask logits towards masks with lower loss. We compare
against a fixed mask distribution (FixMask, ES learning rate 0), gradual
magnitude pruning, and the dense network.
"""

from hybrid_es.mask_dist import SparsitySchedule
from hybrid_es.nn import MLP, FlatModel, PruneConfig, TrainConfig, make_mask_dists
from hybrid_es.runners import train_ces, train_prune
from hybrid_es.samplers import SamplerStrategy
from hybrid_es.tasks import two_moons

data = two_moons(2000, noise=0.15, seed=0)
arch = MLP((2, 16, 16, 2))
cfg = TrainConfig(lr=0.1, batch_size=32, steps=1500, generation_size=9)
schedule = SparsitySchedule(0.5, 0.8, hold_steps=200, ramp_end_step=1000)

dense = train_prune(FlatModel.create(arch, 0), cfg, PruneConfig(SparsitySchedule.constant(0.0)), data)
print("dense SGD          test acc", dense.final["test_acc"])

pruned = train_prune(FlatModel.create(arch, 0), cfg, PruneConfig(SparsitySchedule(0.0, 0.8, 200, 1000)), data)
print("magnitude pruning  test acc", pruned.final["test_acc"], "sparsity", pruned.final["sparsity"])

for name, eta in (("C-ES", 0.1), ("FixMask", 0.0)):
    md = make_mask_dists(arch, eta_logits=eta, init_std=1e-3, seed=0)
    res = train_ces(FlatModel.create(arch, 0), md, cfg, data, schedule, strategy=SamplerStrategy.top_n(5))
    print(f"{name:<18} test acc {res.final['test_acc']}  sparsity {res.final['sparsity']:.2f}")
