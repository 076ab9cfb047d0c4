"""Training loops shared by the command line, the demos and the acceptance suite.

Each loop reports one record per step (or generation) through ``on_record``
and returns its final state plus the last evaluation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .executor import ExecPlan, derive_seed, run_generation
from .mask_dist import SparsitySchedule, retained_count
from .nn import (
    FlatModel,
    PruneConfig,
    TrainConfig,
    ces_train_step,
    evaluate,
    prune_train_step,
    snes_test_accuracy,
    test_time_full_mask,
)
from .samplers import SamplerStrategy
from .search_dist import GaussianSearchDist, ShapingConfig
from .tasks import BatchSpec, Dataset, make_batch

_DATA_TAG = 1  # same key as the executor's WFixB worker-0 seed, so paired runs share batches


@dataclass
class RunResult:
    final: dict
    history: list = field(default_factory=list)
    state: dict = field(default_factory=dict)


def _emit(on_record, history, rec):
    history.append(rec)
    if on_record is not None:
        on_record(rec)


def _due(step, total, every):
    return step == total - 1 or (every and step % every == 0)


def train_snes(dist: GaussianSearchDist, fitness_fn, plan: ExecPlan, generations: int, *,
               shaping=ShapingConfig(), pool=None, evaluate_mean=None, eval_every=0,
               on_record=None) -> RunResult:
    """SNES for ``generations`` generations; ``evaluate_mean(mean) -> dict`` is called periodically."""
    history = []
    extra = {}
    for g in range(generations):
        dist, m = run_generation(dist, fitness_fn, plan, shaping, pool)
        rec = {"step": g, **m.record(), "batch_regime": plan.batch_regime.value,
               "sigma_median": float(np.median(dist.sigma))}
        if evaluate_mean is not None and _due(g, generations, eval_every):
            extra = evaluate_mean(dist.mean)
            rec.update(extra)
        _emit(on_record, history, rec)
    final = {"generations": generations, "mean_fitness": float(fitness_fn(dist.mean, 0)), **extra}
    if history:
        final["fitness_mean"] = history[-1]["fitness_mean"]
    return RunResult(final, history, {"dist": dist})


def snes_supervised_evaluator(arch, dataset: Dataset):
    def evaluate_mean(mean):
        return {"test_acc": snes_test_accuracy(arch, mean, dataset)}
    return evaluate_mean


def _test_metrics(model, mask, dataset):
    loss, acc = evaluate(model, mask, *dataset.test)
    return {"test_loss": loss, "test_acc": acc}


def train_ces(model: FlatModel, md, cfg: TrainConfig, dataset: Dataset, schedule: SparsitySchedule, *,
              strategy: SamplerStrategy = SamplerStrategy.top_n(5), master_seed: int = 0, pool=None,
              eval_every: int = 0, on_record=None, start_step: int = 0) -> RunResult:
    """Hybrid ES/SGD training for ``cfg.steps`` steps, evaluated under the test-time mask."""
    history, last_eval = [], {}
    for step in range(start_step, cfg.steps):
        t = time.perf_counter()
        model, md, m = ces_train_step(model, md, cfg, step, dataset=dataset, schedule=schedule,
                                      strategy=strategy, master_seed=master_seed, pool=pool)
        rec = {"step": step, "wall_time_s": time.perf_counter() - t, **m.record(),
               "n": cfg.generation_size, "sampler": strategy.label()}
        if _due(step, cfg.steps, eval_every):
            last_eval = _test_metrics(model, test_time_full_mask(model, md, schedule, step), dataset)
            rec.update(last_eval)
        _emit(on_record, history, rec)
    final = {"steps": cfg.steps, **last_eval}
    if history:
        final["sparsity"] = history[-1]["sparsity"]
    return RunResult(final, history, {"model": model, "mask_dist": md})


def train_prune(model: FlatModel, cfg: TrainConfig, prune: PruneConfig, dataset: Dataset, *,
                master_seed: int = 0, eval_every: int = 0, on_record=None,
                start_step: int = 0, mask=None) -> RunResult:
    """Gradual magnitude pruning; with sparsity fixed at 0 this is plain dense SGD."""
    history, last_eval = [], {}
    n_maskable = model.arch.maskable_indices.size
    for step in range(start_step, cfg.steps):
        t = time.perf_counter()
        batch = make_batch(dataset, BatchSpec(cfg.batch_size, derive_seed(master_seed, _DATA_TAG, step, 0)))
        model, mask = prune_train_step(model, cfg, prune, step, batch, mask)
        retained = int(mask[model.arch.maskable_indices].sum())
        rec = {"step": step, "wall_time_s": time.perf_counter() - t, "retained": retained,
               "sparsity": 1.0 - retained / n_maskable,
               "target_retained": retained_count(prune.schedule, step, n_maskable)}
        if _due(step, cfg.steps, eval_every):
            last_eval = _test_metrics(model, mask, dataset)
            rec.update(last_eval)
        _emit(on_record, history, rec)
    final = {"steps": cfg.steps, **last_eval}
    if history:
        final["sparsity"] = history[-1]["sparsity"]
    return RunResult(final, history, {"model": model, "mask": mask})
