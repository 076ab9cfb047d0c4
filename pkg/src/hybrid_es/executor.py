"""Standard, batched and semi-update execution of one SNES generation.

Workers are simulated in-process. Every message that would cross the
network is accounted for from its schema (float64 = 8 bytes, seeds and
fitness scalars 8 bytes each) so the cost of the three models can be
compared without a cluster.

Sample ``i`` of generation ``t`` always uses the noise stream
``(generation_seed(master_seed, t), i)``; a worker owning samples
``[w*n/B, (w+1)*n/B)`` regenerates exactly what the master would have drawn.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass

import numpy as np

from .search_dist import (
    GaussianSearchDist,
    ShapingConfig,
    apply_update,
    natural_gradient_from,
    sample_noise,
    shape_utilities,
)

FLOAT_BYTES = 8
SEED_BYTES = 8

_NOISE_TAG = 0
_DATA_TAG = 1
_VARB_TAG = 2


class ExecMode(str, enum.Enum):
    STANDARD = "standard"
    BATCHED = "batched"
    SEMI_UPDATES = "semi"


class BatchRegime(str, enum.Enum):
    VARB = "varb"
    FIXB = "fixb"
    WFIXB = "wfixb"


class GenerationError(RuntimeError):
    def __init__(self, worker: int, sample_index: int, cause: BaseException):
        super().__init__(f"fitness evaluation failed on worker {worker}, sample {sample_index}: {cause!r}")
        self.worker = worker
        self.sample_index = sample_index


@dataclass(frozen=True)
class ExecPlan:
    mode: ExecMode = ExecMode.STANDARD
    workers: int = 1
    generation_size: int = 100
    master_seed: int = 0
    batch_regime: BatchRegime = BatchRegime.FIXB

    def __post_init__(self):
        object.__setattr__(self, "mode", ExecMode(self.mode))
        object.__setattr__(self, "batch_regime", BatchRegime(self.batch_regime))
        if self.workers < 1:
            raise ValueError("need at least one worker")
        if self.generation_size < 1 or self.generation_size % self.workers:
            raise ValueError(
                f"workers ({self.workers}) must divide generation size ({self.generation_size})")

    @property
    def per_worker(self) -> int:
        return self.generation_size // self.workers

    def worker_slice(self, w: int) -> range:
        return range(w * self.per_worker, (w + 1) * self.per_worker)


@dataclass(frozen=True, eq=False)
class SemiUpdate:
    grad_mean: np.ndarray
    grad_sigma: np.ndarray
    sample_count: int

    def nbytes(self) -> int:
        return (self.grad_mean.size + self.grad_sigma.size) * FLOAT_BYTES


@dataclass
class GenerationMetrics:
    generation: int
    mode: str
    n: int
    workers: int
    wall_time: float = 0.0
    master_time: float = 0.0
    rng_values_master: int = 0
    rng_values_per_worker: int = 0
    bytes_master_to_workers: int = 0
    bytes_workers_to_master: int = 0
    fitness_best: float = float("nan")
    fitness_mean: float = float("nan")

    def record(self) -> dict:
        return {
            "generation": self.generation,
            "mode": self.mode,
            "n": self.n,
            "B": self.workers,
            "fitness_best": self.fitness_best,
            "fitness_mean": self.fitness_mean,
            "wall_time_s": self.wall_time,
            "master_time_s": self.master_time,
            "rng_master": self.rng_values_master,
            "rng_worker": self.rng_values_per_worker,
            "bytes_up": self.bytes_workers_to_master,
            "bytes_down": self.bytes_master_to_workers,
        }


def derive_seed(master_seed: int, *key: int) -> int:
    """Splittable 64-bit seed from ``master_seed`` and an integer key path."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def generation_seed(master_seed: int, generation: int) -> int:
    return derive_seed(master_seed, _NOISE_TAG, generation)


def assign_data_batches(plan: ExecPlan, step: int) -> np.ndarray:
    """Per-sample data seeds for ``step`` under the plan's batch regime."""
    n = plan.generation_size
    if plan.batch_regime is BatchRegime.VARB:
        seeds = [derive_seed(plan.master_seed, _VARB_TAG, step, i) for i in range(n)]
    elif plan.batch_regime is BatchRegime.FIXB:
        seeds = [derive_seed(plan.master_seed, _DATA_TAG, step, 0)] * n
    else:
        per_worker = [derive_seed(plan.master_seed, _DATA_TAG, step, w) for w in range(plan.workers)]
        seeds = np.repeat(per_worker, plan.per_worker)
    return np.asarray(seeds, dtype=np.uint64)


def _evaluate(fitness_fn, dist, gen_seed, indices, data_seeds, worker):
    """Worker body: regenerate the noise for ``indices`` and evaluate."""
    noise = np.empty((len(indices), dist.dim))
    fit = np.empty(len(indices))
    for row, i in enumerate(indices):
        z = sample_noise(dist.dim, gen_seed, i)
        noise[row] = z
        try:
            fit[row] = float(fitness_fn(dist.mean + dist.sigma * z, int(data_seeds[i])))
        except Exception as exc:
            raise GenerationError(worker, i, exc) from exc
    return noise, fit


def _map_workers(fn, workers, pool):
    # Results are always consumed in worker-id order so reductions are deterministic.
    if pool is None:
        return [fn(w) for w in range(workers)]
    return list(pool.map(fn, range(workers)))


def run_generation(dist: GaussianSearchDist, fitness_fn, plan: ExecPlan,
                   shaping: ShapingConfig = ShapingConfig(), pool=None):
    """Advance ``dist`` by one generation.

    ``fitness_fn(params, data_seed) -> float`` is maximised. ``pool`` may be a
    ``concurrent.futures`` executor; results do not depend on it.
    Returns ``(new_dist, GenerationMetrics)``.
    """
    t_start = time.perf_counter()
    step = dist.generation
    n, B, d = plan.generation_size, plan.workers, dist.dim
    gen_seed = generation_seed(plan.master_seed, step)
    data_seeds = assign_data_batches(plan, step)
    metrics = GenerationMetrics(step, plan.mode.value, n, B)
    form = dist.sigma_grad_form

    if plan.mode is ExecMode.SEMI_UPDATES:
        def worker(w):
            idx = plan.worker_slice(w)
            noise, fit = _evaluate(fitness_fn, dist, gen_seed, idx, data_seeds, w)
            u = shape_utilities(fit, shaping)
            gm, gs = natural_gradient_from(noise, u, form)
            return SemiUpdate(gm, gs, len(idx)), fit

        results = _map_workers(worker, B, pool)
        semis = [r[0] for r in results]
        # message receipt: the B semi-updates land in one receive buffer (counted as bytes_up)
        inbox = np.empty((2, B, d))
        for w, s in enumerate(semis):
            inbox[0, w] = s.grad_mean
            inbox[1, w] = s.grad_sigma
        t_master = time.perf_counter()
        grad_mean, grad_sigma = inbox.mean(axis=1)
        new_dist = apply_update(dist, grad_mean, grad_sigma)
        metrics.master_time = time.perf_counter() - t_master
        fitness = np.concatenate([r[1] for r in results])
        metrics.rng_values_master = 0
        metrics.rng_values_per_worker = plan.per_worker * d
        metrics.bytes_master_to_workers = B * (2 * d * FLOAT_BYTES + SEED_BYTES)
        metrics.bytes_workers_to_master = sum(s.nbytes() for s in semis)
    else:
        if plan.mode is ExecMode.STANDARD:
            # Master draws every sample and ships parameter vectors out.
            t_master = time.perf_counter()
            noise = np.stack([sample_noise(d, gen_seed, i) for i in range(n)])
            master_elapsed = time.perf_counter() - t_master
            params = dist.mean + dist.sigma * noise

            def worker(w):
                out = np.empty(plan.per_worker)
                for row, i in enumerate(plan.worker_slice(w)):
                    try:
                        out[row] = float(fitness_fn(params[i], int(data_seeds[i])))
                    except Exception as exc:
                        raise GenerationError(w, i, exc) from exc
                return out

            fitness = np.concatenate(_map_workers(worker, B, pool))
            metrics.rng_values_master = n * d
            metrics.rng_values_per_worker = 0
            metrics.bytes_master_to_workers = n * (d * FLOAT_BYTES + SEED_BYTES)
        else:
            def worker(w):
                return _evaluate(fitness_fn, dist, gen_seed, plan.worker_slice(w), data_seeds, w)[1]

            fitness = np.concatenate(_map_workers(worker, B, pool))
            t_master = time.perf_counter()
            # The updating node regenerates all n samples from the seed.
            noise = np.stack([sample_noise(d, gen_seed, i) for i in range(n)])
            master_elapsed = time.perf_counter() - t_master
            metrics.rng_values_master = n * d
            metrics.rng_values_per_worker = plan.per_worker * d
            metrics.bytes_master_to_workers = B * (2 * d * FLOAT_BYTES + SEED_BYTES)

        t_master = time.perf_counter()
        u = shape_utilities(fitness, shaping)
        grad_mean, grad_sigma = natural_gradient_from(noise, u, form)
        new_dist = apply_update(dist, grad_mean, grad_sigma)
        metrics.master_time = master_elapsed + time.perf_counter() - t_master
        metrics.bytes_workers_to_master = n * FLOAT_BYTES

    metrics.fitness_best = float(fitness.max())
    metrics.fitness_mean = float(fitness.mean())
    metrics.wall_time = time.perf_counter() - t_start
    return new_dist, metrics


def run(dist, fitness_fn, plan: ExecPlan, generations: int, shaping=ShapingConfig(),
        pool=None, callback=None):
    """Run ``generations`` generations; ``callback(dist, metrics)`` after each."""
    for _ in range(generations):
        dist, metrics = run_generation(dist, fitness_fn, plan, shaping, pool)
        if callback is not None and callback(dist, metrics) is False:
            break
    return dist
