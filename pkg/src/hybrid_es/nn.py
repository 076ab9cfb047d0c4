"""Flat-vector MLPs with manual backprop, plus the C-ES and pruning training steps.

All parameters of a model live in one float64 vector; the layout records
which slice belongs to which tensor and whether it may be masked. Masks are
full-length 0/1 vectors applied as ``mask * params`` before the forward pass.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .executor import BatchRegime, ExecPlan, assign_data_batches, derive_seed
from .mask_dist import (
    MaskDist,
    MaskSample,
    SparsitySchedule,
    apply_mask_update,
    expand_block_mask,
    mask_gradient,
    probs,
    retained_count,
    test_time_mask,
)
from .samplers import SamplerStrategy, sample_mask
from .search_dist import shape_utilities, truncated_normal
from .tasks import BatchSpec, Dataset, make_batch

log = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
_MASK_TAG = 3


@dataclass(frozen=True)
class TensorSpec:
    name: str
    kind: str  # "dense" or "batchnorm"
    role: str  # "weight", "bias", "scale", "shift"
    shape: tuple
    offset: int
    maskable: bool

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)


@dataclass(frozen=True, eq=False)
class MLP:
    """Dense layers with ReLU, optional batch norm after every hidden layer."""

    sizes: tuple
    use_bias: bool = True
    use_batch_norm: bool = False
    mask_last: bool = False
    layout: tuple = field(init=False)

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        specs, off = [], 0
        n_dense = len(self.sizes) - 1

        def add(name, kind, role, shape, maskable):
            nonlocal off
            specs.append(TensorSpec(name, kind, role, tuple(shape), off, maskable))
            off += math.prod(shape)

        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == n_dense - 1
            add(f"dense{i}/w", "dense", "weight", (a, b), self.mask_last or not last)
            if self.use_bias:
                add(f"dense{i}/b", "dense", "bias", (b,), False)
            if self.use_batch_norm and not last:
                add(f"bn{i}/scale", "batchnorm", "scale", (b,), False)
                add(f"bn{i}/shift", "batchnorm", "shift", (b,), False)
        object.__setattr__(self, "layout", tuple(specs))

    @property
    def num_params(self) -> int:
        last = self.layout[-1]
        return last.offset + last.size

    @property
    def num_classes(self) -> int:
        return self.sizes[-1]

    @property
    def maskable_tensors(self) -> list:
        return [s for s in self.layout if s.maskable]

    @property
    def maskable_indices(self) -> np.ndarray:
        return np.concatenate([np.arange(s.offset, s.offset + s.size) for s in self.maskable_tensors])

    def spec(self, name) -> TensorSpec:
        for s in self.layout:
            if s.name == name:
                return s
        raise KeyError(name)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        theta = np.zeros(self.num_params)
        for s in self.layout:
            if s.role == "weight":
                theta[s.slice] = truncated_normal(s.shape, 1.0 / math.sqrt(s.shape[0]), rng).ravel()
            elif s.role == "scale":
                theta[s.slice] = 1.0
        return theta

    def describe(self) -> dict:
        return {"sizes": list(self.sizes), "use_bias": self.use_bias,
                "use_batch_norm": self.use_batch_norm, "mask_last": self.mask_last}


@dataclass(frozen=True, eq=False)
class FlatModel:
    arch: MLP
    params: np.ndarray
    momentum_buffer: np.ndarray
    bn_running: tuple = ()  # ((mean, var), ...) per batch-norm layer

    @classmethod
    def create(cls, arch: MLP, seed=0) -> "FlatModel":
        n_bn = len(arch.sizes) - 2 if arch.use_batch_norm else 0
        running = tuple((np.zeros(h), np.ones(h)) for h in arch.sizes[1:1 + n_bn])
        return cls(arch, arch.init_params(np.random.default_rng(seed)),
                   np.zeros(arch.num_params), running)

    @property
    def layout(self):
        return self.arch.layout

    def full_mask(self, maskable_mask=None) -> np.ndarray:
        """Expand a 0/1 vector over maskable indices to all ``D`` parameters."""
        m = np.ones(self.arch.num_params)
        if maskable_mask is not None:
            m[self.arch.maskable_indices] = maskable_mask
        return m


def _unpack(arch: MLP, theta):
    layers = []
    n_dense = len(arch.sizes) - 1
    get = {s.name: theta[s.slice].reshape(s.shape) for s in arch.layout}
    for i in range(n_dense):
        last = i == n_dense - 1
        layers.append((
            get[f"dense{i}/w"],
            get.get(f"dense{i}/b"),
            None if last or not arch.use_batch_norm else (get[f"bn{i}/scale"], get[f"bn{i}/shift"]),
        ))
    return layers


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def run_network(arch: MLP, theta, x, y, train=True, running=(), need_grad=False):
    """Mean NLL and accuracy of ``theta`` on ``(x, y)``; optionally the gradient.

    Returns ``(loss, acc, grad or None, batch_stats)``. Batch norm uses batch
    statistics when ``train`` is set and ``running`` otherwise.
    """
    x = np.asarray(x)
    x = x.reshape(len(x), -1)
    y = np.asarray(y)
    if x.shape[1] != arch.sizes[0]:
        raise ValueError(f"input width {x.shape[1]} does not match {arch.sizes[0]}")
    if len(x) == 0 or len(x) != len(y):
        raise ValueError("empty batch or label count mismatch")
    layers = _unpack(arch, theta)
    h = x
    cache, stats = [], []
    for li, (w, b, bn) in enumerate(layers):
        a = h @ w
        if b is not None:
            a = a + b
        if li == len(layers) - 1:
            cache.append((h, None, None))
            break
        bn_cache = None
        if bn is not None:
            scale, shift = bn
            if train:
                mu, var = a.mean(axis=0), a.var(axis=0)
                stats.append((mu, var))
            else:
                mu, var = running[len(stats)]
                stats.append((mu, var))
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (a - mu) * inv_std
            bn_cache = (xhat, inv_std, scale)
            a = scale * xhat + shift
        cache.append((h, a, bn_cache))
        h = np.maximum(a, 0.0)
    logp = _log_softmax(a)
    nll = -logp[np.arange(len(y)), y]
    loss = float(nll.mean())
    acc = float(np.mean(a.argmax(axis=1) == y))
    if not need_grad:
        return loss, acc, None, stats

    grads = {}
    n = len(y)
    da = np.exp(logp)
    da[np.arange(n), y] -= 1.0
    da /= n
    for li in range(len(layers) - 1, -1, -1):
        w, b, bn = layers[li]
        h_in, pre, bn_cache = cache[li]
        if li < len(layers) - 1:
            da = dh * (pre > 0)
            if bn_cache is not None:
                xhat, inv_std, scale = bn_cache
                grads[f"bn{li}/scale"] = (da * xhat).sum(axis=0)
                grads[f"bn{li}/shift"] = da.sum(axis=0)
                dxhat = da * scale
                if train:
                    m = len(dxhat)
                    da = inv_std / m * (m * dxhat - dxhat.sum(axis=0)
                                        - xhat * (dxhat * xhat).sum(axis=0))
                else:
                    da = dxhat * inv_std
        grads[f"dense{li}/w"] = h_in.T @ da
        if b is not None:
            grads[f"dense{li}/b"] = da.sum(axis=0)
        if li:
            dh = da @ w.T
    grad = np.empty(arch.num_params)
    for s in arch.layout:
        grad[s.slice] = np.asarray(grads[s.name]).ravel()
    return loss, acc, grad, stats


def _check_mask(model, mask):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (model.arch.num_params,):
        raise ValueError(f"mask length {mask.size} != {model.arch.num_params} parameters")
    return mask


def _effective(model, mask):
    return model.params if mask is None else model.params * mask


def forward(model: FlatModel, mask, batch, train=True):
    """``(mean NLL, accuracy)`` of the masked model on ``batch = (x, y)``."""
    mask = _check_mask(model, mask)
    loss, acc, _, _ = run_network(model.arch, _effective(model, mask), *batch,
                                  train=train, running=model.bn_running)
    return loss, acc


def loss_and_grad(model: FlatModel, mask, batch, train=True):
    mask = _check_mask(model, mask)
    loss, acc, grad, stats = run_network(model.arch, _effective(model, mask), *batch,
                                         train=train, running=model.bn_running, need_grad=True)
    if mask is not None:
        grad = grad * mask
    return loss, acc, grad, stats


def backward(model: FlatModel, mask, batch, train=True) -> np.ndarray:
    """Gradient of the mean NLL w.r.t. ``params`` through ``mask * params``."""
    return loss_and_grad(model, mask, batch, train)[2]


def evaluate(model: FlatModel, mask, x, y, chunk=5000):
    """Eval-mode ``(loss, accuracy)`` over a full split, in chunks."""
    mask = _check_mask(model, mask)
    theta = _effective(model, mask)
    total_loss = total_hits = 0.0
    for start in range(0, len(y), chunk):
        xs, ys = x[start:start + chunk], y[start:start + chunk]
        loss, acc, _, _ = run_network(model.arch, theta, xs, ys, train=False,
                                      running=model.bn_running)
        total_loss += loss * len(ys)
        total_hits += acc * len(ys)
    return total_loss / len(y), total_hits / len(y)


# --- optimisation ------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    steps: int = 1000
    generation_size: int = 9
    use_batch_norm: bool = False
    workers: int | None = None  # defaults to one worker per sample
    batch_regime: BatchRegime = BatchRegime.WFIXB
    lr_boundaries: tuple = ()  # lr is multiplied by 0.1 at each boundary

    def __post_init__(self):
        object.__setattr__(self, "batch_regime", BatchRegime(self.batch_regime))
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0 or self.generation_size < 1:
            raise ValueError("lr, batch_size and generation_size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def lr_at(self, step: int) -> float:
        return self.lr * 0.1 ** sum(step >= b for b in self.lr_boundaries)


def sgd_momentum_step(model: FlatModel, mean_gradient, cfg: TrainConfig, step: int = 0,
                      active=None) -> FlatModel:
    """Classical momentum: ``v = mu*v + g + wd*theta``, ``theta -= lr*v``.

    Coordinates where ``active`` is false keep both their value and their
    momentum; C-ES passes the union of the generation's masks here.
    """
    g = np.asarray(mean_gradient, dtype=np.float64)
    if g.shape != model.params.shape:
        raise ValueError("gradient length mismatch")
    if not np.isfinite(g).all():
        raise ValueError("non-finite gradient")
    if cfg.weight_decay:
        g = g + cfg.weight_decay * model.params
    v = cfg.momentum * model.momentum_buffer + g
    params = model.params - cfg.lr_at(step) * v
    if active is not None:
        active = np.asarray(active, dtype=bool)
        v = np.where(active, v, model.momentum_buffer)
        params = np.where(active, params, model.params)
    return replace(model, params=params, momentum_buffer=v)


def _update_running(model, stats_per_sample):
    if not model.bn_running or not stats_per_sample:
        return model.bn_running
    out = []
    for layer, (rm, rv) in enumerate(model.bn_running):
        mu = np.mean([s[layer][0] for s in stats_per_sample], axis=0)
        var = np.mean([s[layer][1] for s in stats_per_sample], axis=0)
        out.append((BN_MOMENTUM * rm + (1 - BN_MOMENTUM) * mu,
                    BN_MOMENTUM * rv + (1 - BN_MOMENTUM) * var))
    return tuple(out)


# --- C-ES ----------------------------------------------------------------------

def mask_segments(arch: MLP, count: int) -> list:
    """Parameter indices covered by each mask distribution (1 = one global distribution)."""
    if count == 1:
        return [arch.maskable_indices]
    tensors = arch.maskable_tensors
    if count != len(tensors):
        raise ValueError(f"{count} mask distributions for {len(tensors)} maskable tensors")
    return [np.arange(s.offset, s.offset + s.size) for s in tensors]


def make_mask_dists(arch: MLP, per_tensor=False, **kwargs):
    """One `MaskDist` over all maskable weights, or a tuple with one per tensor."""
    if per_tensor:
        return tuple(MaskDist.for_params(s.size, **kwargs) for s in arch.maskable_tensors)
    return MaskDist.for_params(arch.maskable_indices.size, **kwargs)


def _as_tuple(md):
    return md if isinstance(md, tuple) else (md,)


def _like(template, dists):
    return dists if isinstance(template, tuple) else dists[0]


def full_mask_from_groups(model: FlatModel, dists, group_masks) -> np.ndarray:
    m = np.ones(model.arch.num_params)
    segments = mask_segments(model.arch, len(dists))
    for seg, d, gm in zip(segments, dists, group_masks):
        m[seg] = 0.0
        m[seg[expand_block_mask(gm, d.block_width).indices]] = 1.0
    return m


def test_time_full_mask(model: FlatModel, md, schedule: SparsitySchedule, step: int) -> np.ndarray:
    dists = _as_tuple(md)
    m = np.ones(model.arch.num_params)
    for seg, d in zip(mask_segments(model.arch, len(dists)), dists):
        m[seg] = 0.0
        m[seg[test_time_mask(d, retained_count(schedule, step, d.groups)).indices]] = 1.0
    return m


test_time_full_mask.__test__ = False


@dataclass
class StepMetrics:
    step: int
    loss_mean: float
    loss_best: float
    acc_mean: float
    retained: int
    sparsity: float
    utilities: list

    def record(self) -> dict:
        return {"step": self.step, "train_loss": self.loss_mean, "train_loss_best": self.loss_best,
                "train_acc": self.acc_mean, "retained": self.retained, "sparsity": self.sparsity}


def ces_train_step(model: FlatModel, md, cfg: TrainConfig, step: int, *, dataset: Dataset,
                   schedule: SparsitySchedule, strategy: SamplerStrategy = SamplerStrategy(),
                   master_seed: int = 0, pool=None, force_zero_utility=False):
    """One step of hybrid ES/SGD training.

    Samples ``n`` masks, computes per-mask fitness (negative NLL) and masked
    gradients, applies SGD with the averaged gradient and an ES update to the
    mask logits. ``md`` is a `MaskDist` or a tuple of them (per-tensor mode).
    Returns ``(model, md, StepMetrics)``; inputs are never modified.
    """
    dists = _as_tuple(md)
    n = cfg.generation_size
    ks = [retained_count(schedule, step, d.groups) for d in dists]
    cats = [probs(d) for d in dists]
    plan = ExecPlan(workers=cfg.workers or n, generation_size=n, master_seed=master_seed,
                    batch_regime=cfg.batch_regime)
    data_seeds = assign_data_batches(plan, step)

    def evaluate_sample(i):
        group_masks = [sample_mask(cat, k, strategy, derive_seed(master_seed, _MASK_TAG, step, i, j))
                       for j, (cat, k) in enumerate(zip(cats, ks))]
        full = full_mask_from_groups(model, dists, group_masks)
        batch = make_batch(dataset, BatchSpec(cfg.batch_size, int(data_seeds[i])))
        loss, acc, grad, stats = loss_and_grad(model, full, batch, train=True)
        return group_masks, full, loss, acc, grad, stats

    results = list(pool.map(evaluate_sample, range(n))) if pool else [evaluate_sample(i) for i in range(n)]
    losses = np.array([r[2] for r in results])
    grad = results[0][4].copy()
    for r in results[1:]:
        grad += r[4]
    grad /= n
    active = np.zeros(model.arch.num_params, dtype=bool)
    for r in results:
        active |= r[1] > 0

    new_model = sgd_momentum_step(model, grad, cfg, step, active=active)
    new_model = replace(new_model, bn_running=_update_running(model, [r[5] for r in results]))

    if force_zero_utility:
        utilities = np.zeros(n)
    else:
        utilities = shape_utilities(-losses)
    if n < 2:
        log.warning("generation size 1: mask distribution update skipped")
        new_dists = dists
    else:
        new_dists = tuple(
            apply_mask_update(d, mask_gradient([MaskSample(r[0][j], u) for r, u in zip(results, utilities)], d))
            for j, d in enumerate(dists))

    total_groups = sum(d.groups for d in dists)
    metrics = StepMetrics(step, float(losses.mean()), float(losses.min()),
                          float(np.mean([r[3] for r in results])), int(sum(ks)),
                          1.0 - sum(ks) / total_groups, utilities.tolist())
    return new_model, _like(md, new_dists), metrics


# --- magnitude pruning baseline ---------------------------------------------------

@dataclass(frozen=True)
class PruneConfig:
    schedule: SparsitySchedule = SparsitySchedule(0.0, 0.9)
    update_every: int = 1


def magnitude_mask(model: FlatModel, k: int) -> np.ndarray:
    """Full mask keeping the ``k`` largest-magnitude maskable weights (lower index wins ties)."""
    idx = model.arch.maskable_indices
    order = np.argsort(-np.abs(model.params[idx]), kind="stable")
    m = np.ones(model.arch.num_params)
    m[idx] = 0.0
    m[idx[order[:k]]] = 1.0
    return m


def prune_train_step(model: FlatModel, cfg: TrainConfig, prune: PruneConfig, step: int, batch,
                     mask=None):
    """SGD step followed by magnitude thresholding to the scheduled sparsity.

    On threshold steps the gradient step is dense, so pruned weights may grow
    back; in between, the previous ``mask`` keeps pruned weights at zero.
    Returns ``(model, mask)``.
    """
    rethreshold = mask is None or step % prune.update_every == 0
    grad_mask = None if rethreshold else mask
    _, _, grad, stats = loss_and_grad(model, grad_mask, batch, train=True)
    new = sgd_momentum_step(model, grad, cfg, step)
    new = replace(new, bn_running=_update_running(model, [stats]))
    if rethreshold:
        n_maskable = model.arch.maskable_indices.size
        mask = magnitude_mask(new, retained_count(prune.schedule, step, n_maskable))
    if not np.all(mask):
        new = replace(new, params=new.params * mask, momentum_buffer=new.momentum_buffer * mask)
    return new, mask


# --- SNES fitness -----------------------------------------------------------------

def supervised_fitness(arch: MLP, dataset: Dataset, batch_size: int = 256):
    """``f(theta, data_seed) = -mean NLL`` on the seeded training batch."""
    def fitness(theta, data_seed):
        x, y = make_batch(dataset, BatchSpec(batch_size, data_seed))
        return -run_network(arch, theta, x, y, train=True)[0]
    return fitness


def snes_test_accuracy(arch: MLP, theta, dataset: Dataset, stats_batch: int = 1000) -> float:
    """Test accuracy of a parameter vector; batch-norm statistics come from a training batch."""
    running = ()
    if arch.use_batch_norm:
        xs, ys = make_batch(dataset, BatchSpec(min(stats_batch, dataset.train_idx.size), 0))
        running = tuple(run_network(arch, theta, xs, ys, train=True)[3])
    x, y = dataset.test
    hits = 0.0
    for start in range(0, len(y), 5000):
        hits += run_network(arch, theta, x[start:start + 5000], y[start:start + 5000],
                            train=False, running=running)[1] * len(y[start:start + 5000])
    return hits / len(y)
