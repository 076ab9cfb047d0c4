"""Command-line experiment runner.

    hybrid-es snes-opt      --config run.json --out runs/a [--n 400 --B 4 ...]
    hybrid-es ces-train     --out runs/b --tau 3 --eta-l 0.1 --sampler tn:5
    hybrid-es prune-train   --out runs/c --final-sparsity 0.9
    hybrid-es sampler-bench --out runs/d --d 1000 --k 500
    hybrid-es summarize     runs/a runs/b --out summary.csv

Every subcommand reads one JSON config (optional) and applies flag overrides
on top. A config may hold a ``"sweep"`` mapping of field -> list of values;
the cartesian product then runs one sub-run per combination.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import save_search_dist, save_training_state
from .executor import BatchRegime, ExecMode, ExecPlan
from .mask_dist import ConfigError, ScheduleShape, SparsitySchedule
from .nn import MLP, FlatModel, PruneConfig, TrainConfig, make_mask_dists, supervised_fitness
from .runners import snes_supervised_evaluator, train_ces, train_prune, train_snes
from .samplers import SamplerStrategy, build_cdf, draw_k_sorted, sample_mask
from .search_dist import GaussianSearchDist, ShapingConfig, SigmaGradForm
from .tasks import BenchmarkFn, blobs, load_mnist, two_moons

log = logging.getLogger("hybrid_es")

WORKERS_ENV = "HYBRID_ES_WORKERS"
METRICS_SCHEMA = "hybrid-es-metrics/1"
TIMING_FIELDS = ("wall_time_s", "master_time_s", "time_per_mask_s")
SUBCOMMANDS = ("snes-opt", "ces-train", "prune-train", "sampler-bench")


@dataclass
class RunConfig:
    """Every knob of every subcommand; fields irrelevant to a subcommand are ignored."""

    # task
    task: str = "mnist"  # sphere, rosenbrock, mnist, two_moons, blobs
    dim: int = 10
    data_dir: str = ""
    n_train: int = 0  # 0 keeps the full training split
    n_test: int = 0
    data_count: int = 2000
    data_noise: float = 0.15
    data_seed: int = 0
    # model
    hidden: list = field(default_factory=lambda: [32])
    batch_norm: bool = False
    mask_last: bool = False
    # SNES and execution
    mode: str = "semi"
    n: int = 100
    B: int = 0  # 0: HYBRID_ES_WORKERS, else 1 for SNES and n for C-ES
    batch_regime: str = "wfixb"
    generations: int = 500
    sigma0: float = 0.1
    eta_mean: float = 0.0  # 0: default learning rate
    eta_sigma: float = 0.0
    nu: float = 2.0
    sigma_grad_form: str = "z_sq_minus_one"
    # mask distribution
    tau: float = 3.0
    eta_l: float = 0.1
    block_width: int = 1
    init_std: float = 1e-3
    per_tensor: bool = False
    sampler: str = "tn:5"
    # sparsity schedule
    initial_sparsity: float = 0.5
    final_sparsity: float = 0.5
    hold_steps: int = 0
    ramp_end_step: int = 0
    schedule_shape: str = "cubic"
    prune_every: int = 1
    # SGD
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 256
    steps: int = 1000
    lr_boundaries: list = field(default_factory=list)
    eval_every: int = 100
    # sampler-bench
    d: int = 1000
    k: int = 500
    trials: int = 200
    strategies: list = field(default_factory=lambda: ["wr", "wr+u", "worb:4", "tn:5"])
    bench_probs: str = "uniform"  # uniform or dirichlet:<alpha>
    chi_dists: int = 10
    chi_draws: int = 100_000
    # run
    seed: int = 0
    threads: int = 1


FIELD_ALIASES = {"eta_l": ["--eta-l", "--eta_l"], "B": ["--B"], "n": ["--n"], "nu": ["--nu"],
                 "tau": ["--tau"], "k": ["--k"], "d": ["--d"]}


class ConfigFieldError(ConfigError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _field_types():
    return {f.name: (type(f.default) if f.default is not dataclasses.MISSING else list) for f in fields(RunConfig)}


def config_from_mapping(data: dict) -> RunConfig:
    types = _field_types()
    kwargs = {}
    for key, value in data.items():
        if key not in types:
            raise ConfigFieldError(key, "unknown field")
        want = types[key]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, want) or (want is int and isinstance(value, bool)):
            raise ConfigFieldError(key, f"expected {want.__name__}, got {type(value).__name__}")
        kwargs[key] = value
    return RunConfig(**kwargs)


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 of the canonical JSON of the config (sorted keys, compact separators)."""
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _default_workers(cfg: RunConfig, fallback: int) -> int:
    if cfg.B:
        return cfg.B
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigFieldError("B", f"{WORKERS_ENV}={env!r} is not an integer") from None
        if value < 1:
            raise ConfigFieldError("B", f"{WORKERS_ENV} must be >= 1")
        return value
    return fallback


def _check(cond, name, msg):
    if not cond:
        raise ConfigFieldError(name, msg)


def validate(cfg: RunConfig, command: str):
    """Cross-field checks, run before any data is loaded or compute spent."""
    supervised = cfg.task in ("mnist", "two_moons", "blobs")
    _check(cfg.task in ("sphere", "rosenbrock") or supervised, "task", f"unknown task {cfg.task!r}")
    if command in ("ces-train", "prune-train"):
        _check(supervised, "task", f"{command} needs a supervised task")
    if cfg.task == "mnist" and command != "sampler-bench":
        _check(bool(cfg.data_dir or os.environ.get("MNIST_DIR")), "data_dir",
               "set data_dir (or MNIST_DIR) to the directory holding the MNIST IDX files")
    _check(cfg.dim >= (2 if cfg.task == "rosenbrock" else 1), "dim", "too small for the benchmark")
    _check(all(isinstance(h, int) and h > 0 for h in cfg.hidden), "hidden", "positive integers expected")
    _check(cfg.n >= 1, "n", "must be >= 1")
    _check(cfg.seed >= 0, "seed", "must be >= 0")
    _check(cfg.threads >= 1, "threads", "must be >= 1")
    for name, enum_type in (("mode", ExecMode), ("batch_regime", BatchRegime),
                            ("sigma_grad_form", SigmaGradForm), ("schedule_shape", ScheduleShape)):
        try:
            enum_type(getattr(cfg, name))
        except ValueError:
            raise ConfigFieldError(name, f"invalid value {getattr(cfg, name)!r}") from None
    for name in ("sampler",) + (("strategies",) if command == "sampler-bench" else ()):
        values = getattr(cfg, name)
        for v in values if isinstance(values, list) else [values]:
            try:
                SamplerStrategy.parse(v)
            except ValueError as exc:
                raise ConfigFieldError(name, str(exc)) from None
    if command == "snes-opt":
        B = _default_workers(cfg, 1)
        _check(cfg.n % B == 0, "B", f"B={B} does not divide n={cfg.n}")
        _check(cfg.sigma0 > 0, "sigma0", "must be > 0")
        _check(cfg.nu > 0, "nu", "must be > 0")
        _check(cfg.generations >= 1, "generations", "must be >= 1")
    if command in ("ces-train", "prune-train"):
        for name in ("initial_sparsity", "final_sparsity"):
            _check(0.0 <= getattr(cfg, name) < 1.0, name, "must be in [0, 1)")
        _check(0 <= cfg.hold_steps <= max(cfg.ramp_end_step, cfg.hold_steps), "hold_steps", "must be >= 0")
        _check(cfg.ramp_end_step == 0 or cfg.ramp_end_step >= cfg.hold_steps, "ramp_end_step",
               "must be >= hold_steps")
        _check(cfg.lr > 0, "lr", "must be > 0")
        _check(0 <= cfg.momentum < 1, "momentum", "must be in [0, 1)")
        _check(cfg.batch_size >= 1, "batch_size", "must be >= 1")
        _check(cfg.prune_every >= 1, "prune_every", "must be >= 1")
    if command == "ces-train":
        B = _default_workers(cfg, cfg.n)
        _check(cfg.n % B == 0, "B", f"B={B} does not divide n={cfg.n}")
        _check(cfg.tau > 0, "tau", "must be > 0")
        _check(cfg.eta_l >= 0, "eta_l", "must be >= 0")
        _check(cfg.block_width >= 1, "block_width", "must be >= 1")
        arch = _arch(cfg, 784 if cfg.task == "mnist" else 2, _num_classes(cfg))
        tensors = arch.maskable_tensors
        sizes = [s.size for s in tensors] if cfg.per_tensor else [sum(s.size for s in tensors)]
        for size in sizes:
            _check(size % cfg.block_width == 0, "block_width",
                   f"block width {cfg.block_width} does not divide {size} maskable parameters")
    if command == "sampler-bench":
        _check(1 <= cfg.k <= cfg.d, "k", "need 1 <= k <= d")
        _check(cfg.trials >= 1, "trials", "must be >= 1")
        _check(cfg.bench_probs == "uniform" or cfg.bench_probs.startswith("dirichlet:"), "bench_probs",
               "uniform or dirichlet:<alpha>")


def _num_classes(cfg):
    return {"mnist": 10, "two_moons": 2, "blobs": 3}.get(cfg.task, 2)


def _arch(cfg, n_in, n_out):
    return MLP(tuple([n_in, *cfg.hidden, n_out]), use_batch_norm=cfg.batch_norm, mask_last=cfg.mask_last)


def load_dataset(cfg: RunConfig):
    if cfg.task == "mnist":
        data = load_mnist(cfg.data_dir or os.environ["MNIST_DIR"])
    elif cfg.task == "two_moons":
        data = two_moons(cfg.data_count, cfg.data_noise, cfg.data_seed)
    else:
        data = blobs(cfg.data_count, 3, cfg.data_seed)
    if cfg.n_train or cfg.n_test:
        data = data.subset(cfg.n_train or None, cfg.n_test or None, seed=cfg.data_seed)
    return data


def _schedule(cfg):
    return SparsitySchedule(cfg.initial_sparsity, cfg.final_sparsity, cfg.hold_steps,
                            max(cfg.ramp_end_step, cfg.hold_steps), cfg.schedule_shape)


def _train_config(cfg, workers=None):
    return TrainConfig(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                       batch_size=cfg.batch_size, steps=cfg.steps, generation_size=cfg.n,
                       use_batch_norm=cfg.batch_norm, workers=workers, batch_regime=cfg.batch_regime,
                       lr_boundaries=tuple(cfg.lr_boundaries))


class MetricsWriter:
    """Append-only JSON-lines sink; every record carries the schema tag and config hash."""

    def __init__(self, path: Path, command: str, chash: str):
        self.path = path
        self.base = {"schema": METRICS_SCHEMA, "command": command, "config_hash": chash}
        self._f = open(path, "a")

    def __call__(self, rec: dict):
        self._f.write(json.dumps({**self.base, **_jsonable(rec)}, sort_keys=True) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _inside(out: Path, name: str) -> Path:
    path = (out / name).resolve()
    if out.resolve() not in path.parents:
        raise RuntimeError(f"refusing to write outside {out}: {path}")
    return path


def cmd_snes_opt(cfg, out, emit, pool):
    B = _default_workers(cfg, 1)
    plan = ExecPlan(cfg.mode, B, cfg.n, cfg.seed, cfg.batch_regime)
    evaluate_mean = None
    if cfg.task in ("sphere", "rosenbrock"):
        fitness = BenchmarkFn(cfg.task, cfg.dim)
        mean = np.random.default_rng(cfg.seed).uniform(-1.0, 1.0, cfg.dim)
    else:
        data = load_dataset(cfg)
        arch = _arch(cfg, data.n_features, data.num_classes)
        fitness = supervised_fitness(arch, data, cfg.batch_size)
        mean = arch.init_params(np.random.default_rng(cfg.seed))
        evaluate_mean = snes_supervised_evaluator(arch, data)
    dist = GaussianSearchDist.create(mean, cfg.sigma0, eta_mean=cfg.eta_mean or None,
                                     eta_sigma=cfg.eta_sigma or None,
                                     sigma_grad_form=SigmaGradForm(cfg.sigma_grad_form))
    res = train_snes(dist, fitness, plan, cfg.generations, shaping=ShapingConfig(cfg.nu), pool=pool,
                     evaluate_mean=evaluate_mean, eval_every=cfg.eval_every, on_record=emit)
    save_search_dist(_inside(out, "final.ckpt"), res.state["dist"], cfg.seed)
    return res.final


def cmd_ces_train(cfg, out, emit, pool):
    data = load_dataset(cfg)
    arch = _arch(cfg, data.n_features, data.num_classes)
    model = FlatModel.create(arch, cfg.seed)
    md = make_mask_dists(arch, per_tensor=cfg.per_tensor, block_width=cfg.block_width,
                         temperature=cfg.tau, eta_logits=cfg.eta_l, init_std=cfg.init_std, seed=cfg.seed)
    schedule = _schedule(cfg)
    res = train_ces(model, md, _train_config(cfg, _default_workers(cfg, cfg.n)), data, schedule,
                    strategy=SamplerStrategy.parse(cfg.sampler), master_seed=cfg.seed, pool=pool,
                    eval_every=cfg.eval_every, on_record=emit)
    save_training_state(_inside(out, "final.ckpt"), res.state["model"], res.state["mask_dist"],
                        step=cfg.steps, master_seed=cfg.seed, schedule=schedule)
    return res.final


def cmd_prune_train(cfg, out, emit, pool):
    data = load_dataset(cfg)
    arch = _arch(cfg, data.n_features, data.num_classes)
    schedule = _schedule(cfg)
    res = train_prune(FlatModel.create(arch, cfg.seed), _train_config(cfg), PruneConfig(schedule, cfg.prune_every),
                      data, master_seed=cfg.seed, eval_every=cfg.eval_every, on_record=emit)
    save_training_state(_inside(out, "final.ckpt"), res.state["model"], None, step=cfg.steps,
                        master_seed=cfg.seed, schedule=schedule,
                        extra={"mask": np.flatnonzero(res.state["mask"] == 0).tolist()})
    return res.final


def _bench_probs(cfg, rng):
    if cfg.bench_probs == "uniform":
        return np.full(cfg.d, 1.0 / cfg.d)
    return rng.dirichlet(np.full(cfg.d, float(cfg.bench_probs.split(":", 1)[1])))


def cmd_sampler_bench(cfg, out, emit, pool):
    from scipy.stats import chisquare

    rng = np.random.default_rng(cfg.seed)
    dist = build_cdf(_bench_probs(cfg, rng))
    report = {"d": cfg.d, "k": cfg.k, "trials": cfg.trials, "probs": cfg.bench_probs, "strategies": {}}
    for label in cfg.strategies:
        strategy = SamplerStrategy.parse(label)
        sizes = []
        t = time.perf_counter()
        for trial in range(cfg.trials):
            sizes.append(len(sample_mask(dist, cfg.k, strategy, cfg.seed * 1_000_003 + trial)))
        elapsed = time.perf_counter() - t
        rec = {"sampler": strategy.label(), "card_mean": float(np.mean(sizes)),
               "card_std": float(np.std(sizes)), "card_min": int(min(sizes)), "card_max": int(max(sizes)),
               "time_per_mask_s": elapsed / cfg.trials}
        report["strategies"][strategy.label()] = rec
        emit(rec)
    pvalues = []
    for j in range(cfg.chi_dists):
        p = rng.dirichlet(np.ones(min(cfg.d, 50)))
        counts = np.bincount(draw_k_sorted(build_cdf(p), cfg.chi_draws, derive_bench_seed(cfg.seed, j)),
                             minlength=p.size)
        expected = p * cfg.chi_draws
        pvalues.append(float(chisquare(counts, expected * counts.sum() / expected.sum()).pvalue))
    report["chi_square_pvalues"] = pvalues
    emit({"chi_square_pvalues": pvalues, "chi_square_min_p": min(pvalues) if pvalues else None})
    with open(_inside(out, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return {"min_p": min(pvalues) if pvalues else None,
            **{f"card_mean[{k}]": v["card_mean"] for k, v in report["strategies"].items()}}


def derive_bench_seed(seed, j):
    return int(np.random.SeedSequence(seed, spawn_key=(7, j)).generate_state(1, np.uint64)[0])


COMMANDS = {"snes-opt": cmd_snes_opt, "ces-train": cmd_ces_train, "prune-train": cmd_prune_train,
            "sampler-bench": cmd_sampler_bench}


def expand_sweep(base: dict) -> list:
    """``[(suffix, mapping)]``: one entry without a sweep, else the cartesian product."""
    sweep = base.pop("sweep", None)
    if not sweep:
        return [("", base)]
    if not isinstance(sweep, dict) or not all(isinstance(v, list) and v for v in sweep.values()):
        raise ConfigFieldError("sweep", "expected a mapping of field -> non-empty list")
    keys = sorted(sweep)
    runs = []
    for values in itertools.product(*(sweep[k] for k in keys)):
        suffix = "_".join(f"{k}={json.dumps(v).replace('/', '-')}" for k, v in zip(keys, values))
        runs.append((suffix, {**base, **dict(zip(keys, values))}))
    return runs


def run_one(command: str, cfg: RunConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    with open(_inside(out, "config.json"), "w") as f:
        json.dump({**dataclasses.asdict(cfg), "config_hash": chash, "command": command,
                   "version": __version__}, f, indent=2, sort_keys=True)
    metrics_path = _inside(out, "metrics.jsonl")
    if metrics_path.exists():
        metrics_path.unlink()
    writer = MetricsWriter(metrics_path, command, chash)
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        final = COMMANDS[command](cfg, out, writer, pool)
        writer({"final": True, **final})
    finally:
        writer.close()
        if pool is not None:
            pool.shutdown()
    return final


def _add_override_flags(p):
    types = _field_types()
    for f in fields(RunConfig):
        names = FIELD_ALIASES.get(f.name, []) + [f"--{f.name.replace('_', '-')}"]
        names = list(dict.fromkeys(names))
        t = types[f.name]
        if t is bool:
            p.add_argument(*names, dest=f.name, type=_parse_bool, default=None, metavar="BOOL")
        elif t is list:
            p.add_argument(*names, dest=f.name, type=_parse_list, default=None, metavar="A,B,...")
        else:
            p.add_argument(*names, dest=f.name, type=t, default=None)


def _parse_bool(text):
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _parse_list(text):
    items = [s for s in text.split(",") if s]
    try:
        return [int(s) for s in items]
    except ValueError:
        return items


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"config error: {message}", file=sys.stderr)
        raise SystemExit(1)


_HELP = {
    "snes-opt": "optimise a benchmark function or train a classifier with SNES",
    "ces-train": "train a sparse network with SGD weights and an ES-learned mask",
    "prune-train": "dense-to-sparse training with gradual magnitude pruning",
    "sampler-bench": "timing, cardinality and chi-square statistics of the mask samplers",
}


def build_parser():
    parser = _Parser(prog="hybrid-es", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        _add_override_flags(p)
    p = sub.add_parser("summarize", help="aggregate metrics.jsonl files into CSV")
    p.add_argument("paths", nargs="+", type=Path, help="run directories or metrics files")
    p.add_argument("--out", type=Path, help="CSV path (default stdout)")
    return parser


def summarize(paths, out=None):
    """One CSV row per run: config hash, command, last step and the final metrics."""
    files = []
    for p in paths:
        if p.is_dir():
            files.extend(sorted(p.rglob("metrics.jsonl")))
        elif p.exists():
            files.append(p)
        else:
            raise ConfigFieldError("paths", f"{p} does not exist")
    rows = []
    for path in files:
        records = [json.loads(line) for line in open(path) if line.strip()]
        if not records:
            continue
        final = next((r for r in reversed(records) if r.get("final")), {})
        steps = [r for r in records if "step" in r]
        row = {"run": str(path.parent), "command": records[0].get("command"),
               "config_hash": records[0].get("config_hash"), "records": len(records),
               "last_step": steps[-1]["step"] if steps else None}
        for key in ("test_acc", "test_loss", "sparsity", "mean_fitness", "fitness_mean", "min_p"):
            if key in final:
                row[key] = final[key]
        if steps:
            times = [r["wall_time_s"] for r in steps if "wall_time_s" in r]
            if times:
                row["median_step_time_s"] = float(np.median(times))
        rows.append(row)
    header = list(dict.fromkeys(k for row in rows for k in row))
    sink = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.DictWriter(sink, fieldnames=header)
        w.writeheader()
        w.writerows(rows)
    finally:
        if out:
            sink.close()
    return rows


def _load_config(args):
    data = {}
    if args.config is not None:
        try:
            with open(args.config) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigFieldError("config", str(exc)) from None
        if not isinstance(data, dict):
            raise ConfigFieldError("config", "top level must be a JSON object")
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
    data.update(overrides)
    runs = []
    for suffix, mapping in expand_sweep(data):
        runs.append((suffix, config_from_mapping(mapping)))
    return runs


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "summarize":
            summarize(args.paths, args.out)
            return 0
        runs = _load_config(args)
        for _, cfg in runs:
            validate(cfg, args.command)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        for suffix, cfg in runs:
            out = args.out / suffix if suffix else args.out
            final = run_one(args.command, cfg, out)
            print(json.dumps({"out": str(out), **_jsonable(final)}, sort_keys=True))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit code 2
        log.debug("run failed", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
