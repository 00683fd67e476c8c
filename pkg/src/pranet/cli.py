"""Command-line entry point: ``pranet {train,eval,gradcheck,bench,gen-data}``.

Run configuration is a JSON document (see docs/config.md). Exit codes:
0 success, 1 failed check, 2 invalid input or configuration, 3 numeric
divergence during training.
"""

from __future__ import annotations

import argparse
import contextlib
import glob
import itertools
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import gradcheck, models
from .exceptions import ConfigError, NumericError
from .geometry import load_xyzl, save_xyzl
from .irl import bench_attention, write_bench_csv
from .params import ParameterStore, atomic_write_text
from .trainkit import (
    SHAPES,
    SyntheticSpec,
    TrainConfig,
    evaluate,
    fit_network,
    generate_synthetic,
    stack_clouds,
)

TASK_NETWORKS = {"classify": "classifier", "keypoint": "keypoint", "partseg": "partseg"}
DEFAULT_SWEEP = {"rows": [[1024, 256], [2048, 512], [4096, 512]], "m": [1, 4], "k": 6}

# ------------------------------------------------------------------ configuration


@dataclass
class DataConfig:
    classes: list = field(default_factory=lambda: ["sphere", "cube", "cylinder", "torus"])
    points_per_cloud: int = 256
    noise_sigma: float = 0.01
    train_per_class: int = 50
    test_per_class: int = 20
    seed: int | None = None
    train_dir: str | None = None
    test_dir: str | None = None


@dataclass
class RunConfig:
    task: str = "classify"
    network: str | None = None
    network_options: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"
    seed: int = 0
    base_dir: str = "."

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def validate(self) -> None:
        if self.task not in TASK_NETWORKS:
            raise ConfigError(f"task must be one of {sorted(TASK_NETWORKS)}, got {self.task!r}")
        for name in ("train_dir", "test_dir"):
            p = getattr(self.data, name)
            if p is not None and not os.path.isdir(self.resolve(p)):
                raise ConfigError(f"data.{name} {p!r} does not exist")
        if (self.data.train_dir is None) != (self.data.test_dir is None):
            raise ConfigError("give both data.train_dir and data.test_dir, or neither")
        net = self.network
        if net is not None and net not in TASK_NETWORKS.values() and not os.path.isfile(self.resolve(net)):
            raise ConfigError(f"network {net!r} is neither a builtin name nor an existing spec file")
        if self.data.train_dir is None:
            SyntheticSpec(self.data.classes, self.data.points_per_cloud, self.data.noise_sigma, 1)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "network": self.network,
            "network_options": self.network_options,
            "train": self.train.to_dict(),
            "data": dict(self.data.__dict__),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    if not os.path.isfile(path):
        raise ConfigError(f"config file {path!r} not found")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    known = {"task", "network", "network_options", "train", "data", "output_dir", "seed"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown config keys {sorted(extra)}")
    try:
        train = TrainConfig.from_dict(raw.get("train", {}))
        data = DataConfig(**raw.get("data", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig(
        task=raw.get("task", "classify"),
        network=raw.get("network"),
        network_options=dict(raw.get("network_options", {})),
        train=train,
        data=data,
        output_dir=raw.get("output_dir", "runs/default"),
        seed=int(raw.get("seed", 0)),
        base_dir=os.path.dirname(os.path.abspath(path)),
    )
    return cfg


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
        cfg.data.seed = None
    if getattr(args, "out", None):
        cfg.output_dir = args.out
        cfg.base_dir = "."
    if getattr(args, "static_graph", False):
        cfg.network_options["static_graph"] = True
    return cfg


# ------------------------------------------------------------------ builders


def build_network(cfg: RunConfig, num_classes: int, num_parts: int = 0, num_categories: int = 0) -> models.NetworkSpec:
    name = cfg.network or TASK_NETWORKS[cfg.task]
    opts = dict(cfg.network_options)
    if name == "classifier":
        return models.build_classifier(num_classes, **opts)
    if name == "keypoint":
        return models.build_keypoint_net(1, **opts)
    if name == "partseg":
        return models.build_partseg_net(num_parts, num_categories, **opts)
    with open(cfg.resolve(name)) as fh:
        spec = models.NetworkSpec.from_json(fh.read())
    if opts.get("static_graph"):
        spec.static_graph = True
    return spec


def _load_dir(path: str):
    files = sorted(glob.glob(os.path.join(path, "*.xyzl")))
    if not files:
        raise ConfigError(f"no .xyzl files in {path!r}")
    return [load_xyzl(f) for f in files]


def load_data(cfg: RunConfig):
    """(train clouds, test clouds, class names)"""
    d = cfg.data
    if d.train_dir is not None:
        train, test = _load_dir(cfg.resolve(d.train_dir)), _load_dir(cfg.resolve(d.test_dir))
        cats = sorted({c.category for c in train + test if c.category is not None})
        return train, test, [str(c) for c in cats]
    seed = cfg.seed if d.seed is None else d.seed
    ss = np.random.SeedSequence(seed).spawn(2)
    sets = []
    for per, s in zip((d.train_per_class, d.test_per_class), ss):
        spec = SyntheticSpec(d.classes, d.points_per_cloud, d.noise_sigma, per, int(s.generate_state(1)[0]))
        sets.append(generate_synthetic(spec))
    return sets[0], sets[1], list(d.classes)


def _targets(task: str, clouds):
    X, y, parts, mask = stack_clouds(clouds)
    if task == "classify":
        return X, y, None
    if task == "partseg":
        if parts is None:
            raise ConfigError("part segmentation needs per-point labels in every cloud")
        return X, parts, y
    return X, mask, None


# ------------------------------------------------------------------ threads


def thread_cap(requested: int | None) -> int | None:
    """Effective worker-thread cap: the smaller of --threads and PRA_THREADS."""
    caps = []
    if requested:
        caps.append(int(requested))
    env = os.environ.get("PRA_THREADS")
    if env:
        try:
            caps.append(int(env))
        except ValueError:
            raise ConfigError(f"PRA_THREADS must be an integer, got {env!r}") from None
    if any(c < 1 for c in caps):
        raise ConfigError("thread counts must be positive")
    return min(caps) if caps else None


@contextlib.contextmanager
def limited_threads(n: int | None):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


# ------------------------------------------------------------------ commands


def _write_json(path: str, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    cfg.validate()
    train, test, names = load_data(cfg)
    Xtr, ytr, ctr = _targets(cfg.task, train)
    Xte, yte, cte = _targets(cfg.task, test)
    num_parts = int(max(ytr.max(), yte.max()) + 1) if cfg.task == "partseg" else 0
    num_cats = int(max(ctr.max(), cte.max()) + 1) if cfg.task == "partseg" else 0
    spec = build_network(cfg, len(names), num_parts, num_cats)
    store = models.init_params(spec, cfg.seed)
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "config.json"), cfg.to_dict())
    atomic_write_text(os.path.join(out, "network.json"), spec.to_json() + "\n")

    def log(row):
        if not args.quiet:
            print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items() if v is not None))

    t0 = time.perf_counter()
    try:
        history = fit_network(
            spec, store, Xtr, ytr, cfg.train, categories=ctr, eval_data=(Xte, yte, cte),
            metrics_path=os.path.join(out, "metrics.csv"), checkpoint_path=os.path.join(out, "checkpoint.prak"), log=log,
        )
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    last = history[-1]
    summary = {
        "task": cfg.task,
        "epochs": len(history),
        "seconds": time.perf_counter() - t0,
        "final": {k: last.get(k) for k in ("train_loss", "train_oa", "val_oa", "val_macc", "val_miou")},
        "parameters": store.num_parameters(),
        "notation": spec.notation(),
        "classes": names,
    }
    _write_json(os.path.join(out, "summary.json"), summary)
    print(json.dumps(summary["final"]))
    return 0


def cmd_eval(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    cfg.validate()
    out = cfg.output_dir
    ckpt = args.checkpoint or os.path.join(out, "checkpoint.prak")
    net = os.path.join(os.path.dirname(os.path.abspath(ckpt)), "network.json")
    for p in (ckpt, net):
        if not os.path.isfile(p):
            raise ConfigError(f"{p!r} not found; train first or pass --checkpoint")
    with open(net) as fh:
        spec = models.NetworkSpec.from_json(fh.read())
    if cfg.network_options.get("static_graph"):
        spec.static_graph = True
    store = models.init_params(spec, 0)
    store.load_state_dict(ParameterStore.load(ckpt).state_dict())
    _, test, _ = load_data(cfg)
    X, y, cats = _targets(cfg.task, test)
    result = evaluate(spec, store, X, y, cats, cfg.train.batch_size)
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "eval.json"), result)
    print(json.dumps(result))
    return 0


def cmd_gradcheck(args) -> int:
    names = args.ops or ["all"]
    if names == ["all"]:
        names = list(gradcheck.SUITE)
    unknown = [n for n in names if n not in gradcheck.CHECKS]
    if unknown:
        print(f"error: unknown op(s) {unknown}; choose from: all, {', '.join(gradcheck.CHECKS)}", file=sys.stderr)
        return 2
    base = args.seed if args.seed is not None else 0
    seeds = tuple(range(base, base + args.seeds))
    failed = []

    def report(r):
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<24} max_rel_err={r.max_rel_err:.3e} entries={r.entries} skipped={r.skipped} {status}", flush=True)
        if not r.passed:
            failed.append(r.name)

    results = gradcheck.run_suite(names, seeds, args.max_entries, report)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        rows = ["op,max_rel_err,entries,skipped,passed"] + [
            f"{r.name},{r.max_rel_err!r},{r.entries},{r.skipped},{int(r.passed)}" for r in results
        ]
        atomic_write_text(os.path.join(args.out, "gradcheck.csv"), "\n".join(rows) + "\n")
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def bench_grid(sweep: dict) -> list[tuple[int, int, int, int]]:
    """(N, S, k, m) combinations of a sweep: explicit ``rows`` of [N, S] or the
    product of ``N`` and ``S`` lists, each crossed with ``k`` and ``m``."""
    def as_list(v):
        return list(v) if isinstance(v, (list, tuple)) else [v]

    ks, ms = as_list(sweep.get("k", 6)), as_list(sweep.get("m", 1))
    if "rows" in sweep:
        pairs = [tuple(r) for r in sweep["rows"]]
    elif "N" in sweep and "S" in sweep:
        pairs = list(itertools.product(as_list(sweep["N"]), as_list(sweep["S"])))
    else:
        raise ConfigError("a sweep needs 'rows' or both 'N' and 'S'")
    grid = [(int(N), int(S), int(k), int(m)) for (N, S), k, m in itertools.product(pairs, ks, ms)]
    for N, S, k, m in grid:
        if not (1 <= S <= N and 1 <= m <= k <= N):
            raise ConfigError(f"invalid bench combination N={N} S={S} k={k} m={m}")
    return grid


def cmd_bench(args) -> int:
    if args.sweep:
        if not os.path.isfile(args.sweep):
            raise ConfigError(f"sweep file {args.sweep!r} not found")
        with open(args.sweep) as fh:
            sweep = json.load(fh)
    elif args.N or args.S:
        if not (args.N and args.S):
            raise ConfigError("--N and --S go together")
        sweep = {"N": _int_list(args.N), "S": _int_list(args.S), "k": _int_list(args.k), "m": _int_list(args.m)}
    else:
        sweep = DEFAULT_SWEEP
    grid = bench_grid(sweep)
    repeats = int(sweep.get("repeats", args.repeats))
    dtype = {"float32": np.float32, "float64": np.float64}[args.dtype]
    seed = args.seed if args.seed is not None else 0
    records = []
    print(f"{'N':>6} {'S':>5} {'k':>3} {'m':>3} {'naive_ms':>10} {'rep_ms':>10} {'ratio':>7}")
    for N, S, k, m in grid:
        rec = bench_attention(N, S, k, m, repeats=repeats, channels=args.channels, batch=args.batch, dtype=dtype, seed=seed)
        records.append(rec)
        fmt = lambda v, spec: "skipped" if v is None else format(v, spec)  # noqa: E731
        print(f"{N:>6} {S:>5} {k:>3} {m:>3} {fmt(rec.naive_ms, '10.2f'):>10} {fmt(rec.rep_ms, '10.2f'):>10} {fmt(rec.ratio, '7.2f'):>7}")
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    write_bench_csv(os.path.join(out, "bench.csv"), records)
    return 0


def cmd_gen_data(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    if args.classes:
        cfg.data.classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    if args.points:
        cfg.data.points_per_cloud = args.points
    if args.per_class is not None:
        cfg.data.train_per_class = args.per_class
    cfg.data.train_dir = cfg.data.test_dir = None
    cfg.validate()
    train, test, names = load_data(cfg)
    out = args.out or cfg.output_dir
    for split, clouds in (("train", train), ("test", test)):
        d = os.path.join(out, split)
        os.makedirs(d, exist_ok=True)
        for i, c in enumerate(clouds):
            save_xyzl(os.path.join(d, f"{names[c.category]}_{i:05d}.xyzl"), c)
    _write_json(os.path.join(out, "dataset.json"), {"classes": names, "train": len(train), "test": len(test),
                                                    "points_per_cloud": cfg.data.points_per_cloud})
    print(f"wrote {len(train)} train and {len(test)} test clouds to {out}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, help="master seed; overrides every seed in the config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--static-graph", action="store_true", help="build every k-NN graph on xyz coordinates")
    common.add_argument("--threads", type=int, help="worker-thread cap (PRA_THREADS also caps)")

    p = argparse.ArgumentParser(prog="pranet", description="Point-cloud region-relation networks on desk-scale data.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a network")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", help="PRAK checkpoint (default: <out>/checkpoint.prak)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("ops", nargs="*", help="op names, or 'all' (default)")
    g.add_argument("--seeds", type=int, default=3, help="number of random instances per op")
    g.add_argument("--max-entries", type=int, default=200, help="sampled coordinates per instance")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", parents=[common], help="naive vs representative attention latency")
    b.add_argument("--sweep", help="JSON sweep: {'N': [...], 'S': [...], 'k': 6, 'm': [1, 4]} or {'rows': [[N, S], ...]}")
    b.add_argument("--N", help="comma-separated point counts")
    b.add_argument("--S", help="comma-separated region counts")
    b.add_argument("--k", default="6", help="comma-separated points per region")
    b.add_argument("--m", default="1,4", help="comma-separated representatives per region")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--channels", type=int, default=256)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset as XYZL files")
    d.add_argument("--classes", help=f"comma-separated subset of {','.join(SHAPES)}")
    d.add_argument("--points", type=int)
    d.add_argument("--per-class", type=int, help="training clouds per class")
    d.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with limited_threads(thread_cap(args.threads)):
            return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
