"""Component ablation on the synthetic classification task.

Five classifier variants are trained with identical data and schedule, each
over several seeds:

    A  SFL only            B  NFL only          C  NFL + SFL, linear sum
    D  NFL + SFL, DFA      E  D plus IRL

Results are cached in a JSON file together with a fingerprint of the code on
the training path, so an interrupted or finished protocol is resumed or
reused instead of retrained.
"""

from __future__ import annotations

import ast
import hashlib
import json
import os
import statistics
import time
from dataclasses import dataclass, field

from . import models
from .params import atomic_write_text
from .trainkit import TrainConfig, fit_network, make_split

VARIANTS = {
    "A_sfl": {"fusion": "sfl", "use_irl": False},
    "B_nfl": {"fusion": "nfl", "use_irl": False},
    "C_linear": {"fusion": "linear", "use_irl": False},
    "D_dfa": {"fusion": "dfa", "use_irl": False},
    "E_dfa_irl": {"fusion": "dfa", "use_irl": True},
}
ORDER = ("A_sfl", "B_nfl", "C_linear", "D_dfa", "E_dfa_irl")
TRAINING_MODULES = ("tensor", "nn", "geometry", "isl", "irl", "models", "params", "trainkit", "ablation")


def _strip_docstrings(tree: ast.AST) -> ast.AST:
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr) \
                and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
    return tree


def code_fingerprint(modules=TRAINING_MODULES) -> str:
    """Hash of the training-path source, insensitive to comments and docstrings."""
    here = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.sha256()
    for name in modules:
        with open(os.path.join(here, f"{name}.py")) as fh:
            tree = _strip_docstrings(ast.parse(fh.read()))
        h.update(name.encode())
        h.update(ast.dump(tree).encode())
    return h.hexdigest()[:16]


@dataclass
class AblationConfig:
    classes: tuple = ("sphere", "cube", "cylinder", "torus")
    n_train: int = 200
    n_test: int = 80
    points: int = 256
    data_seed: int = 0
    seeds: tuple = (0, 1, 2)
    variants: tuple = ORDER
    train: dict = field(default_factory=lambda: {"epochs": 50, "lr": 0.1, "scheduler": "cosine",
                                                 "label_smoothing": 0.2, "batch_size": 32, "eval_every": 50})

    def key(self) -> str:
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}
        return json.dumps(d, sort_keys=True)


def train_variant(variant: str, seed: int, data, cfg: AblationConfig) -> dict:
    (Xtr, ytr, _, _), (Xte, yte, _, _) = data
    spec = models.build_classifier(len(cfg.classes), **VARIANTS[variant])
    store = models.init_params(spec, seed)
    tc = TrainConfig.from_dict({**cfg.train, "seed": seed})
    t0 = time.perf_counter()
    history = fit_network(spec, store, Xtr, ytr, tc, eval_data=(Xte, yte))
    return {"variant": variant, "seed": seed, "val_oa": history[-1]["val_oa"],
            "train_oa": history[-1]["train_oa"], "seconds": time.perf_counter() - t0}


def load_results(path: str, cfg: AblationConfig) -> list[dict]:
    """Cached runs matching both the protocol and the current code, else []."""
    if not os.path.isfile(path):
        return []
    with open(path) as fh:
        cached = json.load(fh)
    if cached.get("fingerprint") != code_fingerprint() or cached.get("config") != cfg.key():
        return []
    return cached["runs"]


def run_protocol(path: str, cfg: AblationConfig | None = None, log=None) -> list[dict]:
    """Train every (variant, seed) not yet in the cache at ``path``; returns all runs."""
    cfg = cfg or AblationConfig()
    runs = load_results(path, cfg)
    done = {(r["variant"], r["seed"]) for r in runs}
    data = make_split(cfg.classes, cfg.n_train, cfg.n_test, cfg.points, seed=cfg.data_seed)
    for seed in cfg.seeds:
        for v in cfg.variants:
            if (v, seed) in done:
                continue
            r = train_variant(v, seed, data, cfg)
            runs.append(r)
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            atomic_write_text(path, json.dumps({"fingerprint": code_fingerprint(), "config": cfg.key(),
                                                "runs": runs}, indent=1) + "\n")
            if log is not None:
                log(r)
    return runs


def summarize(runs: list[dict], variants=ORDER) -> dict:
    """Median test OA per variant plus the ordering verdict.

    The ordering requires A < B < C < D <= E on the medians.
    """
    med = {v: statistics.median(r["val_oa"] for r in runs if r["variant"] == v) for v in variants}
    vals = [med[v] for v in variants]
    strict = all(a < b for a, b in zip(vals[:-2], vals[1:-1]))
    ordered = strict and vals[-2] <= vals[-1]
    return {"median_oa": med, "ordered": ordered, "total_seconds": sum(r["seconds"] for r in runs)}


def main() -> None:  # pragma: no cover - long-running entry point
    import sys

    path = sys.argv[1] if len(sys.argv) > 1 else "ablation_results.json"
    runs = run_protocol(path, log=lambda r: print(json.dumps(r), flush=True))
    print(json.dumps(summarize(runs), indent=1))


if __name__ == "__main__":  # pragma: no cover
    main()
