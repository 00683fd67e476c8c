"""Layer helpers shared by the ISL/IRL modules and the network heads.

Layers are plain functions over a :class:`ParameterStore` and a name prefix;
there is no module object hierarchy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .params import ParameterStore
from .tensor import Tensor


@dataclass
class Context:
    """Per-forward switches: train/eval, batch-norm momentum, dropout rng.

    ``cache`` lets a caller freeze the discrete graph structure (k-NN tables,
    partitions) of a first forward pass and replay it on later passes, which
    is what finite-difference checks need.
    """

    training: bool = False
    bn_momentum: float = 0.9
    rng: np.random.Generator | None = None
    cache: dict | None = None
    record: dict | None = None
    static_graph: bool = False

    def cached(self, key: str, compute):
        if self.cache is None:
            return compute()
        if key not in self.cache:
            self.cache[key] = compute()
        return self.cache[key]


def init_linear(store: ParameterStore, prefix: str, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True):
    bound = 1.0 / np.sqrt(c_in)
    store.add(f"{prefix}.W", rng.uniform(-bound, bound, size=(c_in, c_out)))
    if bias:
        store.add(f"{prefix}.b", rng.uniform(-bound, bound, size=(c_out,)))


def init_bn(store: ParameterStore, prefix: str, c: int) -> None:
    store.add(f"{prefix}.gamma", np.ones(c))
    store.add(f"{prefix}.beta", np.zeros(c))
    store.add(f"{prefix}.running_mean", np.zeros(c))
    store.add(f"{prefix}.running_var", np.ones(c))


def linear(x: Tensor, store: ParameterStore, prefix: str) -> Tensor:
    out = tn.matmul(x, store[f"{prefix}.W"])
    if f"{prefix}.b" in store:
        out = tn.add(out, store[f"{prefix}.b"])
    return out


def bn(x: Tensor, store: ParameterStore, prefix: str, ctx: Context) -> Tensor:
    return tn.batchnorm(
        x,
        store[f"{prefix}.gamma"],
        store[f"{prefix}.beta"],
        store[f"{prefix}.running_mean"],
        store[f"{prefix}.running_var"],
        training=ctx.training,
        momentum=ctx.bn_momentum,
    )


def init_block(store: ParameterStore, prefix: str, c_in: int, c_out: int, rng: np.random.Generator) -> None:
    init_linear(store, prefix, c_in, c_out, rng)
    init_bn(store, f"{prefix}.bn", c_out)


def block(x: Tensor, store: ParameterStore, prefix: str, ctx: Context, slope: float = 0.2) -> Tensor:
    """linear -> batchnorm -> leaky ReLU"""
    return tn.leaky_relu(bn(linear(x, store, prefix), store, f"{prefix}.bn", ctx), slope)


def init_mlp(store: ParameterStore, prefix: str, c_in: int, widths, rng) -> None:
    for i, w in enumerate(widths):
        init_block(store, f"{prefix}.{i}", c_in, w, rng)
        c_in = w


def mlp(x: Tensor, store: ParameterStore, prefix: str, n_layers: int, ctx: Context, slope: float = 0.2) -> Tensor:
    for i in range(n_layers):
        x = block(x, store, f"{prefix}.{i}", ctx, slope)
    return x


def repeat_rows(x: Tensor, times: int) -> Tensor:
    """Row ``b`` of ``x`` repeated ``times`` times consecutively (differentiable)."""
    return tn.gather(x, np.repeat(np.arange(x.shape[0]), times))
