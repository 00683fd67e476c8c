"""Finite-difference gradient checks for every differentiable operation.

Each named check builds a small random instance, contracts the output with a
fixed random weight tensor ``R`` (loss = sum(out * R)) and compares the
backward pass against central differences on at most ``max_entries``
sampled coordinates. Discrete structure (k-NN tables, region partitions,
interpolation anchors) is computed once and frozen through a context cache,
so both sides see the same graph.

The error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``. Coordinates
whose perturbation crosses a kink of a piecewise-linear op are replaced by
fresh samples (see :func:`check_gradients`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import isl, irl, models, nn
from . import tensor as tn
from .geometry import knn
from .params import ParameterStore
from .tensor import Tensor
from .trainkit import binary_cross_entropy, smoothed_cross_entropy

STEP = 1e-5
THRESHOLD = 1e-4
FLOOR = 1e-3
DEFAULT_SEEDS = (0, 1, 2)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    entries: int
    seeds: tuple
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < THRESHOLD


def _leaf(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(fn, leaves: list[Tensor], rng: np.random.Generator, max_entries: int = 200, step: float = STEP):
    """Compare analytic and central-difference gradients of ``sum(fn() * R)``.

    Returns (max relative error, coordinates checked, coordinates skipped).
    A coordinate is skipped, and another drawn in its place, when one of the
    two perturbed evaluations switches a leaky-ReLU sign or a max position:
    the difference quotient then straddles a kink and measures nothing.
    """
    with tn.record_branches() as base:
        out = fn()
    R = rng.standard_normal(out.shape)
    for t in leaves:
        t.grad = None
    tn.backward(tn.reduce("sum", tn.reshape(tn.mul(out, Tensor(R)), (out.data.size,)), axis=0))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]

    sizes = np.array([t.data.size for t in leaves])
    starts = np.concatenate([[0], np.cumsum(sizes)])
    order = rng.permutation(int(starts[-1]))

    def loss():
        with tn.no_grad(), tn.record_branches() as br:
            val = float((fn().data * R).sum())
        return val, br

    a_vals, n_vals, skipped = [], [], 0
    for flat_pos in order:
        if len(a_vals) >= max_entries or skipped >= 2 * max_entries:
            break
        i = int(np.searchsorted(starts, flat_pos, side="right") - 1)
        j = int(flat_pos - starts[i])
        flat = leaves[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up, br_up = loss()
        flat[j] = orig - step
        down, br_down = loss()
        flat[j] = orig
        if not (_same_branches(base, br_up) and _same_branches(base, br_down)):
            skipped += 1
            continue
        n_vals.append((up - down) / (2 * step))
        a_vals.append(analytic[i].reshape(-1)[j])
    err = relative_errors(np.array(a_vals), np.array(n_vals))
    return (float(err.max()) if err.size else 0.0), len(a_vals), skipped


# ------------------------------------------------------------------ instances
# Every builder takes a seed and returns (fn, leaves).


def _matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    return lambda: tn.matmul(a, b), [a, b]


def _bmm(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 5, 4)
    return lambda: tn.bmm(a, b, transpose_b=True), [a, b]


def _add(rng):
    a, b = _leaf(rng, 4, 3), _leaf(rng, 3)
    return lambda: tn.add(a, b), [a, b]


def _sub(rng):
    a, b = _leaf(rng, 4, 3), _leaf(rng, 4, 3)
    return lambda: tn.sub(a, b), [a, b]


def _hadamard(rng):
    a, b = _leaf(rng, 4, 3), _leaf(rng, 4, 3)
    return lambda: tn.mul(a, b), [a, b]


def _scale(rng):
    a = _leaf(rng, 4, 3)
    c = rng.uniform(-2, 2)
    return lambda: tn.scale(a, c), [a]


def _sigmoid(rng):
    a = _leaf(rng, 5, 3, lo=-4, hi=4)
    return lambda: tn.sigmoid(a), [a]


def _leaky(rng):
    a = _leaf(rng, 5, 4)
    return lambda: tn.leaky_relu(a, 0.2), [a]


def _reduce(kind):
    def build(rng):
        a = _leaf(rng, 4, 5, 3)
        return lambda: tn.reduce(kind, a, axis=1), [a]

    return build


def _softmax(rng):
    a = _leaf(rng, 4, 6, lo=-3, hi=3)
    return lambda: tn.softmax_rows(a), [a]


def _log_softmax(rng):
    a = _leaf(rng, 4, 6, lo=-3, hi=3)
    return lambda: tn.log_softmax(a), [a]


def _gather(rng):
    a = _leaf(rng, 3, 4)
    idx = np.array([[2, 1], [0, 0], [2, 2]])
    return lambda: tn.gather(a, idx), [a]


def _weighted_gather(rng):
    a = _leaf(rng, 5, 3)
    idx = rng.integers(0, 5, size=(6, 3))
    w = rng.random((6, 3))
    return lambda: tn.weighted_gather(a, idx, w / w.sum(1, keepdims=True)), [a]


def _scale_rows(rng):
    a, s = _leaf(rng, 5, 3), _leaf(rng, 5)
    return lambda: tn.scale_rows(a, s), [a, s]


def _concat(rng):
    a, b = _leaf(rng, 4, 2), _leaf(rng, 4, 3)
    return lambda: tn.concat([a, b], axis=-1), [a, b]


def _batchnorm(training):
    def build(rng):
        x, g, b = _leaf(rng, 6, 3), _leaf(rng, 3, lo=0.5, hi=1.5), _leaf(rng, 3)
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, 3)

        def fn():
            return tn.batchnorm(x, g, b, rm.copy(), rv.copy(), training=training)

        return fn, [x, g, b]

    return build


def _dropout(rng):
    a = _leaf(rng, 6, 4)
    seed = int(rng.integers(1 << 30))
    return lambda: tn.dropout(a, 0.5, np.random.default_rng(seed), True), [a]


def _small_cloud(rng, n=12):
    return rng.uniform(-1, 1, size=(n, 3))


def _isl_case(fusion, widths=(6,), fused=True, training=True):
    def build(rng):
        X = _small_cloud(rng)
        F = _leaf(rng, len(X), 4)
        cfg = isl.IslConfig(4, list(widths), fusion=fusion)
        store = ParameterStore()
        isl.init_isl(store, "isl", 4, cfg, rng)
        # generic (non-unit) batch-norm affine parameters, including negative scales
        for name, t in store.named_parameters():
            if name.endswith(".gamma"):
                t.data[:] = rng.uniform(-1.5, 1.5, t.shape)
            elif name.endswith(".beta"):
                t.data[:] = rng.uniform(-0.5, 0.5, t.shape)
        for name in list(store.buffers()):
            if name.endswith("running_var"):
                store.buffers()[name][:] = rng.uniform(0.5, 2.0, store.buffers()[name].shape)
        nbr = knn(X, 4)

        def fn():
            ctx = nn.Context(training=training)
            if fusion == "nfl":
                return isl.nfl_forward(F, nbr, store, "isl", cfg, ctx, fused=fused)
            return isl.isl_forward(F, nbr, store, "isl", cfg, ctx)

        return fn, [F] + store.parameters()

    return build


def _edge_features(rng):
    X = _small_cloud(rng, 8)
    F = _leaf(rng, 8, 3)
    nbr = knn(X, 3)
    return lambda: isl.edge_features(F, nbr), [F]


def _dfa(rng):
    T1, T2 = _leaf(rng, 10, 8), _leaf(rng, 10, 8)
    store = ParameterStore()
    nn.init_block(store, "x/dfa.0", 8, 2, rng)
    nn.init_linear(store, "x/dfa.1", 2, 8, rng)
    return lambda: isl.dfa_fuse(T1, T2, store, "x", nn.Context(training=True)), [T1, T2] + store.parameters()


def _region_scaling(rng):
    X = _small_cloud(rng, 16)
    T, s = _leaf(rng, 16, 3), _leaf(rng, 16)
    part = irl.partition_dilated_top_s(s.data, X, 4, 3)
    return lambda: irl.scale_region_features(T, s, part), [T, s]


def _slot_attention(rng):
    G = _leaf(rng, 2, 5, 4)
    store = ParameterStore()
    irl.init_irl(store, "a", 4, rng)
    return lambda: irl.slot_attention(G, store, "a"), [G] + [store[f"a/attn.{w}"] for w in ("Wq", "Wk", "Wv", "Wz")]


def _interpolation(rng):
    T, Gh = _leaf(rng, 10, 3), _leaf(rng, 6, 3)
    pts = _small_cloud(rng, 10)
    anchors = np.concatenate([pts[:2], _small_cloud(rng, 4)])  # includes exact matches
    return lambda: irl.interpolate_residual(T, Gh, anchors, pts), [T, Gh]


def _irl_case(m=2, **kw):
    def build(rng):
        B, N, C = 2, 16, 4
        coords = rng.uniform(-1, 1, size=(B, N, 3))
        T = _leaf(rng, B * N, C)
        cfg = irl.IrlConfig(S=4, k=4, m=m, **kw)
        store = ParameterStore()
        irl.init_irl(store, "irl", C, rng)
        cache: dict = {}

        def fn():
            return irl.irl_forward(T, coords, cfg, store, "irl", nn.Context(cache=cache))

        return fn, [T] + store.parameters()

    return build


def _network(kind):
    def build(rng):
        N = 32 if kind != "partseg" else 64
        X = rng.uniform(-1, 1, size=(2, N, 3))
        if kind == "classifier":
            spec = models.build_classifier(3)
        elif kind == "keypoint":
            spec = models.build_keypoint_net(1)
        else:
            spec = models.build_partseg_net(4, 2)
        store = models.init_params(spec, int(rng.integers(1 << 30)))
        cache: dict = {}
        cats = np.array([0, 1]) if kind == "partseg" else None
        seed = int(rng.integers(1 << 30))

        def fn():
            ctx = nn.Context(training=True, cache=cache, rng=np.random.default_rng(seed))
            return models.forward(spec, store, X, mode="train", categories=cats, ctx=ctx)[0]

        return fn, store.parameters()

    return build


def _cross_entropy(rng):
    z = _leaf(rng, 5, 4, lo=-2, hi=2)
    y = rng.integers(0, 4, 5)
    return lambda: tn.reshape(smoothed_cross_entropy(z, y, 0.2), (1,)), [z]


def _bce(rng):
    z = _leaf(rng, 6, 1, lo=-2, hi=2)
    y = rng.integers(0, 2, 6)
    return lambda: tn.reshape(binary_cross_entropy(z, y, 2.0), (1,)), [z]


CHECKS = {
    "matmul": _matmul,
    "bmm": _bmm,
    "add": _add,
    "sub": _sub,
    "hadamard": _hadamard,
    "scale": _scale,
    "sigmoid": _sigmoid,
    "leaky_relu": _leaky,
    "reduce_max": _reduce("max"),
    "reduce_mean": _reduce("mean"),
    "reduce_sum": _reduce("sum"),
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "gather": _gather,
    "weighted_gather": _weighted_gather,
    "scale_rows": _scale_rows,
    "concat": _concat,
    "batchnorm_train": _batchnorm(True),
    "batchnorm_eval": _batchnorm(False),
    "dropout": _dropout,
    "smoothed_cross_entropy": _cross_entropy,
    "binary_cross_entropy": _bce,
    "edge_features": _edge_features,
    "nfl": _isl_case("nfl"),
    "nfl_eval": _isl_case("nfl", training=False),
    "nfl_unfused": _isl_case("nfl", fused=False),
    "nfl_deep": _isl_case("nfl", widths=(5, 6)),
    "sfl": _isl_case("sfl"),
    "dfa_fuse": _dfa,
    "isl_forward": _isl_case("dfa"),
    "isl_linear": _isl_case("linear"),
    "scale_region_features": _region_scaling,
    "slot_attention": _slot_attention,
    "interpolate_residual": _interpolation,
    "irl_forward": _irl_case(),
    "irl_naive": _irl_case(attention="naive"),
    "irl_maxpool": _irl_case(sampler="maxpool", m=1),
    "irl_meanpool": _irl_case(sampler="meanpool", m=1),
    "irl_top_s": _irl_case(partition="top_s"),
    "irl_fps": _irl_case(partition="fps", sampler="random"),
    "classifier": _network("classifier"),
    "keypoint_net": _network("keypoint"),
    "partseg_net": _network("partseg"),
}


# Whole keypoint and part-segmentation networks take minutes each; they are
# available by name but left out of the default suite.
EXTENDED = ("keypoint_net", "partseg_net")
SUITE = tuple(n for n in CHECKS if n not in EXTENDED)


def run_check(name: str, seeds=DEFAULT_SEEDS, max_entries: int = 200) -> CheckResult:
    if name not in CHECKS:
        raise KeyError(name)
    worst, total, skipped = 0.0, 0, 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        fn, leaves = CHECKS[name](rng)
        err, n, sk = check_gradients(fn, leaves, rng, max_entries)
        worst, total, skipped = max(worst, err), total + n, skipped + sk
    return CheckResult(name, worst, total, tuple(seeds), skipped)


def run_suite(names=None, seeds=DEFAULT_SEEDS, max_entries: int = 200, report=None) -> list[CheckResult]:
    results = []
    for name in names or SUITE:
        r = run_check(name, seeds, max_entries)
        if report is not None:
            report(r)
        results.append(r)
    return results
