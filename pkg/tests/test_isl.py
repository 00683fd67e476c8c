import numpy as np
import pytest

import oracles
from pranet import nn
from pranet import tensor as tn
from pranet.exceptions import DimensionError
from pranet.geometry import knn
from pranet.isl import (
    IslConfig,
    batched_knn,
    dfa_fuse,
    dfa_gate,
    dfa_hidden,
    edge_features,
    init_isl,
    isl_forward,
    nfl_forward,
)
from pranet.params import ParameterStore


def nfl_instance(seed, widths=(5,)):
    rng = np.random.default_rng(seed)
    n, k, c = int(rng.integers(6, 12)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    cfg = IslConfig(k, list(widths), fusion="nfl")
    store = ParameterStore()
    init_isl(store, "s", c, cfg, rng)
    layers = []
    for i, w in enumerate(widths):
        p = f"s/mlp1.{i}"
        # signed gammas exercise both monotone directions of the fused max
        store[f"{p}.bn.gamma"].data[:] = rng.normal(size=w)
        store[f"{p}.bn.beta"].data[:] = rng.normal(size=w)
        store[f"{p}.bn.running_mean"][:] = rng.normal(size=w)
        store[f"{p}.bn.running_var"][:] = rng.uniform(0.5, 2.0, size=w)
        layers.append({
            "W": store[f"{p}.W"].data.copy(),
            "b": store[f"{p}.b"].data.copy(),
            "gamma": store[f"{p}.bn.gamma"].data.copy(),
            "beta": store[f"{p}.bn.beta"].data.copy(),
            "running_mean": store[f"{p}.bn.running_mean"].copy(),
            "running_var": store[f"{p}.bn.running_var"].copy(),
        })
    F = rng.normal(size=(n, c))
    nbr = rng.integers(0, n, size=(n, k))
    return F, nbr, store, cfg, layers


@pytest.mark.parametrize("training", [False, True])
@pytest.mark.parametrize("fused", [True, False])
def test_nfl_matches_naive_oracle(training, fused):
    for seed in range(20):
        F, nbr, store, cfg, layers = nfl_instance(seed)
        out = nfl_forward(tn.Tensor(F), nbr, store, "s", cfg, nn.Context(training=training), fused=fused)
        ref = oracles.nfl(F, nbr, layers, training)
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-10)


def test_nfl_two_layer_matches_oracle():
    for seed in range(5):
        F, nbr, store, cfg, layers = nfl_instance(seed, widths=(4, 3))
        out = nfl_forward(tn.Tensor(F), nbr, store, "s", cfg, nn.Context())
        np.testing.assert_allclose(out.data, oracles.nfl(F, nbr, layers, False), atol=1e-10)


def test_fused_and_unfused_gradients_agree():
    F, nbr, store, cfg, _ = nfl_instance(3)
    R = np.random.default_rng(0).normal(size=(F.shape[0], 5))
    grads = []
    for fused in (True, False):
        x = tn.Tensor(F, requires_grad=True)
        store.zero_grad()
        out = nfl_forward(x, nbr, store, "s", cfg, nn.Context(training=True), fused=fused)
        tn.backward(tn.reduce("sum", tn.reduce("sum", tn.mul(out, R), 1), 0))
        grads.append([x.grad] + [t.grad for t in store.parameters()])
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_nfl_invariant_to_neighbour_order():
    F, nbr, store, cfg, _ = nfl_instance(7)
    perm = np.random.default_rng(1).permutation(nbr.shape[1])
    a = nfl_forward(tn.Tensor(F), nbr, store, "s", cfg, nn.Context()).data
    b = nfl_forward(tn.Tensor(F), nbr[:, perm], store, "s", cfg, nn.Context()).data
    np.testing.assert_array_equal(a, b)


def test_edge_features_are_differences(rng):
    F = rng.normal(size=(5, 2))
    nbr = knn(rng.normal(size=(5, 3)), 3)
    E = edge_features(tn.Tensor(F), nbr).data
    for i in range(5):
        for j in range(3):
            np.testing.assert_array_equal(E[i, j], F[i] - F[nbr.idx[i, j]])
    np.testing.assert_array_equal(E[:, 0], 0.0)


def test_edge_features_row_mismatch():
    with pytest.raises(DimensionError):
        edge_features(tn.Tensor(np.ones((4, 2))), np.zeros((3, 2), dtype=int))


def dfa_store(c, rng):
    store = ParameterStore()
    init_isl(store, "s", c, IslConfig(2, [c], fusion="dfa"), rng)
    return store


def test_dfa_output_is_convex_combination(rng):
    c = 8
    store = dfa_store(c, rng)
    T1, T2 = rng.normal(size=(20, c)), rng.normal(size=(20, c))
    out = dfa_fuse(tn.Tensor(T1), tn.Tensor(T2), store, "s", nn.Context()).data
    lo, hi = np.minimum(T1, T2), np.maximum(T1, T2)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)
    w = dfa_gate(tn.Tensor(T1), tn.Tensor(T2), store, "s", nn.Context()).data
    np.testing.assert_allclose(out, w * T1 + (1 - w) * T2, atol=1e-14)
    assert store["s/dfa.0.W"].shape == (c, dfa_hidden(c)) == (8, 2)


def test_dfa_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        dfa_fuse(tn.Tensor(np.ones((3, 4))), tn.Tensor(np.ones((3, 5))), dfa_store(4, rng), "s", nn.Context())


@pytest.mark.parametrize("fusion,expected", [
    ("sfl", {"mlp2"}), ("nfl", {"mlp1"}), ("linear", {"mlp1", "mlp2"}), ("dfa", {"mlp1", "mlp2", "dfa"}),
])
def test_fusion_variants_own_the_right_parameters(fusion, expected, rng):
    store = ParameterStore()
    init_isl(store, "s", 3, IslConfig(4, [8], fusion=fusion), rng)
    groups = {name.split("/")[1].split(".")[0] for name in store.names()}
    assert groups == expected
    F = tn.Tensor(rng.normal(size=(10, 3)))
    out = isl_forward(F, knn(F.data, 4), store, "s", IslConfig(4, [8], fusion=fusion), nn.Context())
    assert out.shape == (10, 8)


def test_linear_fusion_is_sum(rng):
    store = ParameterStore()
    cfg = IslConfig(3, [6], fusion="linear")
    init_isl(store, "s", 3, cfg, rng)
    F = tn.Tensor(rng.normal(size=(9, 3)))
    nbr = knn(F.data, 3)
    out = isl_forward(F, nbr, store, "s", cfg, nn.Context()).data
    t1 = nfl_forward(F, nbr, store, "s", cfg, nn.Context()).data
    t2 = nn.mlp(F, store, "s/mlp2", 1, nn.Context()).data
    np.testing.assert_allclose(out, t1 + t2, atol=1e-14)


def test_batched_knn_offsets_rows(rng):
    P = rng.normal(size=(2, 10, 3))
    idx = batched_knn(P, 4)
    assert idx.shape == (20, 4)
    np.testing.assert_array_equal(idx[:10], knn(P[0], 4).idx)
    np.testing.assert_array_equal(idx[10:], knn(P[1], 4).idx + 10)


def test_isl_config_validation():
    with pytest.raises(ValueError):
        IslConfig(0)
    with pytest.raises(ValueError):
        IslConfig(4, fusion="concat")
    assert IslConfig(20, [64, 64]).notation() == "ISL(20, [64, 64])"
