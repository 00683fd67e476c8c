"""Intra-region structure learning.

Three branches per point: a neighbour branch (edge differences through a
shared MLP, max over the neighbourhood), a self branch (the same widths
applied pointwise) and a learned sigmoid gate mixing the two.

Feature matrices are ``(rows, C)``; a batch of clouds is simply stacked
along the rows, with neighbour tables holding global row numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import nn
from . import tensor as tn
from .exceptions import DimensionError, DomainError
from .geometry import NeighborIndex, knn
from .params import ParameterStore
from .tensor import Tensor

FUSIONS = ("dfa", "linear", "nfl", "sfl")


@dataclass
class IslConfig:
    k_hat: int
    mlp_widths: list[int] = field(default_factory=lambda: [64])
    leaky_slope: float = 0.2
    fusion: str = "dfa"

    def __post_init__(self):
        self.mlp_widths = [int(w) for w in self.mlp_widths]
        if self.k_hat < 1 or not self.mlp_widths or min(self.mlp_widths) < 1:
            raise ValueError(f"invalid ISL config k_hat={self.k_hat} widths={self.mlp_widths}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")

    @property
    def out_channels(self) -> int:
        return self.mlp_widths[-1]

    def notation(self) -> str:
        return f"ISL({self.k_hat}, [{', '.join(map(str, self.mlp_widths))}])"


def dfa_hidden(c: int) -> int:
    return max(1, c // 4)


def init_isl(store: ParameterStore, prefix: str, c_in: int, cfg: IslConfig, rng: np.random.Generator) -> None:
    if cfg.fusion != "sfl":
        nn.init_mlp(store, f"{prefix}/mlp1", c_in, cfg.mlp_widths, rng)
    if cfg.fusion != "nfl":
        nn.init_mlp(store, f"{prefix}/mlp2", c_in, cfg.mlp_widths, rng)
    if cfg.fusion == "dfa":
        c = cfg.out_channels
        h = dfa_hidden(c)
        nn.init_block(store, f"{prefix}/dfa.0", c, h, rng)
        nn.init_linear(store, f"{prefix}/dfa.1", h, c, rng)


def _table(nbr) -> np.ndarray:
    return nbr.idx if isinstance(nbr, NeighborIndex) else np.asarray(nbr)


def edge_features(F: Tensor, nbr) -> Tensor:
    """``out[i, j] = F[i] - F[nbr[i, j]]`` as a (rows, k, C) tensor."""
    idx = _table(nbr)
    if idx.shape[0] != F.shape[0]:
        raise DimensionError(f"neighbour table has {idx.shape[0]} rows, features have {F.shape[0]}")
    centre = np.repeat(np.arange(idx.shape[0]), idx.shape[1]).reshape(idx.shape)
    return tn.sub(tn.gather(F, centre), tn.gather(F, idx))


def _selected_neighbours(H: np.ndarray, idx: np.ndarray, sign: np.ndarray):
    """Per channel c, the neighbour minimising ``sign[c] * H[idx[i, j], c]`` over j.

    Returns the selected values of ``H`` and their first-occurrence positions j.
    """
    Hs = H * sign
    lo = Hs[idx[:, 0]]
    for j in range(1, idx.shape[1]):
        np.minimum(lo, Hs[idx[:, j]], out=lo)
    at = np.zeros(lo.shape, dtype=np.intp)
    for j in range(idx.shape[1] - 1, 0, -1):
        at[Hs[idx[:, j]] == lo] = j
    at[Hs[idx[:, 0]] == lo] = 0
    return lo * sign, at


def edge_max_block(H: Tensor, idx: np.ndarray, b: Tensor, gamma: Tensor, beta: Tensor,
                   running_mean: np.ndarray, running_var: np.ndarray, ctx: nn.Context,
                   slope: float = 0.2, eps: float = tn.BN_EPS) -> Tensor:
    """``max_j leaky(bn(H[i] - H[idx[i, j]] + b))`` without building the edge tensor.

    leaky(bn(.)) is monotone per channel (increasing where gamma/sigma >= 0,
    decreasing otherwise), so the max sits on the edge with the smallest
    (resp. largest) neighbour projection. Batch statistics over all N*k edges
    come from the neighbour adjacency matrix.
    """
    Hd, bd, G, Bt = H.data, b.data, gamma.data, beta.data
    n, k = idx.shape
    M = n * k
    flat = idx.reshape(-1)
    training = ctx.training
    if training:
        if M < 2:
            raise DomainError("batchnorm in train mode needs at least 2 rows")
        adj = sp.csr_matrix((np.ones(M, dtype=Hd.dtype), (np.repeat(np.arange(n), k), flat)), shape=(n, n))
        AH = np.asarray(adj @ Hd)
        cnt = np.bincount(flat, minlength=n).astype(Hd.dtype)
        sum_h = Hd.sum(axis=0)
        cnt_h = cnt @ Hd
        mean_d = (k * sum_h - cnt_h) / M
        sq = k * np.einsum("ij,ij->j", Hd, Hd) - 2.0 * np.einsum("ij,ij->j", Hd, AH) + cnt @ (Hd * Hd)
        var = np.maximum(sq / M - mean_d * mean_d, 0.0)
        mu = mean_d + bd
        running_mean *= ctx.bn_momentum
        running_mean += (1.0 - ctx.bn_momentum) * mu
        running_var *= ctx.bn_momentum
        running_var += (1.0 - ctx.bn_momentum) * var * (M / (M - 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    a = G * inv
    # increasing channels peak at the smallest neighbour projection, decreasing at the largest
    h_sel, at = _selected_neighbours(Hd, idx, np.where(a >= 0, 1.0, -1.0).astype(Hd.dtype))
    xhat = (Hd - h_sel + bd - mu) * inv
    y = xhat * G + Bt
    neg = y <= 0
    tn.note_branch(at)
    tn.note_branch(neg)
    sl = y.dtype.type(slope)
    out = y.copy()
    np.multiply(out, sl, out=out, where=neg)

    def back(g):
        gy = g.copy()
        np.multiply(gy, sl, out=gy, where=neg)
        dgamma = np.einsum("ij,ij->j", gy, xhat)
        dbeta = gy.sum(axis=0)
        dx = gy * G
        de = dx * inv
        nsel = idx[np.arange(n)[:, None], at]
        C = Hd.shape[1]
        scat = np.bincount((nsel * C + np.arange(C)).reshape(-1), weights=de.reshape(-1), minlength=n * C)
        dH = de - scat.reshape(n, C).astype(Hd.dtype)
        db = de.sum(axis=0)
        if training:
            s1 = dx.sum(axis=0)
            s2 = np.einsum("ij,ij->j", dx, xhat)
            c = inv / M
            shift = bd - mu
            dH -= c * (k * s1 + s2 * inv * (k * (Hd + shift) - AH))
            AtH = np.asarray(adj.T @ Hd)
            dH += c * (cnt[:, None] * s1 + s2 * inv * (AtH + cnt[:, None] * (shift - Hd)))
            total_e = k * sum_h - cnt_h + M * bd
            db = db - inv * s1 - c * s2 * inv * (total_e - M * mu)
        return dH, db, dgamma, dbeta

    return tn.make_node(out, (H, b, gamma, beta), back)


def nfl_forward(F: Tensor, nbr, store: ParameterStore, prefix: str, cfg: IslConfig, ctx: nn.Context,
                fused: bool = True) -> Tensor:
    idx = _table(nbr)
    rows, k = idx.shape
    if rows != F.shape[0]:
        raise DimensionError(f"neighbour table has {rows} rows, features have {F.shape[0]}")
    # first layer is affine, so (F_i - F_j) W + b == (F W)_i - (F W)_j + b; project before gathering
    H = tn.matmul(F, store[f"{prefix}/mlp1.0.W"])
    if fused and len(cfg.mlp_widths) == 1:
        p = f"{prefix}/mlp1.0"
        return edge_max_block(H, idx, store[f"{p}.b"], store[f"{p}.bn.gamma"], store[f"{p}.bn.beta"],
                              store[f"{p}.bn.running_mean"], store[f"{p}.bn.running_var"], ctx, cfg.leaky_slope)
    centre = np.repeat(np.arange(rows), k)
    E = tn.sub(tn.gather(H, centre), tn.gather(H, idx.reshape(-1)))
    E = tn.add(E, store[f"{prefix}/mlp1.0.b"])
    E = tn.leaky_relu(nn.bn(E, store, f"{prefix}/mlp1.0.bn", ctx), cfg.leaky_slope)
    for i in range(1, len(cfg.mlp_widths)):
        E = nn.block(E, store, f"{prefix}/mlp1.{i}", ctx, cfg.leaky_slope)
    E = tn.reshape(E, (rows, k, cfg.out_channels))
    return tn.reduce("max", E, axis=1)


def sfl_forward(F: Tensor, store: ParameterStore, prefix: str, cfg: IslConfig, ctx: nn.Context) -> Tensor:
    return nn.mlp(F, store, f"{prefix}/mlp2", len(cfg.mlp_widths), ctx, cfg.leaky_slope)


def dfa_gate(T1: Tensor, T2: Tensor, store: ParameterStore, prefix: str, ctx: nn.Context, slope: float = 0.2) -> Tensor:
    z = tn.add(T1, T2)
    h = nn.block(z, store, f"{prefix}/dfa.0", ctx, slope)
    return tn.sigmoid(nn.linear(h, store, f"{prefix}/dfa.1"))


def dfa_fuse(T1: Tensor, T2: Tensor, store: ParameterStore, prefix: str, ctx: nn.Context, slope: float = 0.2) -> Tensor:
    if T1.shape != T2.shape:
        raise DimensionError(f"cannot fuse {T1.shape} with {T2.shape}")
    w = dfa_gate(T1, T2, store, prefix, ctx, slope)
    return tn.add(tn.mul(w, T1), tn.mul(tn.sub(1.0, w), T2))


def isl_forward(F: Tensor, nbr, store: ParameterStore, prefix: str, cfg: IslConfig, ctx: nn.Context) -> Tensor:
    if cfg.fusion == "sfl":
        return sfl_forward(F, store, prefix, cfg, ctx)
    t1 = nfl_forward(F, nbr, store, prefix, cfg, ctx)
    if cfg.fusion == "nfl":
        return t1
    t2 = sfl_forward(F, store, prefix, cfg, ctx)
    if cfg.fusion == "linear":
        return tn.add(t1, t2)
    return dfa_fuse(t1, t2, store, prefix, ctx, cfg.leaky_slope)


def batched_knn(points: np.ndarray, k: int, metric: str = "exact") -> np.ndarray:
    """Per-cloud k-NN over a (B, N, D) array, returned as global row numbers (B*N, k)."""
    B, N, _ = points.shape
    out = np.empty((B * N, k), dtype=np.intp)
    for b in range(B):
        out[b * N : (b + 1) * N] = knn(points[b], k, metric=metric).idx + b * N
    return out
