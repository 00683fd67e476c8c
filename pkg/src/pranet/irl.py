"""Inter-region relation learning.

Pipeline per cloud: score every point, pick ``S`` region centroids from the
score ranking, take each centroid's ``k`` nearest points as its region,
scale region features by the centroid score (this is what carries gradient
into the scorer), keep ``m`` representatives per region, run single-head
self-attention across regions separately for each representative slot, and
interpolate the attended features back onto every point as a residual.

Attention logits are raw dot products with no ``1/sqrt(C)`` factor, so the
query/key projections are initialised small to keep early logits O(1).
"""

from __future__ import annotations

import csv
import io
import os
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as tn
from .exceptions import DimensionError, DomainError
from .geometry import idw_weights_from_sq, knn, fps, pairwise_sq_dist, smallest_k
from .params import ParameterStore
from .tensor import Tensor

PARTITIONS = ("dilated_top_s", "top_s", "fps")
SAMPLERS = ("knn_based", "random", "maxpool", "meanpool")
ATTENTIONS = ("representative", "naive")


@dataclass
class IrlConfig:
    S: int
    k: int
    m: int
    partition: str = "dilated_top_s"
    sampler: str = "knn_based"
    seed: int = 0
    attention: str = "representative"
    enabled: bool = True

    def __post_init__(self):
        if self.S < 1 or self.k < 1 or not 1 <= self.m <= self.k:
            raise ValueError(f"invalid IRL sizes S={self.S} k={self.k} m={self.m}")
        if self.partition not in PARTITIONS:
            raise ValueError(f"partition must be one of {PARTITIONS}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.sampler in ("maxpool", "meanpool") and self.m != 1:
            raise ValueError("pooling samplers produce one representative (m == 1)")
        if self.attention not in ATTENTIONS:
            raise ValueError(f"attention must be one of {ATTENTIONS}")

    def notation(self) -> str:
        return f"IRL({self.S}, {self.k}, {self.m})"

    def fitted_to(self, n: int) -> "IrlConfig":
        """Copy with S and k clamped to a cloud of ``n`` points."""
        S, k = min(self.S, n), min(self.k, n)
        m = 1 if self.sampler in ("maxpool", "meanpool") else min(self.m, k)
        return IrlConfig(S, k, m, self.partition, self.sampler, self.seed, self.attention, self.enabled)


@dataclass
class RegionPartition:
    scores: np.ndarray
    centroids: np.ndarray
    members: np.ndarray


@dataclass
class RepresentativeSet:
    """``chi[i, t]`` is the t-th representative of region i.

    Pooling samplers have no source point; ``chi`` then holds -1 and
    ``pooled`` names the reduction.
    """

    chi: np.ndarray
    pooled: str | None = None

    @property
    def m(self) -> int:
        return self.chi.shape[1]


# ------------------------------------------------------------------ params


def init_irl(store: ParameterStore, prefix: str, c: int, rng: np.random.Generator) -> None:
    nn.init_linear(store, f"{prefix}/score", c, 1, rng)
    qk_std = c ** -0.75
    store.add(f"{prefix}/attn.Wq", rng.normal(0.0, qk_std, size=(c, c)))
    store.add(f"{prefix}/attn.Wk", rng.normal(0.0, qk_std, size=(c, c)))
    bound = 1.0 / np.sqrt(c)
    store.add(f"{prefix}/attn.Wv", rng.uniform(-bound, bound, size=(c, c)))
    store.add(f"{prefix}/attn.Wz", rng.uniform(-bound, bound, size=(c, c)))


# ------------------------------------------------------------------ scoring and partition


def score_points(T: Tensor, store: ParameterStore, prefix: str) -> Tensor:
    """Per-row importance in (0, 1), shape (rows,)."""
    s = tn.sigmoid(nn.linear(T, store, f"{prefix}/score"))
    return tn.reshape(s, (T.shape[0],))


def _check_sizes(n: int, S: int, k: int) -> None:
    if not 1 <= S <= n:
        raise DomainError(f"S must lie in [1, {n}], got {S}")
    if not 1 <= k <= n:
        raise DomainError(f"k must lie in [1, {n}], got {k}")


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties by ascending index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def _regions(scores, coords, centroids, k) -> RegionPartition:
    members = knn(coords, k, query_idx=centroids).idx
    return RegionPartition(np.asarray(scores), np.asarray(centroids, dtype=np.intp), members)


def partition_top_s(scores, coords, S: int, k: int) -> RegionPartition:
    _check_sizes(len(scores), S, k)
    return _regions(scores, coords, score_order(scores)[:S], k)


def dilated_ranks(n: int, S: int) -> np.ndarray:
    return np.arange(S) * (n // S)


def partition_dilated_top_s(scores, coords, S: int, k: int) -> RegionPartition:
    n = len(scores)
    _check_sizes(n, S, k)
    return _regions(scores, coords, score_order(scores)[dilated_ranks(n, S)], k)


def partition_fps(scores, coords, S: int, k: int, seed_index: int = 0) -> RegionPartition:
    _check_sizes(len(scores), S, k)
    return _regions(scores, coords, fps(coords, S, seed_index), k)


def partition(kind: str, scores, coords, S: int, k: int) -> RegionPartition:
    if kind == "dilated_top_s":
        return partition_dilated_top_s(scores, coords, S, k)
    if kind == "top_s":
        return partition_top_s(scores, coords, S, k)
    if kind == "fps":
        return partition_fps(scores, coords, S, k)
    raise ValueError(f"unknown partition {kind!r}")


def scale_region_features(T: Tensor, scores: Tensor, part: RegionPartition) -> Tensor:
    """``G[i, j] = scores[centroid_i] * T[members[i, j]]`` with shape (S, k, C)."""
    S, k = part.members.shape
    rows = tn.gather(T, part.members.reshape(-1))
    s = tn.gather(scores, np.repeat(part.centroids, k))
    return tn.reshape(tn.scale_rows(rows, s), (S, k, T.shape[1]))


# ------------------------------------------------------------------ representatives


def sample_representatives(part: RegionPartition, sampler: str, m: int, seed: int = 0) -> RepresentativeSet:
    S, k = part.members.shape
    if not 1 <= m <= k:
        raise DomainError(f"m must lie in [1, k={k}], got {m}")
    if sampler == "knn_based":
        return RepresentativeSet(part.members[:, :m].copy())
    if sampler == "random":
        rng = np.random.default_rng(seed)
        pos = np.stack([rng.permutation(k)[:m] for _ in range(S)])
        return RepresentativeSet(np.take_along_axis(part.members, pos, axis=1))
    if sampler in ("maxpool", "meanpool"):
        if m != 1:
            raise DomainError("pooling samplers produce exactly one representative")
        return RepresentativeSet(np.full((S, 1), -1, dtype=np.intp), pooled=sampler[:-4])
    raise ValueError(f"unknown sampler {sampler!r}")


# ------------------------------------------------------------------ attention


def slot_attention(Gslots: Tensor, store: ParameterStore, prefix: str, return_weights: bool = False):
    """Self-attention across regions, independently per slot.

    ``Gslots`` is (P, S, C): P independent groups (slots, possibly times
    clouds) of one feature row per region. Returns (P, S, C) and, optionally,
    the (P, S, S) attention weights.
    """
    if Gslots.ndim != 3:
        raise DimensionError(f"slot features must be (slots, S, C), got {Gslots.shape}")
    P, S, C = Gslots.shape
    flat = tn.reshape(Gslots, (P * S, C))
    q = tn.reshape(tn.matmul(flat, store[f"{prefix}/attn.Wq"]), (P, S, C))
    k = tn.reshape(tn.matmul(flat, store[f"{prefix}/attn.Wk"]), (P, S, C))
    v = tn.reshape(tn.matmul(flat, store[f"{prefix}/attn.Wv"]), (P, S, C))
    w = tn.softmax(tn.bmm(q, k, transpose_b=True))
    out = tn.matmul(tn.reshape(tn.bmm(w, v), (P * S, C)), store[f"{prefix}/attn.Wz"])
    out = tn.reshape(out, (P, S, C))
    return (out, w) if return_weights else out


# ------------------------------------------------------------------ interpolation


def interpolation_table(points: np.ndarray, anchors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3 nearest anchors per point (ties by anchor order) and their IDW weights."""
    if anchors.shape[0] < 3:
        raise DomainError(f"interpolation needs at least 3 representatives, got {anchors.shape[0]}")
    d2 = pairwise_sq_dist(points, anchors)
    idx = smallest_k(d2, 3)
    w = idw_weights_from_sq(np.take_along_axis(d2, idx, axis=1))
    return idx, w


def interpolate_residual(T: Tensor, Ghat: Tensor, rep_coords: np.ndarray, all_coords: np.ndarray) -> Tensor:
    """``T[v] + sum_u w_vu * Ghat[u]`` over the 3 anchors nearest to point v."""
    if Ghat.shape[0] != rep_coords.shape[0]:
        raise DimensionError("one anchor coordinate is needed per attended feature row")
    idx, w = interpolation_table(all_coords, rep_coords)
    return tn.add(T, tn.weighted_gather(Ghat, idx, w.astype(T.dtype, copy=False)))


# ------------------------------------------------------------------ full module


def _cloud_structure(scores: np.ndarray, coords: np.ndarray, cfg: IrlConfig):
    part = partition(cfg.partition, scores, coords, cfg.S, cfg.k)
    if cfg.attention == "naive":
        return part, None, coords[part.members.reshape(-1)]
    reps = sample_representatives(part, cfg.sampler, cfg.m, cfg.seed)
    if reps.pooled:
        anchors = coords[part.centroids]
    else:
        # slot-major: anchor order matches the attended rows (t, i)
        anchors = coords[reps.chi.T.reshape(-1)]
    return part, reps, anchors


def irl_forward(
    T: Tensor,
    coords: np.ndarray,
    cfg: IrlConfig,
    store: ParameterStore,
    prefix: str,
    ctx: nn.Context | None = None,
    key: str | None = None,
) -> Tensor:
    """Apply the module to a stacked batch: ``T`` is (B*N, C), ``coords`` is (B, N, 3)."""
    if not cfg.enabled:
        return T
    ctx = ctx or nn.Context()
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 2:
        coords = coords[None]
    B, N, _ = coords.shape
    if T.shape[0] != B * N:
        raise DimensionError(f"{T.shape[0]} feature rows for {B} clouds of {N} points")
    C = T.shape[1]
    cfg = cfg.fitted_to(N)

    scores = score_points(T, store, prefix)
    sc = scores.data.reshape(B, N)
    structure = ctx.cached(
        f"irl:{key or prefix}",
        lambda: [_cloud_structure(sc[b], coords[b], cfg) for b in range(B)],
    )
    parts = [s[0] for s in structure]
    off = np.arange(B)[:, None, None] * N

    if cfg.attention == "naive":
        members = np.stack([p.members for p in parts]) + off  # (B, S, k)
        cents = np.stack([p.centroids for p in parts]) + off[:, :, 0]
        G = tn.scale_rows(tn.gather(T, members.reshape(-1)), tn.gather(scores, np.repeat(cents.reshape(-1), cfg.k)))
        P, A = B, cfg.S * cfg.k
        Gslots = tn.reshape(G, (P, A, C))
    elif structure[0][1].pooled:
        members = np.stack([p.members for p in parts]) + off
        cents = np.stack([p.centroids for p in parts]) + off[:, :, 0]
        G = tn.scale_rows(tn.gather(T, members.reshape(-1)), tn.gather(scores, np.repeat(cents.reshape(-1), cfg.k)))
        G = tn.reshape(G, (B * cfg.S, cfg.k, C))
        pooled = tn.reduce(structure[0][1].pooled, G, axis=1)
        P, A = B, cfg.S
        Gslots = tn.reshape(pooled, (P, A, C))
    else:
        chi = np.stack([s[1].chi.T for s in structure]) + off  # (B, m, S)
        cents = np.stack([p.centroids for p in parts]) + off[:, :, 0]  # (B, S)
        cent_rows = np.broadcast_to(cents[:, None, :], chi.shape)
        Gs = tn.scale_rows(tn.gather(T, chi.reshape(-1)), tn.gather(scores, cent_rows.reshape(-1)))
        P, A = B * cfg.m, cfg.S
        Gslots = tn.reshape(Gs, (P, A, C))

    att = slot_attention(Gslots, store, prefix, return_weights=ctx.record is not None)
    if ctx.record is not None:
        att, weights = att
        ctx.record.setdefault(prefix, {}).update(
            {"weights": weights.data, "partitions": parts, "reps": [s[1] for s in structure], "scores": sc.copy()}
        )
    Ghat = tn.reshape(att, (P * A, C))

    def tables():
        per = Ghat.shape[0] // B
        idx = np.empty((B * N, 3), dtype=np.intp)
        w = np.empty((B * N, 3))
        for b in range(B):
            i, wb = interpolation_table(coords[b], structure[b][2])
            idx[b * N : (b + 1) * N] = i + b * per
            w[b * N : (b + 1) * N] = wb
        return idx, w

    idx, w = ctx.cached(f"interp:{key or prefix}", tables)
    return tn.add(T, tn.weighted_gather(Ghat, idx, w.astype(T.dtype, copy=False)))


# ------------------------------------------------------------------ complexity and timing


def count_edges(mode: str, S: int, k: int, m: int) -> int:
    if min(S, k, m) < 1:
        raise DomainError("S, k and m must be positive")
    if mode == "naive":
        return S * (S - 1) * k * k
    if mode == "representative":
        return S * (S - 1) * m
    raise ValueError(f"unknown mode {mode!r}")


BENCH_COLUMNS = ["N", "S", "k", "m", "threads", "naive_ms", "rep_ms", "ratio", "edges_naive", "edges_rep"]


@dataclass
class LatencyRecord:
    N: int
    S: int
    k: int
    m: int
    threads: int
    naive_ms: float | None
    rep_ms: float | None
    ratio: float | None
    edges_naive: int
    edges_rep: int
    skipped: str | None = None

    def csv_row(self) -> dict:
        row = asdict(self)
        row.pop("skipped")
        for key in ("naive_ms", "rep_ms", "ratio"):
            if row[key] is None:
                row[key] = "skipped"
        return row


def _sphere_points(rng: np.random.Generator, n: int) -> np.ndarray:
    p = rng.normal(size=(n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def _median_ms(fn, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def current_threads() -> int:
    try:
        from threadpoolctl import threadpool_info

        info = threadpool_info()
        return max((i.get("num_threads", 1) for i in info), default=1)
    except Exception:
        return 1


def bench_attention(
    N: int,
    S: int,
    k: int = 6,
    m: int = 1,
    repeats: int = 5,
    warmup: int = 1,
    channels: int = 256,
    batch: int = 1,
    dtype=np.float32,
    seed: int = 0,
    modes=("naive", "representative"),
) -> LatencyRecord:
    """Median inference latency of one IRL module, naive vs representative attention.

    Both variants run the full module (scoring, partition, attention,
    interpolation) through the same engine without graph recording, so the
    difference isolates the size of the attention graph.
    """
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    init_irl(store, "bench", channels, rng)
    store = store.astype(dtype)
    coords = np.stack([_sphere_points(rng, N) for _ in range(batch)])
    T = tn.Tensor(rng.standard_normal((batch * N, channels)).astype(dtype))
    rec = LatencyRecord(N, S, k, m, current_threads(), None, None, None,
                        count_edges("naive", S, k, m), count_edges("representative", S, k, m))
    results = {}
    for mode in modes:
        cfg = IrlConfig(S, k, m, attention=mode)
        try:
            with tn.no_grad():
                results[mode] = _median_ms(lambda: irl_forward(T, coords, cfg, store, "bench"), repeats, warmup)
        except MemoryError as exc:
            rec.skipped = f"{mode}: out of memory ({exc})"
    rec.naive_ms = results.get("naive")
    rec.rep_ms = results.get("representative")
    if rec.naive_ms is not None and rec.rep_ms:
        rec.ratio = rec.naive_ms / rec.rep_ms
    return rec


def write_bench_csv(path: str | os.PathLike, records) -> None:
    from .params import atomic_write_text

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in records:
        writer.writerow(r.csv_row())
    atomic_write_text(path, buf.getvalue())
