"""Network assemblies for classification, keypoint saliency and part segmentation.

A :class:`NetworkSpec` is a chain of ISL/IRL stages plus a head description.
Parameters live in a flat :class:`ParameterStore` keyed ``stage{i}/...`` and
``head/...``; :func:`forward` runs a stacked batch of clouds through it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as tn
from .exceptions import ConfigError, DimensionError
from .irl import IrlConfig, init_irl, irl_forward
from .isl import IslConfig, batched_knn, init_isl, isl_forward
from .params import ParameterStore
from .tensor import Tensor

HEAD_KINDS = ("classifier", "pointwise", "partseg")


@dataclass
class NetworkSpec:
    stages: list
    head: dict
    in_channels: int = 3
    static_graph: bool = False

    def __post_init__(self):
        if not self.stages or not isinstance(self.stages[0], IslConfig):
            raise ConfigError("the first stage must be an ISL stage")
        if self.head.get("kind") not in HEAD_KINDS:
            raise ConfigError(f"head kind must be one of {HEAD_KINDS}")
        if self.head["kind"] == "partseg":
            fuse_at = self.head.get("fuse_at", len(self.stages) - 1)
            if not 0 < fuse_at <= len(self.stages):
                raise ConfigError("partseg fuse_at must index a stage boundary")

    # -------------------------------------------------------------- widths

    def stage_widths(self) -> list[tuple[int, int]]:
        """(in, out) channels per stage."""
        widths = []
        c = self.in_channels
        for i, st in enumerate(self.stages):
            if self.head["kind"] == "partseg" and i == self.fuse_at:
                c = self.head.get("fuse_width", 256)
            if isinstance(st, IslConfig):
                widths.append((c, st.out_channels))
                c = st.out_channels
            else:
                widths.append((c, c))
        return widths

    @property
    def fuse_at(self) -> int:
        return self.head.get("fuse_at", len(self.stages) - 1)

    def shortcut_stages(self) -> list[int]:
        """First ISL stage plus every IRL stage (before any partseg fusion point)."""
        end = self.fuse_at if self.head["kind"] == "partseg" else len(self.stages)
        if self.head["kind"] == "partseg":
            return list(range(end))
        return [0] + [i for i, st in enumerate(self.stages[:end]) if isinstance(st, IrlConfig)]

    def shortcut_width(self) -> int:
        w = self.stage_widths()
        return sum(w[i][1] for i in self.shortcut_stages())

    def notation(self) -> str:
        return " -> ".join(st.notation() for st in self.stages)

    # -------------------------------------------------------------- JSON

    def to_dict(self) -> dict:
        stages = []
        for st in self.stages:
            key = "isl" if isinstance(st, IslConfig) else "irl"
            stages.append({key: asdict(st)})
        return {
            "notation": self.notation(),
            "in_channels": self.in_channels,
            "static_graph": self.static_graph,
            "stages": stages,
            "head": dict(self.head),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        stages = []
        for entry in d["stages"]:
            if len(entry) != 1 or next(iter(entry)) not in ("isl", "irl"):
                raise ConfigError(f"stage entries are {{'isl': ...}} or {{'irl': ...}}, got {entry}")
            (kind, cfg), = entry.items()
            stages.append(IslConfig(**cfg) if kind == "isl" else IrlConfig(**cfg))
        return cls(stages, dict(d["head"]), d.get("in_channels", 3), d.get("static_graph", False))

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))


CLASSIFIER_TRUNK = [
    ("isl", 20, [64]),
    ("isl", 20, [64]),
    ("irl", 256, 4, 4),
    ("isl", 20, [128]),
    ("irl", 128, 8, 4),
    ("isl", 20, [256]),
    ("irl", 64, 16, 4),
]

PARTSEG_TRUNK = [
    ("isl", 32, [64, 64, 64]),
    ("isl", 32, [128, 128, 128]),
    ("irl", 128, 16, 8),
    ("isl", 32, [256, 256, 256]),
    ("irl", 256, 16, 8),
    ("irl", 128, 32, 16),
]


def _stages(rows, fusion: str = "dfa", use_irl: bool = True, **irl_kw) -> list:
    out = []
    for row in rows:
        if row[0] == "isl":
            out.append(IslConfig(row[1], list(row[2]), fusion=fusion))
        else:
            out.append(IrlConfig(row[1], row[2], row[3], enabled=use_irl, **irl_kw))
    return out


def build_classifier(num_classes: int, fusion: str = "dfa", use_irl: bool = True, static_graph: bool = False, **irl_kw) -> NetworkSpec:
    head = {"kind": "classifier", "num_classes": int(num_classes), "global_width": 1024, "hidden": [512, 256], "dropout": 0.5}
    return NetworkSpec(_stages(CLASSIFIER_TRUNK, fusion, use_irl, **irl_kw), head, static_graph=static_graph)


def build_keypoint_net(num_outputs: int = 1, fusion: str = "dfa", use_irl: bool = True, static_graph: bool = False, **irl_kw) -> NetworkSpec:
    head = {
        "kind": "pointwise",
        "num_outputs": int(num_outputs),
        "global_width": 1024,
        "hidden": [512, 256],
        "dropout": 0.5,
        "point_hidden": [256, 128],
    }
    return NetworkSpec(_stages(CLASSIFIER_TRUNK, fusion, use_irl, **irl_kw), head, static_graph=static_graph)


def build_partseg_net(num_parts: int, num_categories: int, fusion: str = "dfa", use_irl: bool = True, static_graph: bool = False, **irl_kw) -> NetworkSpec:
    head = {
        "kind": "partseg",
        "num_parts": int(num_parts),
        "num_categories": int(num_categories),
        "fuse_at": 5,
        "global_width": 1024,
        "embed_width": 64,
        "fuse_width": 256,
        "hidden": [256, 128],
    }
    return NetworkSpec(_stages(PARTSEG_TRUNK, fusion, use_irl, **irl_kw), head, static_graph=static_graph)


# ------------------------------------------------------------------ parameters


def init_params(spec: NetworkSpec, seed: int | np.random.Generator = 0) -> ParameterStore:
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for i, (st, (c_in, _)) in enumerate(zip(spec.stages, spec.stage_widths())):
        if isinstance(st, IslConfig):
            init_isl(store, f"stage{i}", c_in, st, rng)
        elif st.enabled:
            init_irl(store, f"stage{i}", c_in, rng)
    h = spec.head
    kind = h["kind"]
    sc = spec.shortcut_width()
    if kind in ("classifier", "pointwise"):
        nn.init_block(store, "head/global", sc, h["global_width"], rng)
        nn.init_mlp(store, "head/fc", 2 * h["global_width"], h["hidden"], rng)
        if kind == "classifier":
            nn.init_linear(store, "head/out", h["hidden"][-1], h["num_classes"], rng)
        else:
            nn.init_mlp(store, "head/point", sc + h["hidden"][-1], h["point_hidden"], rng)
            nn.init_linear(store, "head/out", h["point_hidden"][-1], h["num_outputs"], rng)
    else:
        nn.init_block(store, "head/global", sc, h["global_width"], rng)
        nn.init_linear(store, "head/embed", h["num_categories"], h["embed_width"], rng)
        nn.init_block(store, "head/fuse", sc + h["global_width"] + h["embed_width"], h["fuse_width"], rng)
        c_last = spec.stage_widths()[-1][1]
        nn.init_mlp(store, "head/fc", c_last, h["hidden"], rng)
        nn.init_linear(store, "head/out", h["hidden"][-1], h["num_parts"], rng)
    return store


# ------------------------------------------------------------------ forward


def _as_batch(clouds) -> np.ndarray:
    if isinstance(clouds, (list, tuple)):
        clouds = np.stack([getattr(c, "coords", c) for c in clouds])
    arr = np.asarray(getattr(clouds, "coords", clouds), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"expected clouds shaped (B, N, 3), got {arr.shape}")
    return arr


def _pool(x: Tensor, B: int, N: int) -> Tensor:
    """Concatenated max and mean over the points of each cloud."""
    x3 = tn.reshape(x, (B, N, x.shape[1]))
    return tn.concat([tn.reduce("max", x3, 1), tn.reduce("mean", x3, 1, order_invariant=True)], axis=-1)


def run_stage(i: int, st, F: Tensor, coords: np.ndarray, spec: NetworkSpec, store: ParameterStore, ctx: nn.Context) -> Tensor:
    B, N, _ = coords.shape
    prefix = f"stage{i}"
    try:
        if isinstance(st, IslConfig):
            k = min(st.k_hat, N)

            def graph():
                if i == 0 or spec.static_graph or ctx.static_graph:
                    return batched_knn(coords, k)
                return batched_knn(F.data.reshape(B, N, -1), k, metric="gram")

            nbr = ctx.cached(f"knn:{i}", graph)
            return isl_forward(F, nbr, store, prefix, st, ctx)
        return irl_forward(F, coords, st, store, prefix, ctx, key=f"stage{i}")
    except DimensionError as exc:
        raise DimensionError(f"stage {i} ({st.notation()}): {exc}") from None


def forward(spec: NetworkSpec, store: ParameterStore, clouds, mode: str = "eval", categories=None, ctx: nn.Context | None = None):
    """Run the network; returns (output tensor, per-stage feature trace).

    Output shapes: classifier (B, classes); pointwise (B, N, outputs);
    partseg (B, N, parts).
    """
    coords = _as_batch(clouds)
    B, N, _ = coords.shape
    if ctx is None:
        ctx = nn.Context(training=(mode == "train"))
    else:
        ctx.training = mode == "train"
    F = tn.Tensor(coords.reshape(B * N, 3).astype(store.dtype))
    trace: list[Tensor] = []
    h = spec.head
    kind = h["kind"]
    stop = spec.fuse_at if kind == "partseg" else len(spec.stages)
    for i, st in enumerate(spec.stages[:stop]):
        F = run_stage(i, st, F, coords, spec, store, ctx)
        trace.append(F)

    short = tn.concat([trace[i] for i in spec.shortcut_stages()], axis=-1)
    glob = nn.block(short, store, "head/global", ctx)

    if kind in ("classifier", "pointwise"):
        z = _pool(glob, B, N)
        for j in range(len(h["hidden"])):
            z = nn.block(z, store, f"head/fc.{j}", ctx)
            z = tn.dropout(z, h.get("dropout", 0.0), ctx.rng, ctx.training)
        if kind == "classifier":
            return nn.linear(z, store, "head/out"), trace
        p = tn.concat([short, nn.repeat_rows(z, N)], axis=-1)
        p = nn.mlp(p, store, "head/point", len(h["point_hidden"]), ctx)
        return tn.reshape(nn.linear(p, store, "head/out"), (B, N, h["num_outputs"])), trace

    if categories is None:
        raise DimensionError("part segmentation needs the object category of every cloud")
    cats = np.asarray(categories, dtype=np.intp).reshape(-1)
    if cats.shape[0] != B:
        raise DimensionError(f"{cats.shape[0]} categories for {B} clouds")
    onehot = np.zeros((B, h["num_categories"]), dtype=store.dtype)
    onehot[np.arange(B), cats] = 1.0
    emb = nn.linear(tn.Tensor(onehot), store, "head/embed")
    g = tn.reduce("max", tn.reshape(glob, (B, N, h["global_width"])), 1)
    F = tn.concat([short, nn.repeat_rows(g, N), nn.repeat_rows(emb, N)], axis=-1)
    F = nn.block(F, store, "head/fuse", ctx)
    for i in range(stop, len(spec.stages)):
        F = run_stage(i, spec.stages[i], F, coords, spec, store, ctx)
        trace.append(F)
    z = nn.mlp(F, store, "head/fc", len(h["hidden"]), ctx)
    return tn.reshape(nn.linear(z, store, "head/out"), (B, N, h["num_parts"])), trace
