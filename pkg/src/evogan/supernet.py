"""Weight-sharing parameter stores and subnet execution.

A full store ("large" network) holds independent affine parameters for every
(edge, non-None op) pair of a search space; every candidate genome runs as a
subnet reading and writing the shared slices it activates.  Backward passes
are hand-written per layer kind; ``subnet_jvp`` pushes a tangent through the
recorded forward (fixed activation/dropout masks, no biases), which is what
the gradient-penalty parameter gradients need.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, FormatError
from .genome import (
    N_INPUTS,
    NON_NONE_OPS,
    Genome,
    SearchSpace,
    edge_semantics,
    is_canonical,
    is_connected,
    same_space,
    space_from_json,
    space_to_json,
)
from .numerics import (
    AdamState,
    OptimHyper,
    activate,
    activation_mask,
    adam_step,
    affine_backward,
    affine_forward,
    dropout,
)

CHECKPOINT_VERSION = 1


@dataclass
class EdgeParams:
    w: np.ndarray
    b: np.ndarray
    adam_w: AdamState
    adam_b: AdamState

    def copy(self) -> "EdgeParams":
        return EdgeParams(self.w.copy(), self.b.copy(),
                          self.adam_w.copy(), self.adam_b.copy())


class SupernetParams:
    """All (edge, op) affine parameters of one search space, plus Adam state."""

    def __init__(self, space: SearchSpace, tables: dict[tuple[int, int], EdgeParams]):
        self.space = space
        self.tables = tables

    def __contains__(self, key) -> bool:
        return key in self.tables

    def get(self, edge_idx: int, op: int) -> EdgeParams:
        return self.tables[(edge_idx, op)]

    def parameter_count(self) -> int:
        return sum(p.w.size + p.b.size for p in self.tables.values())

    def snapshot(self) -> dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]:
        """Copies of all weights, for change-detection in tests."""
        return {k: (p.w.copy(), p.b.copy()) for k, p in self.tables.items()}


def _alloc_edge(space: SearchSpace, edge_idx: int, rng: np.random.Generator,
                init_scale: float) -> EdgeParams:
    d_src, d_dst = space.edge_dims(edge_idx)
    w = rng.normal(0.0, init_scale / np.sqrt(d_src), size=(d_dst, d_src))
    b = np.zeros(d_dst)
    return EdgeParams(w, b, AdamState.zeros_like(w), AdamState.zeros_like(b))


def init_supernet(space: SearchSpace, rng: np.random.Generator,
                  init_scale: float = 1.0) -> SupernetParams:
    """Fresh store covering every (edge, non-None op) pair.

    Weights are zero-mean normal with std init_scale/sqrt(fan-in); biases zero.
    """
    tables = {}
    for e in range(space.n_edges):
        for op in NON_NONE_OPS:
            tables[(e, op)] = _alloc_edge(space, e, rng, init_scale)
    return SupernetParams(space, tables)


def init_for_genome(space: SearchSpace, genome: Genome, rng: np.random.Generator,
                    init_scale: float = 1.0) -> SupernetParams:
    """Fresh store holding only the pairs the genome activates."""
    tables = {}
    for e in genome.active_edges():
        tables[(e, genome.ops[e])] = _alloc_edge(space, e, rng, init_scale)
    return SupernetParams(space, tables)


def count_for_space(space: SearchSpace) -> int:
    """Closed-form parameter count of a full store (no allocation)."""
    total = 0
    for e in range(space.n_edges):
        d_src, d_dst = space.edge_dims(e)
        total += len(NON_NONE_OPS) * (d_dst * d_src + d_dst)
    return total


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class EdgeTrace:
    edge_idx: int
    op: int
    src: int
    dst: int
    x_src: np.ndarray          # input fed to the affine map
    act_mask: np.ndarray | None
    drop_mask: np.ndarray | None


@dataclass
class ForwardCache:
    genome: Genome
    mode: str
    batch: int
    traces: list[EdgeTrace]
    node_values: dict[int, np.ndarray]
    output: np.ndarray


@dataclass
class Grads:
    """Gradients of a scalar loss for one subnet execution."""

    params: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]
    d_attr: np.ndarray
    d_second: np.ndarray   # d(loss)/d(z) for generators, /d(x) for critics

    def scaled(self, factor: float) -> "Grads":
        return Grads(
            {k: (gw * factor, gb * factor) for k, (gw, gb) in self.params.items()},
            self.d_attr * factor,
            self.d_second * factor,
        )

    def add_(self, other: "Grads") -> "Grads":
        for k, (gw, gb) in other.params.items():
            if k in self.params:
                sw, sb = self.params[k]
                sw += gw
                sb += gb
            else:
                self.params[k] = (gw.copy(), gb.copy())
        self.d_attr += other.d_attr
        self.d_second += other.d_second
        return self

    def all_finite(self) -> bool:
        for gw, gb in self.params.values():
            if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
                return False
        return bool(np.all(np.isfinite(self.d_attr)) and np.all(np.isfinite(self.d_second)))


def subnet_forward(store: SupernetParams, genome: Genome, attr: np.ndarray,
                   second: np.ndarray, mode: str = "eval",
                   rng: np.random.Generator | None = None,
                   incoming_order=None) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the genome's subnet on a batch.

    ``attr`` is the class-semantic batch and ``second`` the noise (generator)
    or feature (critic) batch; the third input node is their concatenation.
    Node values are the sum of their active incoming edges.  ``incoming_order``
    is a test hook permuting the aggregation order of each node's in-edges.
    """
    space = store.space
    if not same_space(genome, space):
        raise ContractError("genome does not belong to this store's space")
    if not is_canonical(genome) or not is_connected(genome):
        raise ContractError("subnet_forward requires a canonical connected genome")
    if mode not in ("train", "eval"):
        raise ContractError(f"unknown mode {mode!r}")
    attr = np.asarray(attr, dtype=np.float64)
    second = np.asarray(second, dtype=np.float64)
    if attr.ndim != 2 or second.ndim != 2 or attr.shape[0] != second.shape[0]:
        raise DimensionError(
            f"batch inputs must be 2-D with equal rows: {attr.shape} vs {second.shape}"
        )
    if attr.shape[1] != space.input_dims[0] or second.shape[1] != space.input_dims[1]:
        raise DimensionError(
            f"input dims ({attr.shape[1]}, {second.shape[1]}) do not match "
            f"space inputs {space.input_dims[:2]}"
        )

    batch = attr.shape[0]
    values: dict[int, np.ndarray] = {
        0: attr,
        1: second,
        2: np.concatenate([attr, second], axis=1),
    }
    edges = space.edges
    by_target: dict[int, list[int]] = {}
    for i in genome.active_edges():
        by_target.setdefault(edges[i][1], []).append(i)

    traces: list[EdgeTrace] = []
    for node in range(N_INPUTS, space.n_nodes):
        incoming = by_target.get(node)
        if not incoming:
            continue
        if incoming_order is not None:
            incoming = incoming_order(node, list(incoming))
        acc = np.zeros((batch, space.node_dim(node)))
        for i in incoming:
            src = edges[i][0]
            op = genome.ops[i]
            p = store.get(i, op)
            x_src = values[src]
            out = affine_forward(p.w, p.b, x_src)
            act_kind, use_drop = edge_semantics(space.role, i, op, genome.n_edges)
            act_mask = None
            if act_kind is not None:
                act_mask = activation_mask(out, act_kind, space.leaky_slope)
                out = activate(out, act_kind, space.leaky_slope)
            drop_mask = None
            if use_drop and mode == "train":
                out, drop_mask = dropout(out, space.dropout_rate, rng, training=True)
            traces.append(EdgeTrace(i, op, src, node, x_src, act_mask, drop_mask))
            acc += out
        values[node] = acc

    if space.output_node not in values:
        raise ContractError("connected genome produced no output value")
    output = values[space.output_node]
    return output, ForwardCache(genome, mode, batch, traces, values, output)


def subnet_backward(store: SupernetParams, cache: ForwardCache,
                    grad_out: np.ndarray, *, skip_bias: bool = False) -> Grads:
    """Backprop a gradient at the output node through the cached subnet.

    Returns per-(edge, op) parameter gradients for exactly the active
    subgraph, plus gradients w.r.t. the two raw inputs.
    """
    space = store.space
    if grad_out.shape != cache.output.shape:
        raise ContractError(
            f"grad_out shape {grad_out.shape} does not match cached output "
            f"{cache.output.shape}"
        )
    d_node: dict[int, np.ndarray] = {space.output_node: np.asarray(grad_out, dtype=np.float64)}
    params: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    for tr in reversed(cache.traces):
        g = d_node.get(tr.dst)
        if g is None:
            raise ContractError("stale cache: downstream gradient missing")
        if tr.drop_mask is not None:
            g = g * tr.drop_mask
        if tr.act_mask is not None:
            g = g * tr.act_mask
        p = store.get(tr.edge_idx, tr.op)
        gw, gb, gx = affine_backward(p.w, p.b, tr.x_src, g)
        if skip_bias:
            gb = np.zeros_like(gb)
        params[(tr.edge_idx, tr.op)] = (gw, gb)
        if tr.src in d_node:
            d_node[tr.src] += gx
        else:
            d_node[tr.src] = gx

    batch = cache.batch
    da = d_node.get(0, np.zeros((batch, space.input_dims[0])))
    dsecond = d_node.get(1, np.zeros((batch, space.input_dims[1])))
    if 2 in d_node:
        na = space.input_dims[0]
        da = da + d_node[2][:, :na]
        dsecond = dsecond + d_node[2][:, na:]
    return Grads(params, da, dsecond)


def subnet_jvp(store: SupernetParams, cache: ForwardCache, t_attr: np.ndarray,
               t_second: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Directional derivative of the cached forward along an input tangent.

    Replays the recorded subnet linearly: affine maps without biases and the
    recorded activation/dropout masks as fixed factors.  The returned cache
    has the tangent values in place of the primal ones, so running
    ``subnet_backward(..., skip_bias=True)`` on it yields d/d(params) of
    (tangent output contracted with an upstream vector) -- the second-order
    piece the gradient penalty needs.
    """
    space = store.space
    t_acc: dict[int, np.ndarray] = {
        0: np.asarray(t_attr, dtype=np.float64),
        1: np.asarray(t_second, dtype=np.float64),
    }
    t_acc[2] = np.concatenate([t_acc[0], t_acc[1]], axis=1)

    t_traces: list[EdgeTrace] = []
    for tr in cache.traces:
        p = store.get(tr.edge_idx, tr.op)
        t_src = t_acc[tr.src]
        t_out = t_src @ p.w.T
        if tr.act_mask is not None:
            t_out = t_out * tr.act_mask
        if tr.drop_mask is not None:
            t_out = t_out * tr.drop_mask
        t_traces.append(EdgeTrace(tr.edge_idx, tr.op, tr.src, tr.dst, t_src,
                                  tr.act_mask, tr.drop_mask))
        if tr.dst in t_acc:
            t_acc[tr.dst] = t_acc[tr.dst] + t_out
        else:
            t_acc[tr.dst] = t_out

    t_output = t_acc[space.output_node]
    return t_output, ForwardCache(cache.genome, cache.mode, cache.batch,
                                  t_traces, t_acc, t_output)


# ---------------------------------------------------------------------------
# subnet handle


class Subnet:
    """A genome bound to a parameter store (shared or standalone)."""

    def __init__(self, store: SupernetParams, genome: Genome):
        if not same_space(genome, store.space):
            raise ContractError("genome does not match the store's space")
        self.store = store
        self.genome = genome

    @property
    def space(self) -> SearchSpace:
        return self.store.space

    def forward(self, attr, second, mode="eval", rng=None, incoming_order=None):
        return subnet_forward(self.store, self.genome, attr, second, mode,
                              rng, incoming_order)

    def backward(self, cache, grad_out, skip_bias=False) -> Grads:
        return subnet_backward(self.store, cache, grad_out, skip_bias=skip_bias)

    def jvp(self, cache, t_attr, t_second):
        return subnet_jvp(self.store, cache, t_attr, t_second)

    def apply_grads(self, grads: Grads, hyper: OptimHyper) -> None:
        """One Adam step on every (edge, op) pair present in the gradients."""
        for (e, op), (gw, gb) in grads.params.items():
            p = self.store.get(e, op)
            adam_step(p.w, gw, p.adam_w, hyper)
            adam_step(p.b, gb, p.adam_b, hyper)


def extract_standalone(store: SupernetParams, genome: Genome) -> Subnet:
    """Deep-copy the genome's active parameters into an independent subnet."""
    if not is_canonical(genome):
        raise ContractError("extract_standalone requires a canonical genome")
    tables = {}
    for e in genome.active_edges():
        key = (e, genome.ops[e])
        tables[key] = store.tables[key].copy()
    return Subnet(SupernetParams(store.space, tables), genome)


# ---------------------------------------------------------------------------
# checkpointing


def _store_arrays(prefix: str, store: SupernetParams) -> dict:
    arrays = {}
    for (e, op), p in store.tables.items():
        tag = f"{prefix}p{e}_{op}"
        arrays[f"{tag}_w"] = p.w
        arrays[f"{tag}_b"] = p.b
        arrays[f"{tag}_mw"] = p.adam_w.first_moment
        arrays[f"{tag}_vw"] = p.adam_w.second_moment
        arrays[f"{tag}_mb"] = p.adam_b.first_moment
        arrays[f"{tag}_vb"] = p.adam_b.second_moment
        arrays[f"{tag}_t"] = np.array([p.adam_w.step_count, p.adam_b.step_count],
                                      dtype=np.int64)
    return arrays


def _store_from_arrays(prefix: str, data, meta_entry) -> SupernetParams:
    space = space_from_json(meta_entry["space"])
    tables = {}
    for e, op in meta_entry["keys"]:
        tag = f"{prefix}p{e}_{op}"
        try:
            steps = data[f"{tag}_t"]
            tables[(int(e), int(op))] = EdgeParams(
                w=data[f"{tag}_w"].copy(),
                b=data[f"{tag}_b"].copy(),
                adam_w=AdamState(data[f"{tag}_mw"].copy(), data[f"{tag}_vw"].copy(),
                                 int(steps[0])),
                adam_b=AdamState(data[f"{tag}_mb"].copy(), data[f"{tag}_vb"].copy(),
                                 int(steps[1])),
            )
        except KeyError as exc:
            raise FormatError(f"checkpoint missing arrays for pair {(e, op)}") from exc
    return SupernetParams(space, tables)


def save_stores(path, stores: dict[str, SupernetParams]) -> None:
    """Versioned binary checkpoint of named stores; round-trips bit-exactly."""
    meta = {"version": CHECKPOINT_VERSION, "stores": {}}
    arrays = {}
    for name, store in stores.items():
        meta["stores"][name] = {
            "space": space_to_json(store.space),
            "keys": sorted([list(k) for k in store.tables.keys()]),
        }
        arrays.update(_store_arrays(f"{name}__", store))
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_stores(path) -> dict[str, SupernetParams]:
    with np.load(path) as data:
        try:
            meta = json.loads(bytes(data["__meta__"]).decode())
        except (KeyError, ValueError) as exc:
            raise FormatError(f"checkpoint meta block unreadable: {exc}") from exc
        if meta.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {meta.get('version')}")
        return {
            name: _store_from_arrays(f"{name}__", data, entry)
            for name, entry in meta["stores"].items()
        }


def save_store(path, store: SupernetParams) -> None:
    save_stores(path, {"only": store})


def load_store(path) -> SupernetParams:
    stores = load_stores(path)
    if list(stores) != ["only"]:
        raise FormatError("checkpoint does not hold a single store")
    return stores["only"]
