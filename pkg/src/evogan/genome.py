"""Search space, genome encoding, genetic operators, and architecture export.

A network is a DAG over three input nodes (semantic vector ``a``, noise ``z``
or feature ``x``, and their concatenation) plus a chain of ordered hidden
nodes ending in the output node.  Every (source -> target) pair with the
source preceding the target is an edge, and each edge carries exactly one of
five candidate operations (one-hot choice):

    0  FC+ReLU
    1  FC+ReLU+DropOut
    2  FC+LeakyReLU
    3  FC+LeakyReLU+DropOut
    4  None (no connection)

A genome is the per-edge operation index vector; the default space has
5 hidden/output nodes, hence 25 edges and 5**25 candidate subnets.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError, ParameterError
from .numerics import DROPOUT_RATE_DEFAULT, LEAKY_SLOPE_DEFAULT

OP_NAMES = ("FC+ReLU", "FC+ReLU+DropOut", "FC+LeakyReLU", "FC+LeakyReLU+DropOut", "None")
OP_NONE = 4
NON_NONE_OPS = (0, 1, 2, 3)
# op index -> (activation kind, uses dropout)
OP_SEMANTICS = {
    0: ("relu", False),
    1: ("relu", True),
    2: ("leaky_relu", False),
    3: ("leaky_relu", True),
}

N_INPUTS = 3
GENERATOR = "generator"
DISCRIMINATOR = "discriminator"

# Paper-default hidden/output widths for 2048-dim visual features.
GENERATOR_NODE_DIMS = (512, 1024, 2048, 4096, 2048)
DISCRIMINATOR_NODE_DIMS = (4096, 2048, 1024, 512, 1)


@lru_cache(maxsize=None)
def edge_list(n_edges: int) -> tuple[tuple[int, int], ...]:
    """Topologically ordered edges for the space with the given edge count.

    Nodes are indexed 0..2 for inputs and 3..3+m-1 for the ordered hidden
    nodes (last one is the output).  Edges are grouped by target node so a
    single pass over the list evaluates the DAG.
    """
    m = _n_hidden_for_edges(n_edges)
    edges = []
    for j in range(m):
        target = N_INPUTS + j
        for src in range(N_INPUTS + j):
            edges.append((src, target))
    return tuple(edges)


def _n_hidden_for_edges(n_edges: int) -> int:
    # n_edges = 3m + m(m-1)/2 has a unique positive solution
    m = 1
    while 3 * m + m * (m - 1) // 2 < n_edges:
        m += 1
    if 3 * m + m * (m - 1) // 2 != n_edges:
        raise ParameterError(f"{n_edges} edges does not match any ordered-node space")
    return m


def n_edges_for_hidden(m: int) -> int:
    return 3 * m + m * (m - 1) // 2


@dataclass(frozen=True)
class SearchSpace:
    """Topology and dimensions shared by all genomes of one role."""

    role: str
    input_dims: tuple[int, int, int]  # (|A|, d_z or d_x, concat)
    node_dims: tuple[int, ...]        # hidden nodes; last entry is the output
    leaky_slope: float = LEAKY_SLOPE_DEFAULT
    dropout_rate: float = DROPOUT_RATE_DEFAULT

    def __post_init__(self):
        if self.role not in (GENERATOR, DISCRIMINATOR):
            raise ParameterError(f"unknown role {self.role!r}")
        if len(self.node_dims) < 1:
            raise ParameterError("need at least one node (the output)")
        if any(d < 1 for d in self.node_dims) or any(d < 1 for d in self.input_dims):
            raise ParameterError("all dimensions must be positive")
        if self.input_dims[2] != self.input_dims[0] + self.input_dims[1]:
            raise ParameterError(
                f"concat input dim {self.input_dims[2]} != "
                f"{self.input_dims[0]} + {self.input_dims[1]}"
            )
        if self.role == DISCRIMINATOR and self.node_dims[-1] != 1:
            raise ParameterError("discriminator output dimension must be 1")

    @property
    def n_hidden(self) -> int:
        return len(self.node_dims)

    @property
    def n_nodes(self) -> int:
        return N_INPUTS + self.n_hidden

    @property
    def output_node(self) -> int:
        return self.n_nodes - 1

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        return edge_list(n_edges_for_hidden(self.n_hidden))

    @property
    def n_edges(self) -> int:
        return n_edges_for_hidden(self.n_hidden)

    def node_dim(self, node: int) -> int:
        if node < N_INPUTS:
            return self.input_dims[node]
        return self.node_dims[node - N_INPUTS]

    def edge_dims(self, edge_idx: int) -> tuple[int, int]:
        """(d_source, d_target) of an edge."""
        src, dst = self.edges[edge_idx]
        return self.node_dim(src), self.node_dim(dst)

    def input_labels(self) -> tuple[str, str, str]:
        second = "z" if self.role == GENERATOR else "x"
        return ("a", second, f"a+{second}")


def generator_space(attr_dim: int, noise_dim: int | None = None,
                    feature_dim: int = 2048,
                    node_dims: tuple[int, ...] | None = None, **kw) -> SearchSpace:
    """Generator space: inputs (a, z, a+z); output dim = feature_dim."""
    noise_dim = attr_dim if noise_dim is None else noise_dim
    if node_dims is None:
        node_dims = scaled_node_dims(GENERATOR, feature_dim)
    if node_dims[-1] != feature_dim:
        raise ParameterError(
            f"generator output dim {node_dims[-1]} != feature dim {feature_dim}"
        )
    return SearchSpace(GENERATOR, (attr_dim, noise_dim, attr_dim + noise_dim),
                       tuple(node_dims), **kw)


def discriminator_space(attr_dim: int, feature_dim: int = 2048,
                        node_dims: tuple[int, ...] | None = None, **kw) -> SearchSpace:
    """Discriminator (critic) space: inputs (a, x, a+x); scalar output."""
    if node_dims is None:
        node_dims = scaled_node_dims(DISCRIMINATOR, feature_dim)
    return SearchSpace(DISCRIMINATOR, (attr_dim, feature_dim, attr_dim + feature_dim),
                       tuple(node_dims), **kw)


def scaled_node_dims(role: str, feature_dim: int) -> tuple[int, ...]:
    """Hidden widths proportional to the feature dimension.

    At feature_dim=2048 these are the stock widths (512, 1024, 2048, 4096,
    2048) for the generator and (4096, 2048, 1024, 512, 1) for the critic;
    smaller feature spaces scale down proportionally.
    """
    d = feature_dim
    if role == GENERATOR:
        return (max(1, d // 4), max(1, d // 2), d, 2 * d, d)
    if role == DISCRIMINATOR:
        return (2 * d, d, max(1, d // 2), max(1, d // 4), 1)
    raise ParameterError(f"unknown role {role!r}")


# ---------------------------------------------------------------------------
# genome


@dataclass(frozen=True)
class Genome:
    """Per-edge operation choices for one role's search space."""

    role: str
    ops: tuple[int, ...]

    def __post_init__(self):
        if any(op not in range(len(OP_NAMES)) for op in self.ops):
            raise ParameterError("genome op indices must be in 0..4")
        _n_hidden_for_edges(len(self.ops))  # validates the edge count

    @property
    def n_edges(self) -> int:
        return len(self.ops)

    def active_edges(self) -> tuple[int, ...]:
        return tuple(i for i, op in enumerate(self.ops) if op != OP_NONE)

    def replace(self, updates: dict[int, int]) -> "Genome":
        ops = list(self.ops)
        for pos, op in updates.items():
            ops[pos] = op
        return Genome(self.role, tuple(ops))


def genome_hash(g: Genome) -> str:
    payload = f"{g.role}:" + ",".join(str(op) for op in g.ops)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def same_space(g: Genome, space: SearchSpace) -> bool:
    return g.role == space.role and g.n_edges == space.n_edges


def edge_semantics(role: str, edge_idx: int, op: int, n_edges: int):
    """(activation kind or None, use_dropout) for an edge's operation.

    Edges feeding the critic's output node degrade to a plain affine map so
    the critic emits an unconstrained score.  Generator output edges keep
    their labelled activation (features stay non-negative like post-ReLU CNN
    features) but never drop out: synthesized samples must be clean, and
    zeroed coordinates would hand the critic a trivial real/fake tell.  The
    op label is stored verbatim either way for export fidelity.
    """
    if op == OP_NONE:
        raise ParameterError("None op has no forward semantics")
    act, drop = OP_SEMANTICS[op]
    edges = edge_list(n_edges)
    dst_is_output = edges[edge_idx][1] == N_INPUTS + _n_hidden_for_edges(n_edges) - 1
    if dst_is_output:
        if role == DISCRIMINATOR:
            return None, False
        return act, False
    return act, drop


# ---------------------------------------------------------------------------
# canonicalization / connectivity


def _reachability(ops: tuple[int, ...]):
    """(forward-reachable node set, output-coreachable node set)."""
    edges = edge_list(len(ops))
    m = _n_hidden_for_edges(len(ops))
    n_nodes = N_INPUTS + m
    out_node = n_nodes - 1

    reach = set(range(N_INPUTS))
    for i, (src, dst) in enumerate(edges):  # edges are target-major ordered
        if ops[i] != OP_NONE and src in reach:
            reach.add(dst)

    coreach = {out_node}
    for i in range(len(edges) - 1, -1, -1):
        src, dst = edges[i]
        if ops[i] != OP_NONE and dst in coreach:
            coreach.add(src)
    return reach, coreach


def canonicalize(g: Genome) -> Genome:
    """Prune edges incident to nodes that are off every input->output path.

    A node is kept only if it is reachable from some input and the output is
    reachable from it; all other nodes lose their incident edges.  Idempotent,
    and equivalent to keeping exactly the edges that lie on at least one fully
    active input->output path.
    """
    reach, coreach = _reachability(g.ops)
    keep = reach & coreach
    edges = edge_list(g.n_edges)
    ops = tuple(
        op if op != OP_NONE and edges[i][0] in keep and edges[i][1] in keep
        else OP_NONE
        for i, op in enumerate(g.ops)
    )
    return Genome(g.role, ops)


def is_canonical(g: Genome) -> bool:
    return canonicalize(g).ops == g.ops


def is_connected(g: Genome) -> bool:
    """True when at least one input->output path is fully active."""
    reach, coreach = _reachability(g.ops)
    out_node = N_INPUTS + _n_hidden_for_edges(g.n_edges) - 1
    return out_node in reach and any(i in coreach for i in range(N_INPUTS))


def repair(g: Genome, rng: np.random.Generator) -> Genome:
    """Guarantee connectivity: a disconnected genome gets one random direct
    input->output edge with a random non-None op (minimal viable subnet)."""
    canon = canonicalize(g)
    if canon.active_edges():
        return canon
    edges = edge_list(g.n_edges)
    out_node = N_INPUTS + _n_hidden_for_edges(g.n_edges) - 1
    direct = [i for i, (src, dst) in enumerate(edges)
              if src < N_INPUTS and dst == out_node]
    pos = direct[int(rng.integers(len(direct)))]
    op = int(rng.choice(NON_NONE_OPS))
    return canon.replace({pos: op})


def complexity(g: Genome) -> float:
    """Active-edge fraction: (non-None edges) / (all edges), in [0, 1]."""
    if not is_canonical(g):
        raise ContractError("complexity requires a canonical genome")
    return len(g.active_edges()) / g.n_edges


# ---------------------------------------------------------------------------
# genetic operators


def random_genome(space: SearchSpace, none_bias: float,
                  rng: np.random.Generator) -> Genome:
    """Random genome: uniform non-None op per edge, each independently
    knocked out to None with probability ``none_bias``; repaired canonical."""
    if not 0.0 <= none_bias <= 1.0:
        raise ParameterError(f"none_bias must be in [0, 1], got {none_bias}")
    ops, _ = random_ops(space.n_edges, none_bias, rng)
    return repair(Genome(space.role, ops), rng)


def random_ops(n_edges: int, none_bias: float, rng: np.random.Generator):
    """Pre-repair op draw; returns (ops tuple, none-knockout mask)."""
    base = rng.integers(0, len(NON_NONE_OPS), size=n_edges)
    knockout = rng.random(n_edges) < none_bias
    ops = tuple(OP_NONE if knockout[i] else int(base[i]) for i in range(n_edges))
    return ops, knockout


def uniform_genome(space: SearchSpace, rng: np.random.Generator) -> Genome | None:
    """Each edge uniform over all five ops (warm-up sampling).  Returns the
    canonical genome, or None when no input->output path survives."""
    ops = tuple(int(v) for v in rng.integers(0, len(OP_NAMES), size=space.n_edges))
    g = canonicalize(Genome(space.role, ops))
    return g if g.active_edges() else None


def crossover_mask(rng: np.random.Generator, n_edges: int) -> np.ndarray:
    """Uniformly random half-size subset of edge positions taken from p2."""
    return rng.permutation(n_edges)[: n_edges // 2]


def crossover_raw(p1: Genome, p2: Genome, rng: np.random.Generator):
    """Pre-canonicalization child ops and the swapped positions."""
    if p1.role != p2.role or p1.n_edges != p2.n_edges:
        raise ParameterError("crossover parents must share a search space role")
    mask = crossover_mask(rng, p1.n_edges)
    swapped = set(int(i) for i in mask)
    ops = tuple(p2.ops[i] if i in swapped else p1.ops[i] for i in range(p1.n_edges))
    return ops, swapped


def crossover(p1: Genome, p2: Genome, rng: np.random.Generator) -> Genome:
    """Child takes a random half of edge positions from p2, rest from p1."""
    ops, _ = crossover_raw(p1, p2, rng)
    return repair(Genome(p1.role, ops), rng)


MUTATION_ARITIES = (1, 2, 4)
MUTATION_ARITY_PROBS = (0.5, 0.3, 0.2)


def mutate_raw(g: Genome, rng: np.random.Generator):
    """Pre-canonicalization mutation: k in {1,2,4} positions (probabilities
    0.5/0.3/0.2) each replaced by a uniformly chosen *different* op."""
    k = int(rng.choice(MUTATION_ARITIES, p=MUTATION_ARITY_PROBS))
    k = min(k, g.n_edges)
    positions = [int(i) for i in rng.permutation(g.n_edges)[:k]]
    updates = {}
    for pos in positions:
        others = [op for op in range(len(OP_NAMES)) if op != g.ops[pos]]
        updates[pos] = int(rng.choice(others))
    return g.replace(updates).ops, positions


def mutate(g: Genome, rng: np.random.Generator) -> Genome:
    ops, _ = mutate_raw(g, rng)
    return repair(Genome(g.role, ops), rng)


# ---------------------------------------------------------------------------
# stock architectures


def fixed_clswgan_discriminator(space: SearchSpace) -> Genome:
    """The stock two-layer conditional critic: (a+x) -> M0 -> output.

    Both edges are labelled FC+LeakyReLU; the output edge runs as a plain
    affine map per the critic output rule.
    """
    if space.role != DISCRIMINATOR:
        raise ParameterError("fixed critic genome requires a discriminator space")
    return _two_edge_genome(space, op=2)


def fixed_clswgan_generator(space: SearchSpace) -> Genome:
    """Stock conditional generator: (a+z) -> FC+LeakyReLU -> FC+ReLU output."""
    if space.role != GENERATOR:
        raise ParameterError("fixed generator genome requires a generator space")
    if space.n_hidden >= 4:
        hidden = space.n_hidden - 2   # the widest hidden node in stock dims
    else:
        hidden = 0
    return _chain_genome(space, hidden, in_op=2, out_op=0)


def _two_edge_genome(space: SearchSpace, op: int) -> Genome:
    return _chain_genome(space, 0, in_op=op, out_op=op)


def _chain_genome(space: SearchSpace, hidden_idx: int, in_op: int, out_op: int) -> Genome:
    edges = space.edges
    hidden_node = N_INPUTS + hidden_idx
    out_node = space.output_node
    ops = [OP_NONE] * space.n_edges
    if hidden_node == out_node:
        ops[edges.index((2, out_node))] = in_op
    else:
        ops[edges.index((2, hidden_node))] = in_op
        ops[edges.index((hidden_node, out_node))] = out_op
    return Genome(space.role, tuple(ops))


# ---------------------------------------------------------------------------
# export


@dataclass
class ArchReport:
    """Structured description of one architecture for humans and tools."""

    genome: Genome
    active_edge_count: int
    fan_in: dict[str, int]
    parameter_count: int
    dot: str

    def to_json(self, space: SearchSpace) -> dict:
        return {
            "genome": genome_to_json(self.genome, space),
            "active_edge_count": self.active_edge_count,
            "fan_in": self.fan_in,
            "parameter_count": self.parameter_count,
            "dot": self.dot,
        }


def node_label(space: SearchSpace, node: int) -> str:
    labels = space.input_labels()
    if node < N_INPUTS:
        return labels[node]
    if node == space.output_node:
        return "o"
    return f"M{node - N_INPUTS}"


def export_arch(g: Genome, space: SearchSpace) -> ArchReport:
    """DOT digraph plus counts for a canonical genome."""
    if not same_space(g, space):
        raise ParameterError("genome does not belong to this space")
    if not is_canonical(g):
        raise ContractError("export requires a canonical genome")
    edges = space.edges
    active = g.active_edges()

    fan_in: dict[str, int] = {}
    params = 0
    for i in active:
        src, dst = edges[i]
        name = node_label(space, dst)
        fan_in[name] = fan_in.get(name, 0) + 1
        d_src, d_dst = space.edge_dims(i)
        params += d_dst * d_src + d_dst

    used_nodes = sorted({n for i in active for n in edges[i]})
    lines = [f"digraph {space.role} {{", "  rankdir=LR;"]
    for node in range(N_INPUTS):
        shape = "ellipse"
        lines.append(f'  n{node} [label="{node_label(space, node)}", shape={shape}];')
    for node in range(N_INPUTS, space.n_nodes):
        if node in used_nodes or node == space.output_node:
            label = node_label(space, node)
            dim = space.node_dim(node)
            lines.append(f'  n{node} [label="{label} ({dim})", shape=box];')
    for i in active:
        src, dst = edges[i]
        lines.append(f'  n{src} -> n{dst} [label="{OP_NAMES[g.ops[i]]}"];')
    lines.append("}")

    return ArchReport(
        genome=g,
        active_edge_count=len(active),
        fan_in=fan_in,
        parameter_count=params,
        dot="\n".join(lines) + "\n",
    )


def space_to_json(space: SearchSpace) -> dict:
    return {
        "role": space.role,
        "input_dims": list(space.input_dims),
        "node_dims": list(space.node_dims),
        "leaky_slope": space.leaky_slope,
        "dropout_rate": space.dropout_rate,
    }


def space_from_json(data: dict) -> SearchSpace:
    try:
        return SearchSpace(
            role=data["role"],
            input_dims=tuple(int(v) for v in data["input_dims"]),
            node_dims=tuple(int(v) for v in data["node_dims"]),
            leaky_slope=float(data["leaky_slope"]),
            dropout_rate=float(data["dropout_rate"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParameterError(f"malformed space JSON: {exc}") from exc


def genome_to_json(g: Genome, space: SearchSpace) -> dict:
    return {
        "role": g.role,
        "ops": list(g.ops),
        "node_dims": list(space.node_dims),
        "input_dims": list(space.input_dims),
    }


def genome_from_json(data: dict) -> tuple[Genome, SearchSpace]:
    try:
        role = data["role"]
        ops = tuple(int(v) for v in data["ops"])
        node_dims = tuple(int(v) for v in data["node_dims"])
        input_dims = tuple(int(v) for v in data["input_dims"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParameterError(f"malformed genome JSON: {exc}") from exc
    space = SearchSpace(role, input_dims, node_dims)
    g = Genome(role, ops)
    if g.n_edges != space.n_edges:
        raise ParameterError(
            f"ops length {g.n_edges} does not match space with {space.n_edges} edges"
        )
    return g, space


def save_genome(path, g: Genome, space: SearchSpace) -> None:
    with open(path, "w") as fh:
        json.dump(genome_to_json(g, space), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_genome(path) -> tuple[Genome, SearchSpace]:
    with open(path) as fh:
        return genome_from_json(json.load(fh))
