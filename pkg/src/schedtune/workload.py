"""Network and subgraph descriptions plus sketch generation.

A workload file describes a network as a list of subgraphs. Each subgraph is
a small DAG of tensor operators with static shapes. From an operator DAG we
derive loop-structure sketches: high level decisions such as "tile this
matmul and add a cache-write stage" that fix the shape of the low level
parameter space without fixing the parameters themselves.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import yaml


class WorkloadError(ValueError):
    """Raised for unreadable or semantically invalid workload files."""


class OpKind(str, enum.Enum):
    MATMUL = "matmul"
    BATCH_MATMUL = "batch_matmul"
    CONV1D = "conv1d"
    CONV2D = "conv2d"
    CONV3D = "conv3d"
    TRANSPOSED_CONV2D = "transposed_conv2d"
    ELEMENTWISE = "elementwise"
    SOFTMAX = "softmax"
    REDUCTION = "reduction"


# Kinds whose innermost loop is a multiply-accumulate over a reduction axis.
_MAC_KINDS = {
    OpKind.MATMUL,
    OpKind.BATCH_MATMUL,
    OpKind.CONV1D,
    OpKind.CONV2D,
    OpKind.CONV3D,
    OpKind.TRANSPOSED_CONV2D,
}

# Default operator flags by kind: (data_reuse, inlinable, reduction).
_KIND_FLAGS = {
    OpKind.MATMUL: (True, False, True),
    OpKind.BATCH_MATMUL: (True, False, True),
    OpKind.CONV1D: (True, False, True),
    OpKind.CONV2D: (True, False, True),
    OpKind.CONV3D: (True, False, True),
    OpKind.TRANSPOSED_CONV2D: (True, False, True),
    OpKind.ELEMENTWISE: (False, True, False),
    OpKind.SOFTMAX: (False, False, True),
    OpKind.REDUCTION: (False, False, True),
}

# Reduction axes of the iteration space, by kind.
_REDUCE_DIMS = {
    OpKind.MATMUL: ("k",),
    OpKind.BATCH_MATMUL: ("k",),
    OpKind.CONV1D: ("ci", "kw"),
    OpKind.CONV2D: ("ci", "kh", "kw"),
    OpKind.CONV3D: ("ci", "kd", "kh", "kw"),
    OpKind.TRANSPOSED_CONV2D: ("ci", "kh", "kw"),
}


@dataclass(frozen=True)
class TargetConfig:
    """Hardware-target knobs that shape the schedule space."""

    name: str = "cpu"
    tiling_levels: int = 4
    unroll_depths: tuple[int, ...] = (0, 16, 64, 512)
    parallel_fuse_cap: int = 3
    max_feature_dims: int = 10

    def __post_init__(self):
        if self.tiling_levels < 1:
            raise WorkloadError("tiling_levels must be >= 1")
        if not self.unroll_depths:
            raise WorkloadError("unroll_depths must be non-empty")


def gpu_target(tiling_levels: int = 4) -> TargetConfig:
    return TargetConfig(
        name="gpu",
        tiling_levels=tiling_levels,
        unroll_depths=(0, 16, 64, 512, 1024),
    )


@dataclass(frozen=True)
class TensorOpDef:
    """One tensor operator inside a subgraph.

    ``shape`` maps iteration-space dimension names to extents, in loop order.
    ``stride`` and ``padding`` only matter for convolution kinds and feed the
    input-footprint terms.
    """

    name: str
    kind: OpKind
    shape: tuple[tuple[str, int], ...]
    has_data_reuse: bool
    is_inlinable: bool
    has_reduction: bool
    consumers: tuple[str, ...] = ()
    stride: int = 1
    padding: int = 0

    @property
    def extents(self) -> tuple[int, ...]:
        return tuple(e for _, e in self.shape)

    @property
    def dim_names(self) -> tuple[str, ...]:
        return tuple(d for d, _ in self.shape)

    def reduce_dims(self) -> tuple[str, ...]:
        if self.kind in _REDUCE_DIMS:
            return _REDUCE_DIMS[self.kind]
        if self.kind in (OpKind.SOFTMAX, OpKind.REDUCTION):
            return (self.dim_names[-1],)
        return ()

    def is_spatial(self, dim: str) -> bool:
        return dim not in self.reduce_dims()


@dataclass(frozen=True)
class TensorSpec:
    """A tensor touched by an operator, as affine terms over iteration dims.

    Each term is (dim, scale, offset): a tile of size t along ``dim``
    touches scale*t + offset contiguous elements of this tensor axis.
    Plain axes are (dim, 1, 0); strided convolution input axes are
    (dim, stride, kernel - stride).
    """

    name: str
    terms: tuple[tuple[str, int, int], ...]

    def elements(self, tile: dict[str, int]) -> int:
        total = 1
        for dim, scale, offset in self.terms:
            total *= scale * tile[dim] + offset
        return total


def flop_count(node: TensorOpDef) -> float:
    """Floating point operations for one execution of the operator."""
    prod = 1
    for e in node.extents:
        prod *= e
    if node.kind in _MAC_KINDS:
        flops = 2.0 * prod
        if node.kind is OpKind.TRANSPOSED_CONV2D:
            # Output-centric loop nest overcounts scatter MACs by stride^2.
            flops /= float(node.stride * node.stride)
        return flops
    if node.kind is OpKind.SOFTMAX:
        return 4.0 * prod  # max, subtract-exp, sum, divide passes
    return float(prod)


def tensor_specs(node: TensorOpDef) -> tuple[TensorSpec, ...]:
    """Input and output tensors of the operator in footprint-term form."""
    k = node.kind
    s, p = node.stride, node.padding

    def plain(name, dims):
        return TensorSpec(name, tuple((d, 1, 0) for d in dims))

    if k is OpKind.MATMUL:
        return (plain("a", ("m", "k")), plain("b", ("k", "n")),
                plain("out", ("m", "n")))
    if k is OpKind.BATCH_MATMUL:
        return (plain("a", ("b", "m", "k")), plain("b", ("b", "k", "n")),
                plain("out", ("b", "m", "n")))
    if k is OpKind.CONV1D:
        kw = dict(node.shape)["kw"]
        inp = TensorSpec("in", (("n", 1, 0), ("lo", s, kw - s), ("ci", 1, 0)))
        return (inp, plain("w", ("kw", "ci", "co")),
                plain("out", ("n", "lo", "co")))
    if k is OpKind.CONV2D:
        sh = dict(node.shape)
        inp = TensorSpec("in", (("n", 1, 0), ("ho", s, sh["kh"] - s),
                                ("wo", s, sh["kw"] - s), ("ci", 1, 0)))
        return (inp, plain("w", ("kh", "kw", "ci", "co")),
                plain("out", ("n", "ho", "wo", "co")))
    if k is OpKind.CONV3D:
        sh = dict(node.shape)
        inp = TensorSpec("in", (("n", 1, 0), ("do", s, sh["kd"] - s),
                                ("ho", s, sh["kh"] - s),
                                ("wo", s, sh["kw"] - s), ("ci", 1, 0)))
        return (inp, plain("w", ("kd", "kh", "kw", "ci", "co")),
                plain("out", ("n", "do", "ho", "wo", "co")))
    if k is OpKind.TRANSPOSED_CONV2D:
        sh = dict(node.shape)
        # Gather form: each output tile reads at most tile + kernel inputs.
        inp = TensorSpec("in", (("n", 1, 0), ("ho", 1, sh["kh"]),
                                ("wo", 1, sh["kw"]), ("ci", 1, 0)))
        return (inp, plain("w", ("kh", "kw", "ci", "co")),
                plain("out", ("n", "ho", "wo", "co")))
    if k is OpKind.REDUCTION:
        dims = node.dim_names
        return (plain("in", dims), plain("out", dims[:-1]))
    # Elementwise and softmax read and write congruent tensors.
    dims = node.dim_names
    return (plain("in", dims), plain("out", dims))


@dataclass(frozen=True)
class SubgraphSpec:
    """A weighted subgraph: a DAG of operators measured as one unit."""

    id: str
    weight: int
    nodes: tuple[TensorOpDef, ...]
    flops: float = 0.0
    similarity_key: str = ""

    def node(self, name: str) -> TensorOpDef:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    subgraphs: tuple[SubgraphSpec, ...]

    def subgraph(self, sg_id: str) -> SubgraphSpec:
        for sg in self.subgraphs:
            if sg.id == sg_id:
                return sg
        raise KeyError(sg_id)

    @property
    def total_flops(self) -> float:
        return sum(sg.weight * sg.flops for sg in self.subgraphs)


def similar_subgraphs(net: NetworkSpec, sg_id: str) -> set[str]:
    """Subgraph ids sharing the operator-kind multiset with ``sg_id``.

    This is a coarse structural notion of similarity: two subgraphs count as
    similar when they contain the same bag of operator kinds, regardless of
    shapes. Every subgraph is similar to itself.
    """
    key = net.subgraph(sg_id).similarity_key
    return {sg.id for sg in net.subgraphs if sg.similarity_key == key}


# ---------------------------------------------------------------------------
# Workload file loading


def _conv_out(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def _iter_shape(kind: OpKind, raw: dict, where: str):
    """Map a raw shape mapping to (iteration dims, stride, padding)."""
    stride = int(raw.get("stride", 1))
    padding = int(raw.get("padding", 0))
    kernel = int(raw.get("kernel", 1))
    if stride < 1:
        raise WorkloadError(f"{where}: stride must be >= 1")
    if padding < 0:
        raise WorkloadError(f"{where}: padding must be >= 0")

    def need(*keys):
        out = []
        for key in keys:
            if key not in raw:
                raise WorkloadError(f"{where}: missing shape field '{key}'")
            out.append(int(raw[key]))
        return out

    if kind is OpKind.MATMUL:
        m, k, n = need("m", "k", "n")
        dims = [("m", m), ("k", k), ("n", n)]
    elif kind is OpKind.BATCH_MATMUL:
        b, m, k, n = need("b", "m", "k", "n")
        dims = [("b", b), ("m", m), ("k", k), ("n", n)]
    elif kind is OpKind.CONV1D:
        n, l, ci, co = need("n", "l", "ci", "co")
        lo = _conv_out(l, kernel, stride, padding)
        dims = [("n", n), ("lo", lo), ("co", co), ("ci", ci), ("kw", kernel)]
    elif kind is OpKind.CONV2D:
        n, h, w, ci, co = need("n", "h", "w", "ci", "co")
        ho = _conv_out(h, kernel, stride, padding)
        wo = _conv_out(w, kernel, stride, padding)
        dims = [("n", n), ("ho", ho), ("wo", wo), ("co", co),
                ("ci", ci), ("kh", kernel), ("kw", kernel)]
    elif kind is OpKind.CONV3D:
        n, d, h, w, ci, co = need("n", "d", "h", "w", "ci", "co")
        do = _conv_out(d, kernel, stride, padding)
        ho = _conv_out(h, kernel, stride, padding)
        wo = _conv_out(w, kernel, stride, padding)
        dims = [("n", n), ("do", do), ("ho", ho), ("wo", wo), ("co", co),
                ("ci", ci), ("kd", kernel), ("kh", kernel), ("kw", kernel)]
    elif kind is OpKind.TRANSPOSED_CONV2D:
        n, h, w, ci, co = need("n", "h", "w", "ci", "co")
        ho = (h - 1) * stride - 2 * padding + kernel
        wo = (w - 1) * stride - 2 * padding + kernel
        dims = [("n", n), ("ho", ho), ("wo", wo), ("co", co),
                ("ci", ci), ("kh", kernel), ("kw", kernel)]
    else:
        dims = []
        for key, val in raw.items():
            if key in ("stride", "padding", "kernel"):
                continue
            dims.append((str(key), int(val)))
        if not dims:
            raise WorkloadError(f"{where}: shape has no dimensions")

    for dname, ext in dims:
        if ext < 1:
            raise WorkloadError(
                f"{where}: extent '{dname}' must be >= 1, got {ext}")
    return tuple(dims), stride, padding


def _load_node(raw: dict, where: str) -> TensorOpDef:
    if not isinstance(raw, dict):
        raise WorkloadError(f"{where}: node entry must be a mapping")
    name = raw.get("name")
    if not name:
        raise WorkloadError(f"{where}: node missing 'name'")
    where = f"{where} node '{name}'"
    try:
        kind = OpKind(raw.get("kind", ""))
    except ValueError:
        raise WorkloadError(f"{where}: unknown kind {raw.get('kind')!r}") from None
    shape_raw = raw.get("shape")
    if not isinstance(shape_raw, dict):
        raise WorkloadError(f"{where}: 'shape' must be a mapping")
    shape, stride, padding = _iter_shape(kind, shape_raw, where)

    reuse, inlin, red = _KIND_FLAGS[kind]
    reuse = bool(raw.get("has_data_reuse", reuse))
    inlin = bool(raw.get("is_inlinable", inlin))
    red = bool(raw.get("has_reduction", red))
    if kind is OpKind.ELEMENTWISE and not inlin:
        raise WorkloadError(f"{where}: elementwise operators must be inlinable")
    if kind in _MAC_KINDS and not (reuse and red):
        raise WorkloadError(
            f"{where}: multiply-accumulate kinds need data reuse and reduction")

    consumers = tuple(str(c) for c in raw.get("consumers", []))
    return TensorOpDef(name=str(name), kind=kind, shape=shape,
                       has_data_reuse=reuse, is_inlinable=inlin,
                       has_reduction=red, consumers=consumers,
                       stride=stride, padding=padding)


def _load_subgraph(raw: dict, where: str) -> SubgraphSpec:
    if not isinstance(raw, dict):
        raise WorkloadError(f"{where}: subgraph entry must be a mapping")
    sg_id = raw.get("id")
    if not sg_id:
        raise WorkloadError(f"{where}: subgraph missing 'id'")
    where = f"subgraph '{sg_id}'"
    weight = int(raw.get("weight", 1))
    if weight < 1:
        raise WorkloadError(f"{where}: weight must be >= 1")
    nodes_raw = raw.get("nodes")
    if not nodes_raw:
        raise WorkloadError(f"{where}: needs at least one node")
    nodes = tuple(_load_node(n, where) for n in nodes_raw)

    names = [n.name for n in nodes]
    if len(set(names)) != len(names):
        raise WorkloadError(f"{where}: duplicate node names")
    order = {n: i for i, n in enumerate(names)}
    for n in nodes:
        for c in n.consumers:
            if c not in order:
                raise WorkloadError(
                    f"{where}: node '{n.name}' lists unknown consumer '{c}'")
            if order[c] <= order[n.name]:
                raise WorkloadError(
                    f"{where}: consumer '{c}' must come after '{n.name}'")

    flops = sum(flop_count(n) for n in nodes)
    if flops <= 0:
        raise WorkloadError(f"{where}: total flop count must be positive")
    key = "|".join(sorted(n.kind.value for n in nodes))
    return SubgraphSpec(id=str(sg_id), weight=weight, nodes=nodes,
                        flops=flops, similarity_key=key)


def load_network(path: str) -> NetworkSpec:
    """Parse and validate a workload YAML file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise WorkloadError(f"cannot read workload file: {exc}") from exc
    except yaml.YAMLError as exc:
        raise WorkloadError(f"workload parse error: {exc}") from exc
    if not isinstance(raw, dict):
        raise WorkloadError("workload file must contain a mapping at top level")
    name = str(raw.get("name", "network"))
    sg_raw = raw.get("subgraphs")
    if not sg_raw:
        raise WorkloadError("workload must define a non-empty 'subgraphs' list")
    subgraphs = tuple(_load_subgraph(s, f"subgraphs[{i}]")
                      for i, s in enumerate(sg_raw))
    ids = [sg.id for sg in subgraphs]
    if len(set(ids)) != len(ids):
        raise WorkloadError("duplicate subgraph ids")
    return NetworkSpec(name=name, subgraphs=subgraphs)


# ---------------------------------------------------------------------------
# Sketch generation


class Structure(str, enum.Enum):
    """Loop-structure decision for one node within a sketch."""

    TILED = "tiled"
    TILED_FUSED = "tiled_fused"
    CACHE_WRITE_TILED = "cache_write_tiled"
    RFACTOR_TILED = "rfactor_tiled"
    INLINED = "inlined"
    SKIPPED = "skipped"


ANCHOR_STRUCTURES = (Structure.TILED, Structure.TILED_FUSED,
                     Structure.CACHE_WRITE_TILED, Structure.RFACTOR_TILED)

# Structures that introduce an intermediate buffer and therefore a deeper
# compute-at placement choice.
_INTERMEDIATE_STRUCTURES = (Structure.TILED_FUSED,
                            Structure.CACHE_WRITE_TILED,
                            Structure.RFACTOR_TILED)


@dataclass(frozen=True)
class TiledDim:
    node: str
    dim: str
    extent: int
    is_spatial: bool


@dataclass(frozen=True)
class SpaceDescriptor:
    """Shape of the low level parameter space below one sketch."""

    tiled_dims: tuple[TiledDim, ...]
    levels: int
    compute_at_candidates: tuple[tuple[str, int], ...]
    max_fusible: int
    unroll_depths: tuple[int, ...]

    @property
    def num_tile_slots(self) -> int:
        return len(self.tiled_dims) * self.levels


@dataclass(frozen=True)
class Sketch:
    """One loop-structure variant of a subgraph."""

    id: str
    subgraph_id: str
    structures: tuple[tuple[str, Structure], ...]
    space: SpaceDescriptor
    absorbed_by: tuple[tuple[str, str], ...] = ()

    def structure_of(self, node: str) -> Structure:
        return dict(self.structures)[node]


def _node_options(node: TensorOpDef, consumer: str | None,
                  assigned: dict[str, Structure]) -> list[Structure]:
    """Applicable structures for a node, in fixed rule order.

    Rule order: skip, inline, tile, tile-with-fusion, cache-write, rfactor.
    Tiling variants take precedence over skipping for data-reuse nodes, and
    inlining is exclusive when available.
    """
    if node.is_inlinable and consumer is not None:
        return [Structure.INLINED]
    if node.has_data_reuse:
        opts = [Structure.TILED]
        fusable = (consumer is not None
                   and assigned.get(consumer) in (Structure.SKIPPED,
                                                  Structure.INLINED))
        if fusable:
            opts.append(Structure.TILED_FUSED)
        if consumer is None:
            opts.append(Structure.CACHE_WRITE_TILED)
        if node.has_reduction:
            opts.append(Structure.RFACTOR_TILED)
        return opts
    opts = [Structure.SKIPPED]
    if node.has_reduction:
        opts.append(Structure.RFACTOR_TILED)
    return opts


def generate_sketches(sg: SubgraphSpec, target: TargetConfig) -> list[Sketch]:
    """Enumerate the deterministic, duplicate-free sketch list of a subgraph.

    Nodes are visited in reverse topological order (consumers before
    producers) so a producer that fuses into its consumer sees the consumer's
    structure decision already made.
    """
    rev_nodes = list(reversed(sg.nodes))
    combos: list[dict[str, Structure]] = [{}]
    for node in rev_nodes:
        consumer = node.consumers[0] if node.consumers else None
        nxt = []
        for assigned in combos:
            for opt in _node_options(node, consumer, assigned):
                upd = dict(assigned)
                upd[node.name] = opt
                if opt is Structure.TILED_FUSED:
                    # The consumer's stage dissolves into the producer's loops.
                    upd[consumer] = Structure.INLINED
                nxt.append(upd)
        combos = nxt

    sketches: list[Sketch] = []
    seen: set[tuple] = set()
    levels = target.tiling_levels
    for assigned in combos:
        struct = tuple((n.name, assigned[n.name]) for n in sg.nodes)
        if struct in seen:
            continue
        seen.add(struct)

        tiled: list[TiledDim] = []
        anchors = []
        has_intermediate = False
        for node in sg.nodes:
            st = assigned[node.name]
            if st not in ANCHOR_STRUCTURES:
                continue
            anchors.append(node.name)
            if st in _INTERMEDIATE_STRUCTURES:
                has_intermediate = True
            for dim, extent in node.shape:
                tiled.append(TiledDim(node=node.name, dim=dim, extent=extent,
                                      is_spatial=node.is_spatial(dim)))
        if len(tiled) > target.max_feature_dims:
            raise WorkloadError(
                f"subgraph '{sg.id}' tiles {len(tiled)} dimensions, above the "
                f"feature budget of {target.max_feature_dims}")

        ca = [("root", 0)]
        if has_intermediate and anchors:
            ca.append((anchors[0], levels - 1))
        n_spatial = sum(1 for d in tiled if d.is_spatial)
        max_fusible = min(levels, target.parallel_fuse_cap) if n_spatial else 0

        space = SpaceDescriptor(tiled_dims=tuple(tiled), levels=levels,
                                compute_at_candidates=tuple(ca),
                                max_fusible=max_fusible,
                                unroll_depths=target.unroll_depths)
        absorbed = _absorption_map(sg, assigned)
        sketches.append(Sketch(id=f"{sg.id}::k{len(sketches)}",
                               subgraph_id=sg.id, structures=struct,
                               space=space, absorbed_by=tuple(absorbed)))
    return sketches


def _absorption_map(sg: SubgraphSpec, assigned: dict[str, Structure]):
    """Map each inlined node to the stage whose loops execute its compute."""
    fused_consumer = {}
    for node in sg.nodes:
        if assigned[node.name] is Structure.TILED_FUSED and node.consumers:
            fused_consumer[node.consumers[0]] = node.name

    def resolve(name: str, depth: int = 0) -> str:
        if depth > len(sg.nodes):
            return name
        if assigned.get(name) is not Structure.INLINED:
            return name
        if name in fused_consumer:
            return fused_consumer[name]
        node = sg.node(name)
        if node.consumers:
            return resolve(node.consumers[0], depth + 1)
        return name

    out = []
    for node in sg.nodes:
        if assigned[node.name] is Structure.INLINED:
            out.append((node.name, resolve(node.name)))
    return out


def effective_flops(sg: SubgraphSpec, sketch: Sketch) -> dict[str, float]:
    """Per-stage flop totals after folding inlined nodes into their hosts."""
    absorbed = dict(sketch.absorbed_by)
    out: dict[str, float] = {}
    for node in sg.nodes:
        st = sketch.structure_of(node.name)
        if st is Structure.INLINED:
            continue
        out[node.name] = flop_count(node)
    for name, host in absorbed.items():
        if host in out:
            out[host] += flop_count(sg.node(name))
        else:
            # Inline chain ended on another inlined node; fold into the first
            # real stage to keep totals conserved.
            first = next(iter(out))
            out[first] += flop_count(sg.node(name))
    return out
