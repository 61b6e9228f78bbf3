"""Low level schedule states and the modification action space.

A schedule state fixes every free parameter below a sketch: multi-level tile
factors for each tiled dimension, one compute-at placement, how many outer
loop levels are fused for parallelism, and an unroll depth. States move
through the space via small modification actions, one pick per subspace
(tiling move, compute-at shift, parallel shift, unroll shift), each with an
explicit do-nothing choice so the policy can leave a subspace alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .workload import (ANCHOR_STRUCTURES, Sketch, Structure, SubgraphSpec,
                       TargetConfig, effective_flops, tensor_specs)


class ScheduleError(ValueError):
    """Raised for malformed schedule states or canonical forms."""


class InvalidActionError(ValueError):
    """Raised when a modification violates its subspace constraints."""

    def __init__(self, subspace: str, detail: str):
        super().__init__(f"invalid {subspace} action: {detail}")
        self.subspace = subspace


# ---------------------------------------------------------------------------
# Tiling enumeration


def _divisors(n: int) -> tuple[int, ...]:
    small, large = [], []
    i = 1
    while i * i <= n:
        if n % i == 0:
            small.append(i)
            if i != n // i:
                large.append(n // i)
        i += 1
    return tuple(small + large[::-1])


@lru_cache(maxsize=None)
def enumerate_tilings(extent: int, levels: int) -> int:
    """Count ordered factorizations of ``extent`` into ``levels`` factors."""
    if extent < 1 or levels < 1:
        raise ScheduleError("extent and levels must be >= 1")
    if levels == 1:
        return 1
    return sum(enumerate_tilings(extent // d, levels - 1)
               for d in _divisors(extent))


@lru_cache(maxsize=None)
def list_tilings(extent: int, levels: int) -> tuple[tuple[int, ...], ...]:
    """All ordered factorizations, in deterministic lexicographic order."""
    if levels == 1:
        return ((extent,),)
    out = []
    for d in _divisors(extent):
        for rest in list_tilings(extent // d, levels - 1):
            out.append((d,) + rest)
    return tuple(out)


def smallest_prime_factor(n: int) -> int:
    if n < 2:
        raise ScheduleError(f"no prime factor of {n}")
    if n % 2 == 0:
        return 2
    i = 3
    while i * i <= n:
        if n % i == 0:
            return i
        i += 2
    return n


def space_size(sketch: Sketch) -> int:
    """Exact number of schedule states below the sketch.

    Python integers are unbounded, so arbitrarily large spaces are counted
    exactly rather than overflowing.
    """
    sp = sketch.space
    total = 1
    for td in sp.tiled_dims:
        total *= enumerate_tilings(td.extent, sp.levels)
    total *= len(sp.unroll_depths)
    total *= sp.max_fusible + 1
    total *= len(sp.compute_at_candidates)
    return total


# ---------------------------------------------------------------------------
# Schedule states


@dataclass(frozen=True)
class ScheduleState:
    """A complete parameter assignment for one sketch."""

    sketch_id: str
    tiles: tuple[tuple[int, ...], ...]
    compute_at_index: int = 0
    parallel_fuse_count: int = 0
    unroll_index: int = 0

    def canonical(self) -> str:
        dims = ";".join(".".join(str(f) for f in t) for t in self.tiles)
        return (f"{self.sketch_id}|t={dims}|ca={self.compute_at_index}"
                f"|par={self.parallel_fuse_count}|ur={self.unroll_index}")


def parse_state(text: str, sketch: Sketch) -> ScheduleState:
    """Parse the canonical text form back into a validated state."""
    try:
        sk_id, t_part, ca_part, par_part, ur_part = text.split("|")
        tiles = tuple(tuple(int(f) for f in d.split("."))
                      for d in t_part.removeprefix("t=").split(";"))
        state = ScheduleState(sketch_id=sk_id, tiles=tiles,
                              compute_at_index=int(ca_part.removeprefix("ca=")),
                              parallel_fuse_count=int(par_part.removeprefix("par=")),
                              unroll_index=int(ur_part.removeprefix("ur=")))
    except (ValueError, IndexError) as exc:
        raise ScheduleError(f"malformed schedule text {text!r}") from exc
    validate_state(state, sketch)
    return state


def validate_state(state: ScheduleState, sketch: Sketch) -> None:
    sp = sketch.space
    if state.sketch_id != sketch.id:
        raise ScheduleError(
            f"state belongs to sketch {state.sketch_id!r}, not {sketch.id!r}")
    if len(state.tiles) != len(sp.tiled_dims):
        raise ScheduleError("tile list length does not match tiled dims")
    for td, factors in zip(sp.tiled_dims, state.tiles):
        if len(factors) != sp.levels:
            raise ScheduleError(f"dim {td.dim}: expected {sp.levels} factors")
        prod = 1
        for f in factors:
            if f < 1:
                raise ScheduleError(f"dim {td.dim}: factors must be >= 1")
            prod *= f
        if prod != td.extent:
            raise ScheduleError(
                f"dim {td.dim}: factor product {prod} != extent {td.extent}")
    if not 0 <= state.compute_at_index < len(sp.compute_at_candidates):
        raise ScheduleError("compute-at index out of range")
    if not 0 <= state.parallel_fuse_count <= sp.max_fusible:
        raise ScheduleError("parallel fuse count out of range")
    if not 0 <= state.unroll_index < len(sp.unroll_depths):
        raise ScheduleError("unroll index out of range")


def sample_initial_schedules(sketch: Sketch, count: int,
                             rng: np.random.Generator) -> list[ScheduleState]:
    """Draw uniform random valid states, deterministic under the generator."""
    sp = sketch.space
    per_dim = [list_tilings(td.extent, sp.levels) for td in sp.tiled_dims]
    out = []
    for _ in range(count):
        tiles = tuple(opts[int(rng.integers(len(opts)))] for opts in per_dim)
        out.append(ScheduleState(
            sketch_id=sketch.id, tiles=tiles,
            compute_at_index=int(rng.integers(len(sp.compute_at_candidates))),
            parallel_fuse_count=int(rng.integers(sp.max_fusible + 1)),
            unroll_index=int(rng.integers(len(sp.unroll_depths)))))
    return out


# ---------------------------------------------------------------------------
# Actions


@dataclass(frozen=True)
class ModificationAction:
    """One step in the schedule space; -1 source means the tiling no-op."""

    tile_src: int = -1
    tile_dst: int = -1
    ca_delta: int = 0
    par_delta: int = 0
    unr_delta: int = 0


def decode_action(indices, num_slots: int) -> ModificationAction:
    """Turn per-head sample indices into a modification.

    Head layout: tiling moves are src * num_slots + dst with index
    num_slots^2 as the explicit no-op; the three shift heads map
    {0, 1, 2} to {-1, 0, +1}.
    """
    t, ca, par, ur = (int(i) for i in indices)
    if t == num_slots * num_slots:
        src = dst = -1
    else:
        src, dst = divmod(t, num_slots)
    return ModificationAction(tile_src=src, tile_dst=dst,
                              ca_delta=ca - 1, par_delta=par - 1,
                              unr_delta=ur - 1)


@dataclass(frozen=True)
class ActionMask:
    """Boolean validity per head index; every head keeps a valid choice."""

    tiling: np.ndarray
    compute_at: np.ndarray
    parallel: np.ndarray
    unroll: np.ndarray

    def as_tuple(self):
        return (self.tiling, self.compute_at, self.parallel, self.unroll)


def action_mask(state: ScheduleState, sketch: Sketch,
                num_slots: int) -> ActionMask:
    """Validity mask for each subspace at ``state``.

    ``num_slots`` is the agent-wide slot count (the maximum over the
    subgraph's sketches) so mask shapes stay fixed; slots beyond this
    sketch are invalid. Tiling moves must stay within one dimension to
    conserve the factor product.
    """
    sp = sketch.space
    levels = sp.levels
    local = sp.num_tile_slots

    tiling = np.zeros(num_slots * num_slots + 1, dtype=bool)
    tiling[-1] = True
    for src in range(local):
        d, lvl = divmod(src, levels)
        if state.tiles[d][lvl] <= 1:
            continue
        base = d * levels
        for dst in range(base, base + levels):
            if dst != src:
                tiling[src * num_slots + dst] = True

    def shift_mask(pos: int, top: int) -> np.ndarray:
        m = np.zeros(3, dtype=bool)
        m[0] = pos > 0
        m[1] = True
        m[2] = pos < top
        return m

    return ActionMask(
        tiling=tiling,
        compute_at=shift_mask(state.compute_at_index,
                              len(sp.compute_at_candidates) - 1),
        parallel=shift_mask(state.parallel_fuse_count, sp.max_fusible),
        unroll=shift_mask(state.unroll_index, len(sp.unroll_depths) - 1))


def apply_action(state: ScheduleState, act: ModificationAction,
                 sketch: Sketch) -> ScheduleState:
    """Apply all four subspace components, validating each."""
    sp = sketch.space
    levels = sp.levels
    tiles = state.tiles
    if act.tile_src >= 0:
        local = sp.num_tile_slots
        if act.tile_src >= local or act.tile_dst >= local or act.tile_dst < 0:
            raise InvalidActionError("tiling", "slot outside this sketch")
        sd, sl = divmod(act.tile_src, levels)
        dd, dl = divmod(act.tile_dst, levels)
        if sd != dd:
            raise InvalidActionError(
                "tiling", "move crosses dimensions, product not conserved")
        if act.tile_src == act.tile_dst:
            raise InvalidActionError("tiling", "source equals destination")
        factors = list(tiles[sd])
        if factors[sl] <= 1:
            raise InvalidActionError("tiling", "source factor is 1")
        p = smallest_prime_factor(factors[sl])
        factors[sl] //= p
        factors[dl] *= p
        tiles = tiles[:sd] + (tuple(factors),) + tiles[sd + 1:]

    ca = state.compute_at_index + act.ca_delta
    if not 0 <= ca < len(sp.compute_at_candidates):
        raise InvalidActionError("compute_at", f"index {ca} out of range")
    par = state.parallel_fuse_count + act.par_delta
    if not 0 <= par <= sp.max_fusible:
        raise InvalidActionError("parallel", f"count {par} out of range")
    ur = state.unroll_index + act.unr_delta
    if not 0 <= ur < len(sp.unroll_depths):
        raise InvalidActionError("unroll", f"index {ur} out of range")
    return ScheduleState(sketch_id=state.sketch_id, tiles=tiles,
                         compute_at_index=ca, parallel_fuse_count=par,
                         unroll_index=ur)


# ---------------------------------------------------------------------------
# Sketch runtime context: precomputed terms for features and simulation


@dataclass
class _StageInfo:
    name: str
    structure: Structure
    dim_idx: tuple[int, ...]          # global tiled-dim indices, loop order
    spatial_idx: tuple[int, ...]
    terms: tuple                      # ((global dim idx, scale, offset), ...) per tensor
    out_terms: tuple                  # terms of the output tensor
    inter_mult: int                   # removable intermediate, in output tiles
    extra_out_mult: int               # non-removable extra output-shaped buffer
    flops: float


class SketchContext:
    """Precomputed per-sketch data for fast featurization and simulation."""

    def __init__(self, sg: SubgraphSpec, sketch: Sketch, target: TargetConfig):
        self.sg = sg
        self.sketch = sketch
        self.target = target
        sp = sketch.space
        self.levels = sp.levels
        self.ndims = len(sp.tiled_dims)
        self.num_slots = sp.num_tile_slots
        self.tilings = tuple(list_tilings(td.extent, sp.levels)
                             for td in sp.tiled_dims)
        slot = {}
        for i, td in enumerate(sp.tiled_dims):
            slot[(td.node, td.dim)] = i

        b_eff = effective_flops(sg, sketch)
        self.stages: list[_StageInfo] = []
        self.skipped: list[tuple[str, float, float, float]] = []
        for node in sg.nodes:
            st = sketch.structure_of(node.name)
            if st is Structure.INLINED:
                continue
            specs = tensor_specs(node)
            if st not in ANCHOR_STRUCTURES:
                full = {d: e for d, e in node.shape}
                l_full = float(sum(t.elements(full) for t in specs))
                self.skipped.append((node.name, b_eff[node.name],
                                     l_full, l_full))
                continue
            dim_idx = tuple(slot[(node.name, d)] for d, _ in node.shape)
            spatial = tuple(slot[(node.name, d)] for d, _ in node.shape
                            if node.is_spatial(d))
            terms = tuple(tuple((slot[(node.name, d)], sc, off)
                                for d, sc, off in t.terms) for t in specs)
            inter = {Structure.TILED: 0, Structure.TILED_FUSED: 1,
                     Structure.CACHE_WRITE_TILED: 1,
                     Structure.RFACTOR_TILED: 2}[st]
            extra = 1 if st is Structure.TILED_FUSED else 0
            self.stages.append(_StageInfo(
                name=node.name, structure=st, dim_idx=dim_idx,
                spatial_idx=spatial, terms=terms, out_terms=terms[-1],
                inter_mult=inter, extra_out_mult=extra,
                flops=b_eff[node.name]))

        ulen = len(sp.unroll_depths)
        self.feature_len = (target.max_feature_dims * sp.levels + 2 + ulen + 3)

    # -- footprints --------------------------------------------------------

    def _tile_products(self, state: ScheduleState):
        """Innermost and two-innermost cumulative tile sizes per dim."""
        L = self.levels
        t1 = [t[L - 1] for t in state.tiles]
        if L >= 2:
            t2 = [t[L - 2] * t[L - 1] for t in state.tiles]
        else:
            t2 = list(t1)
        return t1, t2

    def stage_footprints(self, state: ScheduleState):
        """Per anchor stage (l1, l2) live footprints in elements."""
        t1, t2 = self._tile_products(state)
        inner_ca = state.compute_at_index > 0
        out = []
        for stage in self.stages:
            def tensor_el(terms, tiles):
                total = 1
                for gi, sc, off in terms:
                    total *= sc * tiles[gi] + off
                return total

            l1 = sum(tensor_el(t, t1) for t in stage.terms)
            l2 = sum(tensor_el(t, t2) for t in stage.terms)
            out1 = tensor_el(stage.out_terms, t1)
            out2 = tensor_el(stage.out_terms, t2)
            l1 += (stage.inter_mult + stage.extra_out_mult) * out1
            l2 += stage.extra_out_mult * out2
            if not inner_ca:
                # Intermediate kept at the root placement stays live in the
                # outer cache level as well.
                l2 += stage.inter_mult * out2
            out.append((float(l1), float(l2)))
        return out

    def footprints(self, state: ScheduleState):
        per_stage = self.stage_footprints(state)
        l1 = sum(a for a, _ in per_stage)
        l2 = sum(b for _, b in per_stage)
        return float(l1), float(l2)

    # -- features ----------------------------------------------------------

    def featurize(self, state: ScheduleState) -> np.ndarray:
        """Fixed-length float64 feature vector for the cost model and agent."""
        sp = self.sketch.space
        tgt = self.target
        L = self.levels
        ulen = len(sp.unroll_depths)
        x = np.zeros(self.feature_len, dtype=np.float64)
        pos = 0
        for d in range(self.ndims):
            for lv in range(L):
                x[pos + lv] = math.log2(state.tiles[d][lv]) / 10.0
            pos += L
        pos = tgt.max_feature_dims * L
        ncas = len(sp.compute_at_candidates)
        x[pos] = state.compute_at_index / (ncas - 1) if ncas > 1 else 0.0
        x[pos + 1] = (state.parallel_fuse_count / sp.max_fusible
                      if sp.max_fusible else 0.0)
        x[pos + 2 + state.unroll_index] = 1.0
        pos += 2 + ulen
        l1, l2 = self.footprints(state)
        x[pos] = math.log10(1.0 + l1) / 6.0
        x[pos + 1] = math.log10(1.0 + l2) / 6.0
        x[pos + 2] = math.log10(max(self.sg.flops, 1.0)) / 12.0
        return x


def featurize(state: ScheduleState, ctx: SketchContext) -> np.ndarray:
    return ctx.featurize(state)
