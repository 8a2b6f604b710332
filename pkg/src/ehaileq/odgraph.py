"""Layered OD hypergraph: the closed vehicle circulation graph over OD pairs.

Each OD pair contributes one origin and one destination node per layer
(solo vehicle, pooling vehicle, and their passenger twins) plus a virtual
origin/destination used to close the circulation. Edge families:

    VO_SOLO  virtual origin  -> solo origin        (one per pair)
    VO_POOL  virtual origin  -> pooling origin
    SOLO_OD  solo origin     -> solo destination
    OO       pooling origin  -> pooling origin     (w != k)
    POOL_OD  pooling origin  -> pooling destination (all w, k)
    DD       pooling dest    -> pooling dest       (w != k)
    VD_SOLO  solo dest       -> virtual dest
    VD_POOL  pooling dest    -> virtual dest
    REB      virtual dest    -> virtual origin     (all w, k)

The graph depends only on the number of OD pairs, not on road topology.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

# edge kinds in canonical order
VO_SOLO = "vo_solo"
VO_POOL = "vo_pool"
SOLO_OD = "solo_od"
OO = "oo"
POOL_OD = "pool_od"
DD = "dd"
VD_SOLO = "vd_solo"
VD_POOL = "vd_pool"
REB = "reb"

EDGE_KIND_ORDER = (VO_SOLO, VO_POOL, SOLO_OD, OO, POOL_OD, DD, VD_SOLO, VD_POOL, REB)


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Edge:
    """One hypergraph arc; (w, k) index OD pairs, road is the (tail, head) road pair."""

    kind: str
    w: int
    k: int
    road: tuple[int, int]

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.kind, self.w, self.k)


@dataclass(frozen=True)
class ODPath:
    """A passenger path on one mode layer: node sequence over origin/dest copies.

    Nodes are ('o', pair) / ('d', pair) tuples; first is the owning pair's
    origin, last its destination.
    """

    pair: int
    nodes: tuple[tuple[str, int], ...]

    def edges(self) -> list[tuple[tuple[str, int], tuple[str, int]]]:
        return list(zip(self.nodes, self.nodes[1:]))


class ODHypergraph:
    """Hypergraph for one provider over a fixed, ordered OD pair list."""

    def __init__(self, od_pairs: list[tuple[int, int]]):
        if not od_pairs:
            raise GraphError("od_pairs must be nonempty")
        if len(set(od_pairs)) != len(od_pairs):
            raise GraphError("duplicate OD pair")
        for o, d in od_pairs:
            if o == d:
                raise GraphError(f"OD pair with origin == destination: {(o, d)}")
        self.od_pairs: list[tuple[int, int]] = list(od_pairs)
        self.n = len(od_pairs)
        self.edges: list[Edge] = self._build_edges()
        self.index: dict[tuple[str, int, int], int] = {
            e.key: i for i, e in enumerate(self.edges)}

    # -- construction --------------------------------------------------------

    def _build_edges(self) -> list[Edge]:
        n, pairs = self.n, self.od_pairs
        out: list[Edge] = []
        for w in range(n):
            out.append(Edge(VO_SOLO, w, w, (pairs[w][0], pairs[w][0])))
        for w in range(n):
            out.append(Edge(VO_POOL, w, w, (pairs[w][0], pairs[w][0])))
        for w in range(n):
            out.append(Edge(SOLO_OD, w, w, (pairs[w][0], pairs[w][1])))
        # OO/POOL_OD/DD sorted by (head pair, tail pair): pins degenerate
        # entry-side ties toward first pickup at the earlier-indexed pair
        for k in range(n):
            for w in range(n):
                if w != k:
                    out.append(Edge(OO, w, k, (pairs[w][0], pairs[k][0])))
        for k in range(n):
            for w in range(n):
                out.append(Edge(POOL_OD, w, k, (pairs[w][0], pairs[k][1])))
        for k in range(n):
            for w in range(n):
                if w != k:
                    out.append(Edge(DD, w, k, (pairs[w][1], pairs[k][1])))
        for w in range(n):
            out.append(Edge(VD_SOLO, w, w, (pairs[w][1], pairs[w][1])))
        for w in range(n):
            out.append(Edge(VD_POOL, w, w, (pairs[w][1], pairs[w][1])))
        for w in range(n):
            for k in range(n):
                out.append(Edge(REB, w, k, (pairs[w][1], pairs[k][0])))
        return out

    # -- counts ---------------------------------------------------------------

    def pooling_layer_edge_count(self) -> int:
        """|L(p)| = n(n-1) OO + n^2 OD + n(n-1) DD."""
        n = self.n
        return 3 * n * n - 2 * n

    def full_graph_arc_count(self) -> int:
        """Arcs of the drawn two-layer OD graph: pooling layer + virtual origin
        edges + rebalancing edges = 4 n^2 (16 at n=2, 144 at n=6)."""
        n = self.n
        return self.pooling_layer_edge_count() + 2 * self.n + n * n

    def pooled_sequence_count(self) -> int:
        """Ordered pooled pickup/dropoff sequences: n(n-1) * 3 archetypes."""
        return self.n * (self.n - 1) * 3

    def edges_of_kind(self, kind: str) -> list[Edge]:
        return [e for e in self.edges if e.kind == kind]

    # -- incidence indicators --------------------------------------------------

    def incidence(self, u: tuple[str, int], v: tuple[str, int],
                  w: int, k: int) -> dict[str, int]:
        """Node-pair indicator record for pairs (w, k).

        Nodes are ('o', pair) / ('d', pair). Returns the five indicators
        od_w (pair w's own OD), oo_wk, od_wk, dd_wk, do_wk.
        """
        for node in (u, v):
            if node[0] not in ("o", "d") or not 0 <= node[1] < self.n:
                raise GraphError(f"unknown node {node}")
        d_o_uw = 1 if u == ("o", w) else 0
        d_d_uw = 1 if u == ("d", w) else 0
        d_o_vk = 1 if v == ("o", k) else 0
        d_d_vk = 1 if v == ("d", k) else 0
        d_d_vw = 1 if v == ("d", w) else 0
        return {
            "od_w": d_o_uw * d_d_vw,
            "oo_wk": d_o_uw * d_o_vk,
            "od_wk": d_o_uw * d_d_vk,
            "dd_wk": d_d_uw * d_d_vk,
            "do_wk": d_d_uw * d_o_vk,
        }

    # -- passenger path enumeration --------------------------------------------

    def enumerate_paths(self, w: int, mode: str) -> list[ODPath]:
        """Feasible passenger node sequences for pair ``w`` on a mode layer.

        Solo: the single direct path. Pooling, per partner k: picked first and
        dropped first (w,k,w), picked first dropped second (w,k,k,w), picked
        second dropped second (w,k',w) via k's destination; plus the direct
        (w,w) ridden when picked second and dropped first.
        """
        if not 0 <= w < self.n:
            raise GraphError(f"unknown pair {w}")
        o, d = ("o", w), ("d", w)
        if mode == "solo":
            return [ODPath(w, (o, d))]
        if mode != "pool":
            raise GraphError(f"unknown mode {mode!r}")
        paths = [ODPath(w, (o, d))]
        for k in range(self.n):
            if k == w:
                continue
            ko, kd = ("o", k), ("d", k)
            paths.append(ODPath(w, (o, ko, d)))
            paths.append(ODPath(w, (o, ko, kd, d)))
            paths.append(ODPath(w, (o, kd, d)))
        return paths

    # -- export -----------------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps({
            "od_pairs": self.od_pairs,
            "edges": [{"kind": e.kind, "w": e.w, "k": e.k, "road": list(e.road)}
                      for e in self.edges],
            "full_graph_arcs": self.full_graph_arc_count(),
        }, indent=1)

    def to_dot(self) -> str:
        def name(e: Edge, end: int) -> str:
            kind, w, k = e.kind, e.w, e.k
            if kind == REB:
                return f"vd{w}" if end == 0 else f"vo{k}"
            if kind in (VO_SOLO, VO_POOL):
                return f"vo{w}" if end == 0 else f"{kind[3:]}_o{w}"
            if kind in (VD_SOLO, VD_POOL):
                return f"{kind[3:]}_d{w}" if end == 0 else f"vd{w}"
            layer = "solo" if kind == SOLO_OD else "pool"
            tail = f"{layer}_{'o' if kind in (SOLO_OD, OO, POOL_OD) else 'd'}{w}"
            head = f"{layer}_{'o' if kind == OO else 'd'}{k}"
            return tail if end == 0 else head

        lines = ["digraph odhypergraph {"]
        for e in self.edges:
            lines.append(f'  {name(e, 0)} -> {name(e, 1)} [label="{e.kind}"];')
        lines.append("}")
        return "\n".join(lines)


def build_hypergraph(od_pairs: list[tuple[int, int]]) -> ODHypergraph:
    """Hypergraph over ``od_pairs`` with deterministic node/edge ordering."""
    return ODHypergraph(od_pairs)
