"""Vehicle-passenger matching: per-pair passenger flows over the pooling layer.

One LP over all pairs jointly (the blocks only share the objective): route
each pair's pooled riders over its feasible edge set, respecting pickup and
dropoff conservation and the per-pair capacity y <= z, minimizing in-vehicle
time plus the (exogenous) waiting cost on edges leaving the pair's origin.
Solo matching is the trivial assignment y = q_solo, checked against z.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .odgraph import DD, OO, POOL_OD, Edge, ODHypergraph
from .dispatch import TimeTable, VehicleFlows
from .simplex import DenseLP, Infeasible, tie_break_perturbation


class MatchingInfeasible(RuntimeError):
    """Signals a dispatch/matching inconsistency; cannot occur for flows
    produced by solve_dispatch with identical demands."""


def allowed_edges(graph: ODHypergraph, w: int) -> list[Edge]:
    """Pooling edges pair ``w``'s riders may occupy, in canonical order."""
    n = graph.n
    keys = [(POOL_OD, w, w)]
    keys += [(OO, w, k) for k in range(n) if k != w]
    keys += [(POOL_OD, w, k) for k in range(n) if k != w]
    keys += [(POOL_OD, k, w) for k in range(n) if k != w]
    keys += [(POOL_OD, k, k) for k in range(n) if k != w]
    keys += [(DD, k, w) for k in range(n) if k != w]
    return [graph.edges[graph.index[key]] for key in keys]


@dataclass
class PassengerFlows:
    """Riders/h per pair on each pooling edge, plus the trivial solo row."""

    solo: np.ndarray  # y on the solo OD edge, == q_solo
    pool: dict[int, dict[tuple[str, int, int], float]]  # pair -> edge key -> flow

    def pool_on_edge(self, key: tuple[str, int, int]) -> float:
        return sum(flows.get(key, 0.0) for flows in self.pool.values())


@dataclass
class MatchDuals:
    price_pickup: np.ndarray  # origin demand-row dual per pair (free)
    price_dropoff: np.ndarray  # destination demand-row dual per pair (free)
    potential_other_origin: np.ndarray  # (w, k) dual of the second-origin balance
    potential_other_dest: np.ndarray  # (w, k) dual of the second-destination balance
    capacity_price: dict[int, dict[tuple[str, int, int], float]]  # >= 0

    def capacity_price_of(self, w: int, key) -> float:
        return self.capacity_price.get(w, {}).get(key, 0.0)


@dataclass
class MatchingSolution:
    flows: PassengerFlows
    duals: MatchDuals
    objective: float


def solve_matching(graph: ODHypergraph, vehicle_flows: VehicleFlows,
                   q_solo: np.ndarray, q_pool: np.ndarray, times: TimeTable,
                   waiting_costs: np.ndarray | None = None,
                   cap_slack: float = 1e-9) -> MatchingSolution:
    """Match riders to the dispatched pooled circulation.

    ``waiting_costs`` is the pooled waiting cost per pair's origin, entering
    the objective on edges leaving that origin (a constant shift given the
    demand rows, kept for dual fidelity).
    """
    n = graph.n
    q_solo = np.asarray(q_solo, dtype=float)
    q_pool = np.asarray(q_pool, dtype=float)
    if waiting_costs is None:
        waiting_costs = np.zeros(n)
    for w in range(n):
        if q_solo[w] > vehicle_flows.solo[w] + cap_slack * max(1.0, q_solo[w]):
            raise MatchingInfeasible(
                f"solo demand {q_solo[w]} exceeds dispatched flow "
                f"{vehicle_flows.solo[w]} on pair {graph.od_pairs[w]}")

    cols: list[tuple[int, Edge]] = []
    col_of: dict[tuple[int, tuple[str, int, int]], int] = {}
    for w in range(n):
        if q_pool[w] <= 0.0:
            continue
        for e in allowed_edges(graph, w):
            col_of[(w, e.key)] = len(cols)
            cols.append((w, e))

    flows_pool: dict[int, dict[tuple[str, int, int], float]] = {
        w: {} for w in range(n) if q_pool[w] > 0.0}
    duals = MatchDuals(price_pickup=np.zeros(n), price_dropoff=np.zeros(n),
                       potential_other_origin=np.zeros((n, n)),
                       potential_other_dest=np.zeros((n, n)),
                       capacity_price={w: {} for w in range(n)})
    if not cols:
        return MatchingSolution(PassengerFlows(solo=q_solo.copy(), pool=flows_pool),
                                duals, 0.0)

    lp = DenseLP(len(cols))
    for j, (w, e) in enumerate(cols):
        cost = times.time(*e.road)
        if e.kind in (OO, POOL_OD) and e.w == w:  # leaves w's origin
            cost += waiting_costs[w]
        lp.set_cost(j, cost)

    rows: dict[str, dict] = {"pickup": {}, "dropoff": {}, "other_origin": {},
                             "other_dest": {}, "cap": {}}
    for w in range(n):
        if q_pool[w] <= 0.0:
            continue
        own = col_of[(w, (POOL_OD, w, w))]
        out_cols = {own: 1.0}
        in_cols = {own: 1.0}
        for k in range(n):
            if k == w:
                continue
            out_cols[col_of[(w, (OO, w, k))]] = 1.0
            out_cols[col_of[(w, (POOL_OD, w, k))]] = 1.0
            in_cols[col_of[(w, (POOL_OD, k, w))]] = 1.0
            in_cols[col_of[(w, (DD, k, w))]] = 1.0
        rows["pickup"][w] = lp.add_row(out_cols, "=", q_pool[w])
        rows["dropoff"][w] = lp.add_row(in_cols, "=", q_pool[w])
        for k in range(n):
            if k == w:
                continue
            rows["other_origin"][(w, k)] = lp.add_row(
                {col_of[(w, (OO, w, k))]: 1.0,
                 col_of[(w, (POOL_OD, k, w))]: -1.0,
                 col_of[(w, (POOL_OD, k, k))]: -1.0}, "=", 0.0)
            rows["other_dest"][(w, k)] = lp.add_row(
                {col_of[(w, (DD, k, w))]: 1.0,
                 col_of[(w, (POOL_OD, w, k))]: -1.0,
                 col_of[(w, (POOL_OD, k, k))]: -1.0}, "=", 0.0)
        for e in allowed_edges(graph, w):
            cap = vehicle_flows.of_edge(e)
            rows["cap"][(w, e.key)] = lp.add_row(
                {col_of[(w, e.key)]: 1.0}, "<=",
                cap + cap_slack * max(1.0, cap))

    pert = tie_break_perturbation(list(range(len(cols))), len(cols),
                                  max(1.0, float(np.max(np.abs(lp.c)))))
    try:
        res = lp.solve(cost_perturbation=pert)
    except Infeasible:
        raise MatchingInfeasible(
            "matching infeasible for the given vehicle flows (dispatch/"
            "matching inconsistency)") from None

    for j, (w, e) in enumerate(cols):
        if res.x[j] > 0.0:
            flows_pool[w][e.key] = float(res.x[j])
    for w, i in rows["pickup"].items():
        duals.price_pickup[w] = res.duals_eq[i]
    for w, i in rows["dropoff"].items():
        duals.price_dropoff[w] = res.duals_eq[i]
    for (w, k), i in rows["other_origin"].items():
        duals.potential_other_origin[w, k] = res.duals_eq[i]
    for (w, k), i in rows["other_dest"].items():
        duals.potential_other_dest[w, k] = res.duals_eq[i]
    for (w, key), i in rows["cap"].items():
        lam = res.duals_le[i]
        if lam > 0.0:
            duals.capacity_price[w][key] = float(lam)

    return MatchingSolution(PassengerFlows(solo=q_solo.copy(), pool=flows_pool),
                            duals, res.objective)


def matching_stationarity(graph: ODHypergraph, w: int, e: Edge, times: TimeTable,
                          duals: MatchDuals, waiting_cost: float) -> float:
    """KKT stationarity value of pair ``w``'s flow on edge ``e`` (>= 0)."""
    t = times.time(*e.road)
    lam = duals.capacity_price_of(w, e.key)
    phi_up = duals.price_pickup[w]
    phi_dn = duals.price_dropoff[w]
    if e.kind == OO and e.w == w:
        return t + waiting_cost - phi_up - duals.potential_other_origin[w, e.k] + lam
    if e.kind == POOL_OD and e.w == w and e.k == w:
        return t + waiting_cost - phi_up - phi_dn + lam
    if e.kind == POOL_OD and e.w == w:
        return t + waiting_cost - phi_up + duals.potential_other_dest[w, e.k] + lam
    if e.kind == POOL_OD and e.k == w:
        return t - phi_dn + duals.potential_other_origin[w, e.w] + lam
    if e.kind == POOL_OD and e.w == e.k:
        return t + duals.potential_other_origin[w, e.w] + duals.potential_other_dest[w, e.w] + lam
    if e.kind == DD and e.k == w:
        return t - phi_dn - duals.potential_other_dest[w, e.w] + lam
    raise ValueError(f"edge {e.key} not in pair {w}'s feasible set")


def ncp_residual_matching(graph: ODHypergraph, flows: PassengerFlows,
                          duals: MatchDuals, vehicle_flows: VehicleFlows,
                          q_pool: np.ndarray, times: TimeTable,
                          waiting_costs: np.ndarray | None = None) -> tuple[float, str]:
    """Max residual over the matching KKT rows; names the worst row."""
    n = graph.n
    if waiting_costs is None:
        waiting_costs = np.zeros(n)
    worst, worst_row = 0.0, "none"

    def check(value, row):
        nonlocal worst, worst_row
        if abs(value) > worst:
            worst, worst_row = abs(value), row

    for w in range(n):
        y = flows.pool.get(w, {})
        if q_pool[w] <= 0.0:
            check(sum(y.values()), f"nominal_zero[{w}]")
            continue
        picked = dropped = 0.0
        for e in allowed_edges(graph, w):
            val = y.get(e.key, 0.0)
            stat = matching_stationarity(graph, w, e, times, duals, waiting_costs[w])
            check(min(val, stat), f"match_stationarity[{w},{e.key}]")
            cap_slack = vehicle_flows.of_edge(e) - val
            check(min(cap_slack, duals.capacity_price_of(w, e.key)),
                  f"capacity[{w},{e.key}]")
            if e.kind in (OO, POOL_OD) and e.w == w or e.key == (POOL_OD, w, w):
                picked += val
            if (e.kind == POOL_OD and e.k == w) or (e.kind == DD and e.k == w) \
                    or e.key == (POOL_OD, w, w):
                dropped += val
        # the own OD edge double-counts in both tallies above only once each
        check(picked - q_pool[w], f"pickup_demand[{w}]")
        check(dropped - q_pool[w], f"dropoff_demand[{w}]")
        for k in range(n):
            if k == w:
                continue
            check(y.get((OO, w, k), 0.0) - y.get((POOL_OD, k, w), 0.0)
                  - y.get((POOL_OD, k, k), 0.0), f"other_origin[{w},{k}]")
            check(y.get((DD, k, w), 0.0) - y.get((POOL_OD, w, k), 0.0)
                  - y.get((POOL_OD, k, k), 0.0), f"other_dest[{w},{k}]")
    return worst, worst_row


def passenger_surplus(graph: ODHypergraph, flows: PassengerFlows,
                      vehicle_flows: VehicleFlows, duals: MatchDuals,
                      tol: float = 1e-9) -> list[dict]:
    """Per-(pair, edge) oversupply report plus the summed-occupancy diagnostic."""
    out = []
    for w, y in flows.pool.items():
        for key, val in y.items():
            e = graph.edges[graph.index[key]]
            cap = vehicle_flows.of_edge(e)
            out.append({
                "pair": graph.od_pairs[w],
                "edge": key,
                "oversupply": bool(val < cap - tol * max(1.0, cap)),
                "capacity_price": duals.capacity_price_of(w, key),
                "occupancy_sum": flows.pool_on_edge(key),
                "occupancy_bound_2z": 2.0 * cap,
            })
    return out
