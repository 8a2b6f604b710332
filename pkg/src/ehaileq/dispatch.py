"""Vehicle dispatch: minimum-cost circulation over the closed vehicle OD graph.

The LP minimizes total vehicle-hours (plus the exogenous pooled search-cost
term on edges leaving pooling origins) subject to the circulation,
supply>=demand, virtual-balance and fleet rows. With the demand rows forcing
service, this is the fare-laden objective with revenue capped at fare*demand
(revenue is then constant), which keeps the program bounded for every fare
regime. The fare-laden edge-cost table is still computed and reported.

Duals: node potentials (hours), demand prices ("surge", hours per rider),
the virtual-link balance multiplier, and the fleet shadow price. A fleet
price lambda>0 chosen by the market-clearing layer is folded in by scaling
all potentials/prices by (1+lambda), which preserves the KKT system exactly
on the binding face of the hours objective.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .netio import Provider
from .odgraph import (DD, OO, POOL_OD, REB, SOLO_OD, VD_POOL, VD_SOLO,
                      VO_POOL, VO_SOLO, Edge, ODHypergraph)
from .simplex import DenseLP, Infeasible, Unbounded, tie_break_perturbation

DUAL_SELECT_ETA = 1e-10


class DispatchInfeasible(RuntimeError):
    def __init__(self, message, binding=None):
        super().__init__(message)
        self.binding = binding or "unknown"


class TimeTable:
    """Travel times/distances between road nodes, as produced by assignment."""

    def __init__(self, times: dict[tuple[int, int], float],
                 dists: dict[tuple[int, int], float] | None = None):
        self._t = dict(times)
        self._l = dict(dists) if dists is not None else None

    def time(self, u: int, v: int) -> float:
        if u == v:
            return 0.0
        try:
            return self._t[(u, v)]
        except KeyError:
            raise KeyError(f"no travel time for node pair ({u},{v})") from None

    def dist(self, u: int, v: int) -> float:
        if u == v:
            return 0.0
        if self._l is None:
            raise KeyError("no distance table")
        try:
            return self._l[(u, v)]
        except KeyError:
            raise KeyError(f"no distance for node pair ({u},{v})") from None


@dataclass(frozen=True)
class FareSchedule:
    """Per-pair solo/pool fares: fixed part + time surcharge + distance rate."""

    solo: np.ndarray
    pool: np.ndarray

    @staticmethod
    def build(provider: Provider, graph: ODHypergraph, times: TimeTable,
              baseline_times: TimeTable, pool_fare_ratio: float | None = None) -> "FareSchedule":
        n = graph.n
        solo = np.zeros(n)
        pool = np.zeros(n)
        gamma = provider.pool_discount if pool_fare_ratio is None else pool_fare_ratio
        for w, od in enumerate(graph.od_pairs):
            o, d = od
            surcharge = provider.time_rate * (times.time(o, d) - baseline_times.time(o, d))
            dist_part = provider.distance_rate * times.dist(o, d)
            solo[w] = provider.fare_fixed(od, "solo") + surcharge + dist_part
            pool[w] = gamma * (provider.fare_fixed(od, "pool") + surcharge + dist_part)
        return FareSchedule(solo=solo, pool=pool)


def compute_edge_costs(graph: ODHypergraph, times: TimeTable,
                       fares: FareSchedule) -> dict[tuple[str, int, int], float]:
    """Fare-laden net edge cost table (hours net of fare).

    Virtual edges are 0; rebalancing and OO edges carry pure travel time;
    every pooling edge entering pair k's destination earns r_pool[k]
    (each such arrival drops exactly one pair-k passenger); the solo OD edge
    earns r_solo[w].
    """
    costs: dict[tuple[str, int, int], float] = {}
    for e in graph.edges:
        t = times.time(*e.road)
        if e.kind in (VO_SOLO, VO_POOL, VD_SOLO, VD_POOL):
            costs[e.key] = 0.0
        elif e.kind in (REB, OO):
            costs[e.key] = t
        elif e.kind == SOLO_OD:
            costs[e.key] = t - fares.solo[e.w]
        elif e.kind == POOL_OD or e.kind == DD:
            costs[e.key] = t - fares.pool[e.k]
    return costs


@dataclass
class VehicleFlows:
    """Circulation flows per edge family (veh/h); arrays indexed by pair."""

    entry_solo: np.ndarray
    entry_pool: np.ndarray
    solo: np.ndarray
    oo: np.ndarray  # (w, k): pickup leg from w's origin to k's origin
    pool_od: np.ndarray  # (w, k): second pickup at w to first dropoff at k
    dd: np.ndarray  # (w, k): dropoff transfer
    exit_solo: np.ndarray
    exit_pool: np.ndarray
    reb: np.ndarray  # (w, k): vacant leg from w's destination to k's origin

    def of_edge(self, e: Edge) -> float:
        return {VO_SOLO: lambda: self.entry_solo[e.w],
                VO_POOL: lambda: self.entry_pool[e.w],
                SOLO_OD: lambda: self.solo[e.w],
                OO: lambda: self.oo[e.w, e.k],
                POOL_OD: lambda: self.pool_od[e.w, e.k],
                DD: lambda: self.dd[e.w, e.k],
                VD_SOLO: lambda: self.exit_solo[e.w],
                VD_POOL: lambda: self.exit_pool[e.w],
                REB: lambda: self.reb[e.w, e.k]}[e.kind]()

    def pool_origin_supply(self, w: int) -> float:
        """Pooled pickup capacity arriving at w's origin (entry + OO arrivals)."""
        return float(self.entry_pool[w] + self.oo[:, w].sum() - self.oo[w, w])

    def pool_dest_supply(self, w: int) -> float:
        """Pooled dropoff slots leaving w's destination (exit + DD departures)."""
        return float(self.exit_pool[w] + self.dd[w, :].sum() - self.dd[w, w])

    def occupied_hours(self, graph: ODHypergraph, times: TimeTable) -> float:
        total = 0.0
        for e in graph.edges:
            if e.kind in (SOLO_OD, OO, POOL_OD, DD):
                total += self.of_edge(e) * times.time(*e.road)
        return total

    def rebalancing_hours(self, graph: ODHypergraph, times: TimeTable) -> float:
        return sum(self.reb[e.w, e.k] * times.time(*e.road)
                   for e in graph.edges_of_kind(REB))

    def fleet_hours(self, graph: ODHypergraph, times: TimeTable) -> float:
        return self.occupied_hours(graph, times) + self.rebalancing_hours(graph, times)


@dataclass
class DispatchDuals:
    """LP multipliers of the dispatch program (all in hours).

    potential_* are node potentials of the split circulation nodes;
    price_* are demand-row duals (surge prices); virtual_balance is the
    total virtual-link multiplier; fleet_price is the fleet shadow price.
    """

    potential_pool_first_pickup: np.ndarray
    potential_pool_second_pickup: np.ndarray
    potential_pool_first_dropoff: np.ndarray
    potential_pool_final_dropoff: np.ndarray
    price_pool_origin: np.ndarray
    price_pool_dest: np.ndarray
    potential_solo_origin: np.ndarray
    potential_solo_dest: np.ndarray
    price_solo: np.ndarray
    potential_virtual_origin: np.ndarray
    potential_virtual_dest: np.ndarray
    virtual_balance: float
    fleet_price: float

    def scaled(self, fleet_price: float) -> "DispatchDuals":
        """Fold a market-clearing fleet price in: every potential/price scales
        by (1+lambda), valid on the binding face of the hours objective."""
        f = 1.0 + fleet_price
        return DispatchDuals(
            potential_pool_first_pickup=self.potential_pool_first_pickup * f,
            potential_pool_second_pickup=self.potential_pool_second_pickup * f,
            potential_pool_first_dropoff=self.potential_pool_first_dropoff * f,
            potential_pool_final_dropoff=self.potential_pool_final_dropoff * f,
            price_pool_origin=self.price_pool_origin * f,
            price_pool_dest=self.price_pool_dest * f,
            potential_solo_origin=self.potential_solo_origin * f,
            potential_solo_dest=self.potential_solo_dest * f,
            price_solo=self.price_solo * f,
            potential_virtual_origin=self.potential_virtual_origin * f,
            potential_virtual_dest=self.potential_virtual_dest * f,
            virtual_balance=self.virtual_balance * f,
            fleet_price=fleet_price,
        )


@dataclass
class DispatchSolution:
    flows: VehicleFlows
    duals: DispatchDuals
    objective_hours: float
    fare_objective: float  # paper-form sum C*z over the fare-laden cost table
    fleet_hours: float


def solve_dispatch(graph: ODHypergraph, times: TimeTable, q_solo: np.ndarray,
                   q_pool: np.ndarray, fleet_hours: float | None = None,
                   search_costs: np.ndarray | None = None,
                   edge_costs: dict | None = None,
                   dest_demand_halved: bool = False,
                   dual_select: bool = True) -> DispatchSolution:
    """Solve the dispatch circulation for one provider.

    ``search_costs`` is the exogenous pooled search-friction cost per pair's
    origin, added on edges leaving that pooling origin (frozen within the
    outer iteration). Raises DispatchInfeasible when the fleet cannot cover
    the demands, Unbounded only on a mispriced negative cycle.
    """
    n = graph.n
    if search_costs is None:
        search_costs = np.zeros(n)
    q_solo = np.asarray(q_solo, dtype=float)
    q_pool = np.asarray(q_pool, dtype=float)
    if (q_solo < -1e-12).any() or (q_pool < -1e-12).any():
        raise ValueError("negative modal demand")

    edges = graph.edges
    col = graph.index
    lp = DenseLP(len(edges))
    hours = np.zeros(len(edges))
    for j, e in enumerate(edges):
        t = times.time(*e.road)
        hours[j] = t if e.kind in (SOLO_OD, OO, POOL_OD, DD, REB) else 0.0
        cost = hours[j]
        if e.kind in (OO, POOL_OD):
            cost += search_costs[e.w]
        lp.set_cost(j, cost)

    def c(kind, w, k=None):
        return col[(kind, w, w if k is None else k)]

    rows: dict[str, list[int]] = {}

    def add(tag, coeffs, sense, rhs):
        rows.setdefault(tag, []).append(lp.add_row(coeffs, sense, rhs))

    eta = DUAL_SELECT_ETA if dual_select else 0.0
    dest_rhs = 0.5 if dest_demand_halved else 1.0
    for w in range(n):
        others = [k for k in range(n) if k != w]
        add("pool_first_pickup", {c(VO_POOL, w): 1.0,
                                  **{c(OO, w, k): -1.0 for k in others}}, "=", 0.0)
        add("pool_second_pickup", {**{c(OO, k, w): 1.0 for k in others},
                                   **{c(POOL_OD, w, k): -1.0 for k in range(n)}}, "=", 0.0)
        add("pool_first_dropoff", {**{c(POOL_OD, k, w): 1.0 for k in range(n)},
                                   **{c(DD, w, k): -1.0 for k in others}}, "=", 0.0)
        add("pool_final_dropoff", {**{c(DD, k, w): 1.0 for k in others},
                                   c(VD_POOL, w): -1.0}, "=", 0.0)
        add("pool_origin_demand", {c(VO_POOL, w): 1.0,
                                   **{c(OO, k, w): 1.0 for k in others}}, ">=",
            q_pool[w] + (eta if q_pool[w] > 0 else 0.0))
        add("pool_dest_demand", {c(VD_POOL, w): 1.0,
                                 **{c(DD, w, k): 1.0 for k in others}}, ">=",
            dest_rhs * q_pool[w])
        add("solo_origin", {c(VO_SOLO, w): 1.0, c(SOLO_OD, w): -1.0}, "=", 0.0)
        add("solo_dest", {c(SOLO_OD, w): 1.0, c(VD_SOLO, w): -1.0}, "=", 0.0)
        add("solo_demand", {c(SOLO_OD, w): 1.0}, ">=",
            q_solo[w] + (eta if q_solo[w] > 0 else 0.0))
        add("virtual_origin", {**{c(REB, k, w): 1.0 for k in range(n)},
                               c(VO_SOLO, w): -1.0, c(VO_POOL, w): -1.0}, "=", 0.0)
        add("virtual_dest", {c(VD_SOLO, w): 1.0, c(VD_POOL, w): 1.0,
                             **{c(REB, w, k): -1.0 for k in range(n)}}, "=", 0.0)
    add("virtual_total", {**{c(VO_SOLO, w): 1.0 for w in range(n)},
                          **{c(VO_POOL, w): 1.0 for w in range(n)},
                          **{c(VD_SOLO, w): -1.0 for w in range(n)},
                          **{c(VD_POOL, w): -1.0 for w in range(n)}}, "=", 0.0)
    if fleet_hours is not None:
        add("fleet", {j: hours[j] for j in range(len(edges)) if hours[j] > 0.0},
            "<=", fleet_hours)

    # deterministic tie-break: road-active families in documented order
    tie_order = [j for kind in (OO, POOL_OD, DD, SOLO_OD, REB)
                 for j, e in enumerate(edges) if e.kind == kind]
    scale = max(1.0, float(np.max(np.abs(hours))) if len(hours) else 1.0)
    pert = tie_break_perturbation(tie_order, len(edges), scale)

    try:
        res = lp.solve(cost_perturbation=pert)
    except Infeasible:
        if eta > 0.0:
            try:
                return solve_dispatch(graph, times, q_solo, q_pool, fleet_hours,
                                      search_costs, edge_costs, dest_demand_halved,
                                      dual_select=False)
            except DispatchInfeasible:
                raise
        binding = "fleet" if fleet_hours is not None else "demand/conservation"
        raise DispatchInfeasible(
            f"dispatch infeasible (likely binding: {binding}; "
            f"fleet_hours={fleet_hours}, total demand={q_solo.sum() + q_pool.sum()})",
            binding=binding) from None
    except Unbounded as exc:
        raise Unbounded(f"dispatch unbounded: mispriced negative cycle ({exc})") from None

    x = res.x

    def arr(kind):
        return np.array([x[c(kind, w)] for w in range(n)])

    def mat(kind):
        out = np.zeros((n, n))
        for e in graph.edges_of_kind(kind):
            out[e.w, e.k] = x[col[e.key]]
        return out

    flows = VehicleFlows(entry_solo=arr(VO_SOLO), entry_pool=arr(VO_POOL),
                         solo=arr(SOLO_OD), oo=mat(OO), pool_od=mat(POOL_OD),
                         dd=mat(DD), exit_solo=arr(VD_SOLO), exit_pool=arr(VD_POOL),
                         reb=mat(REB))

    def eq_duals(tag):
        return np.array([res.duals_eq[i] for i in rows[tag]])

    def ge_duals(tag):
        return np.array([res.duals_ge[i] for i in rows[tag]])

    duals = DispatchDuals(
        potential_pool_first_pickup=eq_duals("pool_first_pickup"),
        potential_pool_second_pickup=eq_duals("pool_second_pickup"),
        potential_pool_first_dropoff=eq_duals("pool_first_dropoff"),
        potential_pool_final_dropoff=eq_duals("pool_final_dropoff"),
        price_pool_origin=ge_duals("pool_origin_demand"),
        price_pool_dest=ge_duals("pool_dest_demand"),
        potential_solo_origin=eq_duals("solo_origin"),
        potential_solo_dest=eq_duals("solo_dest"),
        price_solo=ge_duals("solo_demand"),
        potential_virtual_origin=eq_duals("virtual_origin"),
        potential_virtual_dest=eq_duals("virtual_dest"),
        virtual_balance=float(res.duals_eq[rows["virtual_total"][0]]),
        fleet_price=float(res.duals_le[rows["fleet"][0]]) if fleet_hours is not None else 0.0,
    )

    fare_objective = 0.0
    if edge_costs is not None:
        fare_objective = sum(edge_costs[e.key] * flows.of_edge(e) for e in edges)
    return DispatchSolution(flows=flows, duals=duals,
                            objective_hours=float(hours @ x),
                            fare_objective=fare_objective,
                            fleet_hours=flows.fleet_hours(graph, times))


def stationarity_rows(graph: ODHypergraph, times: TimeTable, duals: DispatchDuals,
                      search_costs: np.ndarray) -> dict[tuple[str, int, int], float]:
    """Exact KKT stationarity value per edge (>= 0, and 0 where flow > 0)."""
    d = duals
    lf = d.fleet_price
    out = {}
    for e in graph.edges:
        t = times.time(*e.road)
        w, k = e.w, e.k
        if e.kind == REB:
            val = t - d.potential_virtual_origin[k] + d.potential_virtual_dest[w] + t * lf
        elif e.kind == VO_SOLO:
            val = -d.potential_solo_origin[w] + d.potential_virtual_origin[w] - d.virtual_balance
        elif e.kind == VO_POOL:
            val = (-d.potential_pool_first_pickup[w] - d.price_pool_origin[w]
                   + d.potential_virtual_origin[w] - d.virtual_balance)
        elif e.kind == SOLO_OD:
            val = (t + d.potential_solo_origin[w] - d.potential_solo_dest[w]
                   - d.price_solo[w] + t * lf)
        elif e.kind == OO:
            val = (t + search_costs[w] + d.potential_pool_first_pickup[w]
                   - d.potential_pool_second_pickup[k] - d.price_pool_origin[k] + t * lf)
        elif e.kind == POOL_OD:
            val = (t + search_costs[w] + d.potential_pool_second_pickup[w]
                   - d.potential_pool_first_dropoff[k] + t * lf)
        elif e.kind == DD:
            val = (t + d.potential_pool_first_dropoff[w]
                   - d.potential_pool_final_dropoff[k] - d.price_pool_dest[w] + t * lf)
        elif e.kind == VD_SOLO:
            val = d.potential_solo_dest[w] - d.potential_virtual_dest[w] + d.virtual_balance
        elif e.kind == VD_POOL:
            val = (d.potential_pool_final_dropoff[w] - d.price_pool_dest[w]
                   - d.potential_virtual_dest[w] + d.virtual_balance)
        else:  # pragma: no cover
            raise AssertionError(e.kind)
        out[e.key] = val
    return out


def ncp_residual_dispatch(graph: ODHypergraph, times: TimeTable, flows: VehicleFlows,
                          duals: DispatchDuals, q_solo: np.ndarray, q_pool: np.ndarray,
                          fleet_hours: float | None = None,
                          search_costs: np.ndarray | None = None,
                          dest_demand_halved: bool = False) -> tuple[float, str]:
    """Max complementarity residual over every dispatch KKT row, with the
    worst row named. Zero iff (flows, duals) solve the dispatch NCP."""
    n = graph.n
    if search_costs is None:
        search_costs = np.zeros(n)
    worst, worst_row = 0.0, "none"

    def check(value, row):
        nonlocal worst, worst_row
        v = abs(value)
        if v > worst:
            worst, worst_row = v, row

    stat = stationarity_rows(graph, times, duals, search_costs)
    for e in graph.edges:
        # 0 <= z  perp  stationarity >= 0: |min| covers both violations
        check(min(flows.of_edge(e), stat[e.key]), f"stationarity[{e.key}]")

    f = flows
    for w in range(n):
        check(f.entry_pool[w] - (f.oo[w, :].sum() - f.oo[w, w]), f"pool_first_pickup[{w}]")
        check((f.oo[:, w].sum() - f.oo[w, w]) - f.pool_od[w, :].sum(),
              f"pool_second_pickup[{w}]")
        check(f.pool_od[:, w].sum() - (f.dd[w, :].sum() - f.dd[w, w]),
              f"pool_first_dropoff[{w}]")
        check((f.dd[:, w].sum() - f.dd[w, w]) - f.exit_pool[w], f"pool_final_dropoff[{w}]")
        check(f.entry_solo[w] - f.solo[w], f"solo_origin[{w}]")
        check(f.solo[w] - f.exit_solo[w], f"solo_dest[{w}]")
        check(f.reb[:, w].sum() - f.entry_solo[w] - f.entry_pool[w], f"virtual_origin[{w}]")
        check(f.exit_solo[w] + f.exit_pool[w] - f.reb[w, :].sum(), f"virtual_dest[{w}]")
        dest_rhs = (0.5 if dest_demand_halved else 1.0) * q_pool[w]
        slack_o = f.pool_origin_supply(w) - q_pool[w]
        slack_d = f.pool_dest_supply(w) - dest_rhs
        slack_e = f.solo[w] - q_solo[w]
        check(min(slack_o, duals.price_pool_origin[w]), f"pool_origin_demand[{w}]")
        check(min(slack_d, duals.price_pool_dest[w]), f"pool_dest_demand[{w}]")
        check(min(slack_e, duals.price_solo[w]), f"solo_demand[{w}]")
        for slack, row in ((slack_o, f"pool_origin_supply[{w}]"),
                           (slack_d, f"pool_dest_supply[{w}]"),
                           (slack_e, f"solo_supply[{w}]")):
            if slack < 0:
                check(slack, row)
    check(f.entry_solo.sum() + f.entry_pool.sum()
          - f.exit_solo.sum() - f.exit_pool.sum(), "virtual_total")
    if fleet_hours is not None and math.isfinite(fleet_hours):
        slack = fleet_hours - f.fleet_hours(graph, times)
        check(min(slack, duals.fleet_price), "fleet")
        if slack < 0:
            check(slack, "fleet_overrun")
    return worst, worst_row


def surplus_report(graph: ODHypergraph, flows: VehicleFlows, duals: DispatchDuals,
                   q_solo: np.ndarray, q_pool: np.ndarray,
                   fleet_hours: float | None, times: TimeTable,
                   slack_tol: float = 1e-7) -> dict:
    """Per-pair waiting/surge case analysis plus the fleet-price case."""
    per_pair = []
    for w in range(graph.n):
        solo_slack = flows.solo[w] - q_solo[w]
        pool_slack = flows.pool_origin_supply(w) - q_pool[w]
        per_pair.append({
            "pair": graph.od_pairs[w],
            "solo_waiting": bool(solo_slack <= slack_tol * max(1.0, q_solo[w])),
            "solo_price": float(duals.price_solo[w]),
            "pool_waiting": bool(pool_slack <= slack_tol * max(1.0, q_pool[w])),
            "pool_price": float(duals.price_pool_origin[w]),
        })
    used = flows.fleet_hours(graph, times)
    return {
        "pairs": per_pair,
        "fleet_binding": fleet_hours is not None and used >= fleet_hours * (1 - 1e-9) - 1e-12,
        "fleet_price": duals.fleet_price,
        "fleet_hours_used": used,
    }
