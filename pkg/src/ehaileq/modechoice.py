"""Customer mode choice: waiting fractions, search friction, modal disutility.

The disutility a rider minimizes is fare + waiting cost + surge-surplus cost
+ search friction + passenger-surplus cost + in-vehicle cost (+ pooling
inconvenience). Waiting uses the vacant-arrival share variables solved in
closed form from their KKT system (the quadratic-program device that keeps
them defined when inflows vanish).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dispatch import DispatchDuals, TimeTable, VehicleFlows
from .matching import MatchDuals, allowed_edges
from .netio import CostWeights, MatchingFunction
from .odgraph import ODHypergraph

MODES = ("solo", "pool")


@dataclass
class WaitFractions:
    """Arrival shares at each pair's origin, plus their KKT slack duals.

    reb_share[v, w]: share of vacant inflow to w's origin arriving from v's
    destination; pickup_share[k, d]: share of pooled second-pickup inflow to
    w's origin arriving from k's origin. Shares are flow ratios when inflow
    is positive and 0 otherwise; the slack duals eta close the KKT rows.
    """

    reb_share: np.ndarray
    pickup_share: np.ndarray
    eta_reb: np.ndarray
    eta_pickup: np.ndarray


def solve_wait_fractions(flows: VehicleFlows) -> WaitFractions:
    n = flows.reb.shape[0]
    reb_share = np.zeros((n, n))
    pickup_share = np.zeros((n, n))
    for w in range(n):
        total = flows.reb[:, w].sum()
        if total > 0.0:
            reb_share[:, w] = flows.reb[:, w] / total
        total_oo = flows.oo[:, w].sum() - flows.oo[w, w]
        if total_oo > 0.0:
            pickup_share[:, w] = flows.oo[:, w] / total_oo
            pickup_share[w, w] = 0.0
    return WaitFractions(reb_share=reb_share, pickup_share=pickup_share,
                         eta_reb=np.zeros((n, n)), eta_pickup=np.zeros((n, n)))


def wait_fraction_kkt_residual(fractions: WaitFractions, flows: VehicleFlows) -> float:
    """Max violation of the share-variable complementarity rows."""
    n = flows.reb.shape[0]
    worst = 0.0
    for w in range(n):
        tot = flows.reb[:, w].sum()
        for v in range(n):
            o = fractions.reb_share[v, w]
            eta = fractions.eta_reb[v, w]
            worst = max(worst, abs(min(o, tot * o - flows.reb[v, w] + eta)))
            worst = max(worst, abs(min(eta, 1.0 - o)))
        tot_oo = flows.oo[:, w].sum() - flows.oo[w, w]
        for k in range(n):
            if k == w:
                continue
            o = fractions.pickup_share[k, w]
            eta = fractions.eta_pickup[k, w]
            worst = max(worst, abs(min(o, tot_oo * o - flows.oo[k, w] + eta)))
            worst = max(worst, abs(min(eta, 1.0 - o)))
    return worst


def vacant_arrival_time(graph: ODHypergraph, fractions: WaitFractions,
                        times: TimeTable, w: int) -> float:
    """Average vacant-vehicle travel time into pair w's origin."""
    total = 0.0
    for v in range(graph.n):
        share = fractions.reb_share[v, w]
        if share > 0.0:
            total += share * times.time(graph.od_pairs[v][1], graph.od_pairs[w][0])
    return total


def waiting_cost(graph: ODHypergraph, fractions: WaitFractions, times: TimeTable,
                 weights: CostWeights, mode: str, w: int,
                 verbatim: bool = False) -> float:
    """Expected pickup-wait cost at pair w's origin for one mode.

    Pooling adds the second-pickup branch: vacant time to the partner origin
    plus the pickup leg, weighted by the arrival shares (the verbatim variant
    leaves the vacant-time term unweighted, summing it over every other
    origin as displayed).
    """
    first_leg = vacant_arrival_time(graph, fractions, times, w)
    if mode == "solo":
        return weights.wait_solo * first_leg
    second = 0.0
    for k in range(graph.n):
        if k == w:
            continue
        share = fractions.pickup_share[k, w]
        partner_vacant = vacant_arrival_time(graph, fractions, times, k)
        leg = times.time(graph.od_pairs[k][0], graph.od_pairs[w][0])
        if verbatim:
            second += partner_vacant + share * leg
        else:
            second += share * (partner_vacant + leg)
    return weights.wait_pool * (first_leg + second)


def search_friction(matching_fn: MatchingFunction, weights: CostWeights, mode: str,
                    vehicle_inflow: float, demand: float, price: float) -> float:
    """Douglas-form driver search friction at a pickup node.

    The rider-pressure mass q*phi is floored (configurable) because the
    displayed negative exponent is undefined at zero.
    """
    beta = weights.search(mode)
    if beta == 0.0:
        return 0.0
    a1 = matching_fn.elasticity_wait
    a2 = matching_fn.elasticity_vehicle
    scale = matching_fn.scale ** (-1.0 / a2)
    exp_z = (1.0 - a2) / a2
    z_term = 1.0 if exp_z == 0.0 else max(vehicle_inflow, matching_fn.friction_floor) ** exp_z
    pressure = max(demand * price, matching_fn.friction_floor)
    return beta * scale * z_term * pressure ** (-a1 / a2)


@dataclass
class ModalUtility:
    """Itemized disutility of one (pair, provider, mode) option."""

    fare: float
    waiting: float
    surplus: float
    friction: float
    passenger_surplus: float
    in_vehicle: float
    inconvenience: float

    @property
    def total(self) -> float:
        return (self.fare + self.waiting + self.surplus + self.friction
                + self.passenger_surplus + self.in_vehicle + self.inconvenience)

    def items(self) -> dict[str, float]:
        return {"fare": self.fare, "waiting": self.waiting, "surplus": self.surplus,
                "friction": self.friction, "passenger_surplus": self.passenger_surplus,
                "in_vehicle": self.in_vehicle, "inconvenience": self.inconvenience}


def passenger_surplus_cost(graph: ODHypergraph, match_duals: MatchDuals,
                           weights: CostWeights, mode: str, w: int) -> float:
    """Path-summed capacity-price cost (an edge's price counts once per
    feasible path of the pair that traverses it)."""
    beta = weights.surplus_passenger(mode)
    if beta == 0.0:
        return 0.0
    if mode == "solo":
        return 0.0  # solo capacity prices are fixed at zero (trivial matching)
    total = 0.0
    key_of = {e.key: e for e in allowed_edges(graph, w)}
    for path in graph.enumerate_paths(w, "pool"):
        for (a_kind, a_pair), (b_kind, b_pair) in path.edges():
            if a_kind == "o" and b_kind == "o":
                key = ("oo", a_pair, b_pair)
            elif a_kind == "o":
                key = ("pool_od", a_pair, b_pair)
            else:
                key = ("dd", a_pair, b_pair)
            if key in key_of:
                total += match_duals.capacity_price_of(w, key)
    return beta * total


def modal_utility(graph: ODHypergraph, w: int, mode: str, fare: float,
                  waiting: float, dispatch_duals: DispatchDuals,
                  match_duals: MatchDuals | None, flows: VehicleFlows,
                  demand: float, times: TimeTable, weights: CostWeights,
                  matching_fn: MatchingFunction) -> ModalUtility:
    o, d = graph.od_pairs[w]
    t_od = times.time(o, d)
    l_od = times.dist(o, d)
    if mode == "solo":
        price = dispatch_duals.price_solo[w]
        inflow = flows.solo[w]
        inconvenience = 0.0
    else:
        price = dispatch_duals.price_pool_origin[w]
        inflow = flows.oo[:, w].sum() - flows.oo[w, w]
        inconvenience = (weights.inconvenience_time * t_od
                         + weights.inconvenience_distance * l_od)
    surplus = weights.surplus(mode) * price
    friction = search_friction(matching_fn, weights, mode, inflow, demand, price)
    pas = passenger_surplus_cost(graph, match_duals, weights, mode, w) \
        if match_duals is not None else 0.0
    return ModalUtility(fare=fare, waiting=waiting, surplus=surplus,
                        friction=friction, passenger_surplus=pas,
                        in_vehicle=weights.in_vehicle * t_od,
                        inconvenience=inconvenience)


def split_complementarity_residual(utilities: dict, splits: dict,
                                   total_demand: dict) -> tuple[float, str]:
    """Mode-choice NCP rows: demand conservation plus min-cost complementarity.

    ``utilities``/``splits`` map (option, pair) -> value; options are
    (provider, mode) labels.
    """
    worst, worst_row = 0.0, "none"
    pairs = sorted({w for (_, w) in splits})
    options = sorted({m for (m, _) in splits})
    for w in pairs:
        served = sum(splits[(m, w)] for m in options)
        gap = served - total_demand[w]
        if abs(gap) > worst:
            worst, worst_row = abs(gap), f"demand_conservation[{w}]"
        mu = min(utilities[(m, w)] for m in options)
        for m in options:
            v = min(splits[(m, w)], utilities[(m, w)] - mu)
            if abs(v) > worst:
                worst, worst_row = abs(v), f"mode_choice[{m},{w}]"
    return worst, worst_row
