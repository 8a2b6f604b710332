"""Coupled equilibrium: mode choice, dispatch, matching and congestion.

Block Gauss-Seidel (diagonalization): per-OD mode-split updates re-solve the
platform programs at candidate allocations with the other pairs frozen;
congested times feed back via user equilibrium with MSA damping. A provider
with a finite fleet is cleared first: its allocation is chosen among
configurations (pairs served fully plus at most one marginal pair filling the
fleet exactly) admitting a fleet price at which the marginal riders are
indifferent; all of its dispatch duals scale by 1+price on the binding face.
Convergence is certified by the unified complementarity residual over every
block's rows.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import assignment, dispatch, matching, modechoice
from .dispatch import DispatchInfeasible, FareSchedule, TimeTable
from .netio import RoadNetwork, Scenario
from .odgraph import ODHypergraph, build_hypergraph

Option = tuple[int, str]  # (provider index, "solo" | "pool")

INFEASIBLE_UTILITY = float("inf")


@dataclass
class ProviderState:
    fares: FareSchedule
    q_solo: np.ndarray
    q_pool: np.ndarray
    dispatch: dispatch.DispatchSolution
    match: matching.MatchingSolution
    fractions: modechoice.WaitFractions
    waiting: dict[str, np.ndarray]
    fleet_price: float


@dataclass
class SystemEval:
    """One consistent snapshot at fixed times: all provider programs solved."""

    providers: list[ProviderState]
    utilities: dict[tuple[Option, int], modechoice.ModalUtility]

    def utility(self, option: Option, w: int) -> float:
        u = self.utilities.get((option, w))
        return u.total if u is not None else INFEASIBLE_UTILITY


@dataclass
class EquilibriumState:
    graph: ODHypergraph
    scenario: Scenario
    splits: dict[Option, np.ndarray]
    evaluation: SystemEval
    link_state: assignment.LinkState | None
    times: TimeTable
    baseline_times: TimeTable
    residual: float
    residual_row: str
    converged: bool
    iterations: int
    trace: list[dict] = field(default_factory=list)

    @property
    def options(self) -> list[Option]:
        return [(pi, mode) for pi in range(len(self.scenario.providers))
                for mode in modechoice.MODES]

    def split_of(self, option: Option) -> np.ndarray:
        return self.splits[option]

    def to_json(self) -> str:
        ev = self.evaluation
        out = {
            "od_pairs": self.graph.od_pairs,
            "converged": self.converged,
            "iterations": self.iterations,
            "residual": self.residual,
            "residual_row": self.residual_row,
            "splits": {f"{self.scenario.providers[pi].name}:{mode}": list(arr)
                       for (pi, mode), arr in self.splits.items()},
            "fleet_prices": [p.fleet_price for p in ev.providers],
            "utilities": {
                f"{self.scenario.providers[pi].name}:{mode}:{w}": u.items() | {"total": u.total}
                for ((pi, mode), w), u in ev.utilities.items()
                if math.isfinite(u.total)},
            "metrics": compute_metrics(self),
            "trace": self.trace,
        }
        return json.dumps(out, indent=1, default=float)


class EquilibriumModel:
    """Binds network + scenario and runs the diagonalization loop."""

    def __init__(self, network: RoadNetwork, scenario: Scenario,
                 graph: ODHypergraph | None = None):
        self.network = network
        self.scenario = scenario
        self.graph = graph or build_hypergraph(scenario.od_pairs)
        self.cfg = scenario.solver
        self.q_total = np.array([scenario.od_demands[od] for od in self.graph.od_pairs])
        self.options: list[Option] = [(pi, m) for pi in range(len(scenario.providers))
                                      for m in modechoice.MODES]
        pairs = self._needed_node_pairs()
        self.baseline = assignment.free_flow_tables(network, pairs)
        self._node_pairs = pairs
        # frozen per outer iteration, per provider: pooled search cost per pair
        self.search_costs = [np.zeros(self.graph.n) for _ in scenario.providers]
        self.fare_ratio_override: float | None = None

    def _needed_node_pairs(self) -> set[tuple[int, int]]:
        endpoints = sorted({n for od in self.graph.od_pairs for n in od})
        return {(u, v) for u in endpoints for v in endpoints if u != v}

    # -- evaluation at fixed times -------------------------------------------

    def evaluate(self, splits: dict[Option, np.ndarray], times: TimeTable,
                 fleet_prices: list[float],
                 relax_fleet: int | None = None,
                 flows_override: list | None = None) -> SystemEval:
        """Solve every provider's programs at the given allocation.

        ``relax_fleet`` drops that provider's fleet cap (used while probing
        allocations whose hours may exceed it).
        """
        scn = self.scenario
        providers: list[ProviderState] = []
        utilities: dict[tuple[Option, int], modechoice.ModalUtility] = {}
        for pi, provider in enumerate(scn.providers):
            q_solo = splits[(pi, "solo")]
            q_pool = splits[(pi, "pool")]
            fares = FareSchedule.build(provider, self.graph, times, self.baseline,
                                       pool_fare_ratio=self.fare_ratio_override)
            fleet = None if relax_fleet == pi else provider.fleet_hours
            sol = dispatch.solve_dispatch(
                self.graph, times, q_solo, q_pool, fleet_hours=fleet,
                search_costs=self.search_costs[pi],
                dest_demand_halved=self.cfg.dest_demand_halved)
            flows = sol.flows if flows_override is None else flows_override[pi]
            duals = sol.duals.scaled(fleet_prices[pi]) if fleet_prices[pi] > 0 \
                else sol.duals
            fractions = modechoice.solve_wait_fractions(flows)
            waiting = {
                mode: np.array([
                    modechoice.waiting_cost(self.graph, fractions, times, scn.weights,
                                            mode, w, verbatim=self.cfg.waiting_cost_verbatim)
                    for w in range(self.graph.n)])
                for mode in modechoice.MODES}
            match = matching.solve_matching(self.graph, flows, q_solo, q_pool,
                                            times, waiting_costs=waiting["pool"])
            state = ProviderState(fares=fares, q_solo=q_solo.copy(), q_pool=q_pool.copy(),
                                  dispatch=dispatch.DispatchSolution(
                                      flows=flows, duals=duals,
                                      objective_hours=sol.objective_hours,
                                      fare_objective=sol.fare_objective,
                                      fleet_hours=flows.fleet_hours(self.graph, times)),
                                  match=match, fractions=fractions, waiting=waiting,
                                  fleet_price=fleet_prices[pi])
            providers.append(state)
            for mode in modechoice.MODES:
                q_mode = q_solo if mode == "solo" else q_pool
                fare_arr = fares.solo if mode == "solo" else fares.pool
                for w in range(self.graph.n):
                    utilities[((pi, mode), w)] = modechoice.modal_utility(
                        self.graph, w, mode, fare_arr[w], waiting[mode][w], duals,
                        match.duals, flows, q_mode[w], times, scn.weights,
                        scn.matching)
        return SystemEval(providers=providers, utilities=utilities)

    # -- split helpers -----------------------------------------------------------

    def _trial(self, splits, w: int, shares: dict[Option, float]) -> dict[Option, np.ndarray]:
        out = {opt: arr.copy() for opt, arr in splits.items()}
        for opt in self.options:
            out[opt][w] = self.q_total[w] * shares.get(opt, 0.0)
        return out

    def _corner_utility(self, splits, w: int, option: Option, times, fleet_prices,
                        relax_fleet=None, pinned=None) -> float:
        shares = self._pinned_shares(pinned, w)
        free = max(0.0, 1.0 - sum(shares.values()))
        shares[option] = shares.get(option, 0.0) + free
        trial = self._trial(splits, w, shares)
        try:
            ev = self.evaluate(trial, times, fleet_prices, relax_fleet=relax_fleet)
        except (DispatchInfeasible, matching.MatchingInfeasible):
            return INFEASIBLE_UTILITY
        return ev.utility(option, w)

    def _pinned_shares(self, pinned, w: int) -> dict[Option, float]:
        if not pinned:
            return {}
        return {opt: arr[w] / self.q_total[w] for opt, arr in pinned.items()
                if arr[w] > 0.0}

    def split_pass(self, splits, times, fleet_prices, pinned=None,
                   sweeps: int = 2, refine: bool = True,
                   relax_fleet: int | None = None) -> dict[Option, np.ndarray]:
        """Gauss-Seidel over pairs: each pair's unpinned demand goes to the
        cheapest corner, then pairwise bisection refines toward
        complementarity. Pinned allocations (fleet-cleared providers) are
        kept fixed."""
        pinned = pinned or {}
        pinned_opts = set(pinned)
        for _ in range(sweeps):
            for w in range(self.graph.n):
                base = self._pinned_shares(pinned, w)
                free = 1.0 - sum(base.values())
                if free <= 1e-15:
                    splits = self._trial(splits, w, base)
                    continue
                corner: dict[Option, float] = {}
                candidates = [o for o in self.options if o not in pinned_opts]
                for opt in candidates:
                    corner[opt] = self._corner_utility(
                        splits, w, opt, times, fleet_prices,
                        relax_fleet=relax_fleet, pinned=pinned)
                if not candidates:
                    # every option pinned elsewhere: this probe leaves the
                    # remainder unassigned (only occurs inside fleet clearing)
                    splits = self._trial(splits, w, base)
                    continue
                ranked = sorted(candidates,
                                key=lambda o: (corner[o], o[0], o[1] != "solo"))
                winner = ranked[0]
                if math.isinf(corner[winner]):
                    raise DispatchInfeasible(
                        f"no provider can serve pair {self.graph.od_pairs[w]}")
                shares = dict(base)
                shares[winner] = shares.get(winner, 0.0) + free
                splits = self._trial(splits, w, shares)
                if refine:
                    splits, shares = self._refine_pair(
                        splits, w, shares, times, fleet_prices, pinned_opts,
                        relax_fleet)
        return splits

    def _refine_pair(self, splits, w, shares, times, fleet_prices, pinned_opts,
                     relax_fleet=None):
        """If an unused option is strictly cheaper at the current state, bisect
        the transferred share to the indifference point."""
        for _ in range(4):
            try:
                ev = self.evaluate(splits, times, fleet_prices,
                                   relax_fleet=relax_fleet)
            except (DispatchInfeasible, matching.MatchingInfeasible):
                return splits, shares
            movable = [o for o in self.options if o not in pinned_opts]
            used = [o for o in movable if shares.get(o, 0.0) > 1e-15]
            if not used:
                return splits, shares
            mu = min(ev.utility(o, w) for o in used)
            violator, gap = None, -self.cfg.split_tolerance * 10
            for o in movable:
                if shares.get(o, 0.0) > 1e-15:
                    continue
                g = ev.utility(o, w) - mu
                if g < gap:
                    violator, gap = o, g
            if violator is None:
                return splits, shares
            donor = max(used, key=lambda o: ev.utility(o, w))
            new_shares = self._bisect_share(splits, w, shares, donor, violator,
                                            times, fleet_prices)
            if new_shares is None:
                return splits, shares
            shares = new_shares
            splits = self._trial(splits, w, shares)
        return splits, shares

    def _bisect_share(self, splits, w, shares, donor, receiver, times, fleet_prices):
        base = shares.get(donor, 0.0)

        def gap_at(f: float) -> float:
            trial_shares = dict(shares)
            trial_shares[donor] = base - f
            trial_shares[receiver] = shares.get(receiver, 0.0) + f
            trial = self._trial(splits, w, trial_shares)
            try:
                ev = self.evaluate(trial, times, fleet_prices)
            except (DispatchInfeasible, matching.MatchingInfeasible):
                return math.inf
            return ev.utility(receiver, w) - ev.utility(donor, w)

        if gap_at(base) <= 0.0:  # full switch still favors the receiver
            f_star = base
        else:
            lo, hi = 0.0, base
            for _ in range(70):
                mid = 0.5 * (lo + hi)
                g = gap_at(mid)
                if g < 0.0:
                    lo = mid
                elif g > 0.0:
                    hi = mid
                else:
                    lo = hi = mid
                    break
            f_star = 0.5 * (lo + hi)
        if f_star <= 1e-15:
            return None
        out = dict(shares)
        out[donor] = base - f_star
        out[receiver] = shares.get(receiver, 0.0) + f_star
        if out[donor] <= 1e-15:
            out.pop(donor)
        return out

    # -- fleet market clearing ---------------------------------------------------

    def clear_provider(self, pi: int, splits, times, fleet_prices, pinned):
        """Clear provider ``pi``'s fleet market.

        Returns (price, pins): pins fix the provider's allocation when the
        fleet binds. When everything it attracts at price 0 fits, the price
        is 0 and nothing is pinned (the general split pass handles it).
        """
        S = self.scenario.providers[pi].fleet_hours
        if S is None:
            return 0.0, {}

        fp0 = list(fleet_prices)
        fp0[pi] = 0.0
        free_splits = self.split_pass(splits, times, fp0, pinned=pinned,
                                      sweeps=1, refine=False, relax_fleet=pi)
        try:
            ev0 = self.evaluate(free_splits, times, fp0)
            hours0 = ev0.providers[pi].dispatch.fleet_hours
            feasible0 = True
        except (DispatchInfeasible, matching.MatchingInfeasible):
            ev0 = self.evaluate(free_splits, times, fp0, relax_fleet=pi)
            hours0 = ev0.providers[pi].dispatch.fleet_hours
            feasible0 = False
        if feasible0 and hours0 <= S * (1 + 1e-8) + 1e-10:
            return 0.0, {}
        return self._binding_allocation(pi, splits, times, fleet_prices, pinned, S)

    def _mode_preference(self, pi, splits, times, fleet_prices, pinned):
        """Per pair: provider pi's cheaper mode and that corner's utility,
        plus the best competing option's corner utility."""
        pref = []
        for w in range(self.graph.n):
            best_mode, best_u = "solo", INFEASIBLE_UTILITY
            for mode in modechoice.MODES:
                u = self._corner_utility(splits, w, (pi, mode), times,
                                         fleet_prices, relax_fleet=pi, pinned=pinned)
                if u < best_u:
                    best_mode, best_u = mode, u
            alt = INFEASIBLE_UTILITY
            for opt in self.options:
                if opt[0] == pi:
                    continue
                alt = min(alt, self._corner_utility(splits, w, opt, times,
                                                    fleet_prices, relax_fleet=pi,
                                                    pinned=pinned))
            pref.append((best_mode, best_u, alt))
        return pref

    def _binding_allocation(self, pi, splits, times, fleet_prices, pinned, S):
        """Enumerate configurations (full pairs + at most one marginal pair
        filling the fleet) and pick the one using the most fleet-hours, then
        serving the most riders; the fleet price is the marginal pair's
        indifference level."""
        n = self.graph.n
        fp = list(fleet_prices)
        fp[pi] = 0.0
        pref = self._mode_preference(pi, splits, times, fp, pinned)
        pair_ids = [w for w in range(n) if self._pinned_shares(pinned, w) == {}
                    or sum(self._pinned_shares(pinned, w).values()) < 1 - 1e-15]

        def pins_for(assign: dict[int, float]) -> dict[Option, np.ndarray]:
            pins = {(pi, m): np.zeros(n) for m in modechoice.MODES}
            for w, share in assign.items():
                pins[(pi, pref[w][0])][w] = self.q_total[w] * share
            return pins

        def provider_hours(assign) -> float:
            pins = pins_for(assign)
            trial = self._apply_pins(splits, pins, pinned, times, fp,
                                     relax_fleet=pi)
            ev = self.evaluate(trial, times, fp, relax_fleet=pi)
            return ev.providers[pi].dispatch.fleet_hours

        if S == 0.0:
            lam = self._corner_tie_price(pi, splits, times, fp, pinned, pref)
            return lam, pins_for({})

        best = None  # (hours_used, riders, -config_index, assign, lam)
        config_index = 0
        for full_set in _subsets(pair_ids):
            base_assign = {w: 1.0 for w in full_set}
            try:
                h_full = provider_hours(base_assign)
            except (DispatchInfeasible, matching.MatchingInfeasible):
                continue
            if h_full > S * (1 + 1e-9):
                continue
            riders_full = sum(self.q_total[w] for w in full_set)
            slack = S - h_full
            candidates = [(base_assign, h_full, riders_full, None)]
            for m in pair_ids:
                if m in full_set:
                    continue
                share = self._fill_share(m, base_assign, provider_hours, S)
                if share <= 1e-12:
                    continue
                assign = dict(base_assign)
                assign[m] = share
                try:
                    h_m = provider_hours(assign) if share >= 1.0 - 1e-12 else S
                except (DispatchInfeasible, matching.MatchingInfeasible):
                    continue
                candidates.append((assign, h_m,
                                   riders_full + share * self.q_total[m], m))
            for assign, hours, riders, marginal in candidates:
                config_index += 1
                lam = 0.0
                if marginal is not None:
                    lam = self._marginal_price(pi, splits, times, fp, pinned,
                                               pins_for(assign), marginal, pref)
                    if lam is None:
                        continue
                elif S - hours > 1e-9 * max(1.0, S):
                    lam = 0.0
                key = (round(hours, 9), round(riders, 9), -config_index)
                if best is None or key > best[0]:
                    best = (key, assign, lam)
        if best is None:
            raise DispatchInfeasible(
                f"provider {self.scenario.providers[pi].name}: no clearable "
                f"fleet configuration for S={S}", binding="fleet")
        _, assign, lam = best
        return lam, pins_for(assign)

    def _fill_share(self, m, base_assign, provider_hours, S) -> float:
        def hours_at(f):
            assign = dict(base_assign)
            assign[m] = f
            try:
                return provider_hours(assign)
            except (DispatchInfeasible, matching.MatchingInfeasible):
                return math.inf
        if hours_at(1.0) <= S * (1 + 1e-12):
            return 1.0
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if hours_at(mid) <= S:
                lo = mid
            else:
                hi = mid
        return lo

    @staticmethod
    def _install_pins(splits, pins):
        out = {opt: arr.copy() for opt, arr in splits.items()}
        for opt, arr in pins.items():
            out[opt] = arr.copy()
        return out

    def _apply_pins(self, splits, pins, other_pins, times, fleet_prices,
                    relax_fleet=None):
        """Splits with the pinned shares installed and the rest allocated by a
        quick corner pass."""
        merged = dict(other_pins)
        for opt, arr in pins.items():
            merged[opt] = merged.get(opt, np.zeros(self.graph.n)) + arr
        working = self._install_pins(splits, pins)
        return self.split_pass(working, times, fleet_prices, pinned=merged,
                               sweeps=1, refine=False, relax_fleet=relax_fleet)

    def _scaled_gap_fn(self, ev: SystemEval, pi: int, mode: str, w: int,
                       alt_override: float | None = None):
        """Closed-form indifference gap as a function of pi's fleet price:
        only its surge-scaled surplus and friction terms move (the LP solution
        is price-independent; duals scale by 1+price)."""
        scn = self.scenario
        util = ev.utilities[((pi, mode), w)]
        st = ev.providers[pi]
        duals = st.dispatch.duals
        price0 = duals.price_solo[w] if mode == "solo" else duals.price_pool_origin[w]
        price0 /= (1.0 + st.fleet_price)  # back to the unscaled LP dual
        inflow = st.dispatch.flows.solo[w] if mode == "solo" else \
            float(st.dispatch.flows.oo[:, w].sum() - st.dispatch.flows.oo[w, w])
        demand = st.q_solo[w] if mode == "solo" else st.q_pool[w]
        base = util.total - util.surplus - util.friction
        if alt_override is not None:
            alt = alt_override
        else:
            others = [ev.utility(o, w) for o in self.options
                      if o[0] != pi and math.isfinite(ev.utility(o, w))]
            alt = min(others) if others else None

        def gap(lam: float) -> float:
            if alt is None:
                return 0.0
            price = price0 * (1.0 + lam)
            surplus = scn.weights.surplus(mode) * price
            friction = modechoice.search_friction(
                scn.matching, scn.weights, mode, inflow, demand, price)
            return base + surplus + friction - alt

        return gap

    @staticmethod
    def _bisect_price(gap, tol: float) -> float | None:
        """Root of the indifference gap on its rising branch.

        The gap can dip before rising (a higher price raises the surge term
        but deepens the matching-friction discount), so when it starts
        positive the minimizer is located first.
        """
        g0 = gap(0.0)
        lo = 0.0
        if abs(g0) <= tol:
            return 0.0
        if g0 > tol:
            # ternary search for the dip over an expanding bracket
            a, b = 0.0, 1.0
            for _ in range(60):
                if gap(b) > gap(0.5 * b) or b > 1e12:
                    break
                b *= 2.0
            for _ in range(200):
                m1 = a + (b - a) / 3.0
                m2 = b - (b - a) / 3.0
                if gap(m1) <= gap(m2):
                    b = m2
                else:
                    a = m1
            dip = 0.5 * (a + b)
            if gap(dip) > tol:
                return None
            lo = dip
        hi, guard = max(1.0, 2.0 * lo), 0
        while gap(hi) < 0.0 and guard < 200:
            hi *= 2.0
            guard += 1
        if gap(hi) < 0.0:
            return None
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if gap(mid) < 0.0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def _marginal_price(self, pi, splits, times, fp, pinned, pins, marginal, pref):
        """Fleet price making the marginal pair's riders indifferent between
        provider pi and the best alternative; None when no root exists."""
        merged = dict(pinned)
        for opt, arr in pins.items():
            merged[opt] = merged.get(opt, np.zeros(self.graph.n)) + arr
        working = self._install_pins(splits, pins)
        trial = self.split_pass(working, times, fp, pinned=merged,
                                sweeps=1, refine=False, relax_fleet=pi)
        try:
            ev = self.evaluate(trial, times, fp)
        except (DispatchInfeasible, matching.MatchingInfeasible):
            ev = self.evaluate(trial, times, fp, relax_fleet=pi)
        gap = self._scaled_gap_fn(ev, pi, pref[marginal][0], marginal)
        return self._bisect_price(gap, self.cfg.split_tolerance)

    def _corner_tie_price(self, pi, splits, times, fp, pinned, pref) -> float:
        """Zero-fleet case: the smallest price at which every pair's corner
        bid by provider pi ties or exceeds the best alternative."""
        lam = 0.0
        for w in range(self.graph.n):
            mode, own0, alt = pref[w]
            if not math.isfinite(alt) or not math.isfinite(own0) or own0 >= alt:
                continue
            shares = self._pinned_shares(pinned, w)
            free = max(0.0, 1.0 - sum(shares.values()))
            shares[(pi, mode)] = shares.get((pi, mode), 0.0) + free
            trial = self._trial(splits, w, shares)
            try:
                ev = self.evaluate(trial, times, fp, relax_fleet=pi)
            except (DispatchInfeasible, matching.MatchingInfeasible):
                continue
            gap = self._scaled_gap_fn(ev, pi, mode, w, alt_override=alt)
            root = self._bisect_price(gap, self.cfg.split_tolerance)
            if root is not None:
                lam = max(lam, root)
        return lam

    # -- routing-tie mix polish ----------------------------------------------------

    def _mix_flows(self, flows_a, flows_b, theta: float):
        mixed = []
        for fa, fb in zip(flows_a, flows_b):
            kwargs = {}
            for name in ("entry_solo", "entry_pool", "solo", "oo", "pool_od",
                         "dd", "exit_solo", "exit_pool", "reb"):
                kwargs[name] = theta * getattr(fa, name) + (1 - theta) * getattr(fb, name)
            mixed.append(dispatch.VehicleFlows(**kwargs))
        return mixed

    def _mix_polish(self, splits, fleet_prices, flows_a, flows_b, link_state):
        """Resolve a 2-cycle in dispatch routing: the congested times sit on a
        tie manifold where two LP-optimal routings alternate; the consistent
        state mixes them. Bisect the mixing weight until the times it induces
        make the dispatch flip sides, then adopt the mixed (still LP-optimal)
        flows. Returns (evaluation, link_state, times) or None on failure."""
        graph = self.graph

        def legs_of(flows):
            return assignment.merge_demands([
                assignment.assemble_demand(graph, splits[(pi, "solo")], flows[pi])
                for pi in range(len(flows))])

        demand_a, demand_b = legs_of(flows_a), legs_of(flows_b)

        def probe(theta):
            """Signed tie gap at the times induced by mixing weight theta:
            positive while the dispatch prefers routing A (the unused B-side
            edges carry positive reduced cost), negative on the B side."""
            mixed = self._mix_flows(flows_a, flows_b, theta)
            demand = legs_of(mixed)
            ls = assignment.solve_ue(self.network, demand,
                                     tol=self.cfg.ue_relative_gap,
                                     max_iter=self.cfg.ue_max_iterations,
                                     warm_start=link_state)
            times = assignment.od_times_and_distances(self.network, ls,
                                                      self._node_pairs)
            ev = self.evaluate(splits, times, fleet_prices)
            legs = legs_of([st.dispatch.flows for st in ev.providers])
            da = _legs_distance(legs, demand_a)
            db = _legs_distance(legs, demand_b)
            if min(da, db) > 1e-6 * (1 + max(demand_a.values(), default=1.0)):
                return None
            side = 1.0 if da <= db else -1.0
            gap = 0.0
            for pi, st in enumerate(ev.providers):
                stat = dispatch.stationarity_rows(
                    self.graph, times, st.dispatch.duals,
                    self.search_costs[pi] * (1.0 + st.fleet_price))
                vertex = st.dispatch.flows
                off = flows_b[pi] if side > 0 else flows_a[pi]
                for e in self.graph.edges:
                    if off.of_edge(e) > 1e-9 and vertex.of_edge(e) <= 1e-9:
                        gap = max(gap, stat[e.key])
            return side * gap, ls, times, mixed

        p0 = probe(0.0)
        p1 = probe(1.0)
        if p0 is None or p1 is None or p0[0] * p1[0] > 0:
            return None
        # theta=0 is pure B (negative side), theta=1 pure A; regula falsi
        (g_lo, *state_lo), lo = (p1, 1.0) if p1[0] < 0 else (p0, 0.0)
        (g_hi, *state_hi), hi = (p0, 0.0) if p1[0] < 0 else (p1, 1.0)
        best = state_lo if abs(g_lo) < abs(g_hi) else state_hi
        for _ in range(40):
            denom = g_hi - g_lo
            theta = 0.5 * (lo + hi) if abs(denom) < 1e-300 else \
                lo - g_lo * (hi - lo) / denom
            theta = min(max(theta, lo + 1e-15), hi - 1e-15)
            p = probe(theta)
            if p is None:
                return None
            g, *st = p
            if abs(g) < abs(g_lo) and abs(g) < abs(g_hi):
                best = st
            if abs(g) <= 0.5 * self.cfg.outer_tolerance:
                best = st
                break
            if g < 0:
                lo, g_lo = theta, g
            else:
                hi, g_hi = theta, g
        ls, times, mixed = best
        ev = self.evaluate(splits, times, fleet_prices, flows_override=mixed)
        return ev, ls, times

    # -- outer loop ---------------------------------------------------------------

    def solve(self, fare_ratio: float | None = None,
              warm_start: EquilibriumState | None = None) -> EquilibriumState:
        cfg = self.cfg
        self.fare_ratio_override = fare_ratio
        graph = self.graph
        n = graph.n
        self.search_costs = [np.zeros(n) for _ in self.scenario.providers]
        times = self.baseline
        link_state = None
        splits: dict[Option, np.ndarray] = {opt: np.zeros(n) for opt in self.options}
        if warm_start is not None and warm_start.graph.od_pairs == graph.od_pairs:
            splits = {opt: arr.copy() for opt, arr in warm_start.splits.items()}
        else:
            splits[self.options[0]] = self.q_total.copy()
        fleet_prices = [0.0] * len(self.scenario.providers)
        prev_splits: dict[Option, np.ndarray] = {}
        prev_prices: list[float] = []
        flow_hist: list[tuple[dict, list]] = []
        trace: list[dict] = []
        evaluation = None
        residual, residual_row = math.inf, "not-evaluated"

        for it in range(1, cfg.max_outer_iterations + 1):
            pinned: dict[Option, np.ndarray] = {}
            for pi in range(len(self.scenario.providers)):
                fleet_prices[pi], pins = self.clear_provider(
                    pi, splits, times, fleet_prices, pinned)
                if pins:
                    pinned.update(pins)
                    splits = self._install_pins(splits, pins)
            splits = self.split_pass(splits, times, fleet_prices, pinned=pinned)
            evaluation = self.evaluate(splits, times, fleet_prices)
            stable_alloc = _same_splits(splits, prev_splits) \
                and fleet_prices == prev_prices
            prev_splits = {opt: arr.copy() for opt, arr in splits.items()}
            prev_prices = list(fleet_prices)

            # M2: assign all providers' movements onto the road network
            flows_list = [st.dispatch.flows for st in evaluation.providers]
            demand = assignment.merge_demands([
                assignment.assemble_demand(graph, st.q_solo, st.dispatch.flows)
                for st in evaluation.providers])
            if not stable_alloc:
                flow_hist.clear()
            flow_hist.append((demand, flows_list))

            polished = None
            if len(flow_hist) >= 3:
                scale = 1.0 + max(demand.values(), default=0.0)
                if _legs_distance(flow_hist[-1][0], flow_hist[-3][0]) <= 1e-9 * scale \
                        and _legs_distance(flow_hist[-1][0], flow_hist[-2][0]) > 1e-9 * scale:
                    # dispatch routing 2-cycles across the congestion feedback:
                    # land on the tie manifold with mixed optimal flows
                    polished = self._mix_polish(splits, fleet_prices,
                                                flow_hist[-1][1], flow_hist[-2][1],
                                                link_state)
            if polished is not None:
                evaluation, new_link_state, new_times = polished
                times = new_times
                time_shift, step = 0.0, 1.0
                flow_hist.clear()
            else:
                new_link_state = assignment.solve_ue(
                    self.network, demand, tol=cfg.ue_relative_gap,
                    max_iter=cfg.ue_max_iterations,
                    warm_start=link_state) if demand else None
                new_times = (assignment.od_times_and_distances(
                    self.network, new_link_state, self._node_pairs)
                    if new_link_state is not None else self.baseline)
                # once the allocation is stable, jump the table to the new
                # equilibrium times; damp only while the allocation moves
                step = 1.0 if stable_alloc else (
                    1.0 / it if cfg.damping == "msa" else cfg.damping_factor)
                _, time_shift = _blend_times(times, new_times, 1.0, self._node_pairs)

            # refresh the frozen search costs for the next dispatch pass;
            # a pair without pooled demand has no matching market at its
            # origin, so its (floored) rider-side friction must not price
            # other pairs' pooled legs through that origin
            for pi in range(len(self.scenario.providers)):
                q_pool = splits[(pi, "pool")]
                self.search_costs[pi] = np.array([
                    evaluation.utilities[((pi, "pool"), w)].friction
                    if q_pool[w] > 0.0 and math.isfinite(
                        evaluation.utilities[((pi, "pool"), w)].friction)
                    else 0.0
                    for w in range(n)])

            link_state = new_link_state
            residual, residual_row = unified_residual_parts(
                self, splits, evaluation, link_state, times, fleet_prices)
            trace.append({"iteration": it, "residual": residual,
                          "worst_row": residual_row, "time_shift": time_shift,
                          "damping_step": step})
            if residual <= cfg.outer_tolerance:
                break
            times, _ = _blend_times(times, new_times, step, self._node_pairs)
        converged = residual <= cfg.outer_tolerance
        state = EquilibriumState(
            graph=graph, scenario=self.scenario, splits=splits,
            evaluation=evaluation, link_state=link_state, times=times,
            baseline_times=self.baseline, residual=residual,
            residual_row=residual_row, converged=converged, iterations=len(trace),
            trace=trace)
        self.fare_ratio_override = None
        return state


def _legs_distance(a: dict, b: dict) -> float:
    keys = set(a) | set(b)
    return max((abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys), default=0.0)


def _same_splits(a: dict, b: dict, tol: float = 1e-12) -> bool:
    if not b or a.keys() != b.keys():
        return False
    return all(np.allclose(a[k], b[k], rtol=0.0, atol=tol) for k in a)


def _subsets(items):
    for r in range(len(items) + 1):
        yield from itertools.combinations(items, r)


def _blend_times(old: TimeTable, new: TimeTable, step: float,
                 pairs: set[tuple[int, int]]) -> tuple[TimeTable, float]:
    times, dists = {}, {}
    shift = 0.0
    for (u, v) in pairs:
        t_old, t_new = old.time(u, v), new.time(u, v)
        times[(u, v)] = t_old + step * (t_new - t_old)
        dists[(u, v)] = new.dist(u, v)
        shift = max(shift, abs(t_new - t_old))
    return TimeTable(times, dists), shift


def unified_residual_parts(model: EquilibriumModel, splits, evaluation: SystemEval,
                           link_state, times: TimeTable,
                           fleet_prices) -> tuple[float, str]:
    """Max complementarity residual across all blocks, worst row named."""
    graph = model.graph
    worst, worst_row = 0.0, "none"

    def check(value, row):
        nonlocal worst, worst_row
        if abs(value) > worst:
            worst, worst_row = abs(value), row

    for pi, st in enumerate(evaluation.providers):
        name = model.scenario.providers[pi].name
        r, row = dispatch.ncp_residual_dispatch(
            graph, times, st.dispatch.flows, st.dispatch.duals, st.q_solo,
            st.q_pool, model.scenario.providers[pi].fleet_hours,
            search_costs=model.search_costs[pi] * (1.0 + st.fleet_price),
            dest_demand_halved=model.cfg.dest_demand_halved)
        check(r, f"dispatch[{name}]:{row}")
        r, row = matching.ncp_residual_matching(
            graph, st.match.flows, st.match.duals, st.dispatch.flows, st.q_pool,
            times, waiting_costs=st.waiting["pool"])
        check(r, f"matching[{name}]:{row}")
        check(modechoice.wait_fraction_kkt_residual(st.fractions, st.dispatch.flows),
              f"wait_fractions[{name}]")

    if link_state is not None:
        r, row = link_state.wardrop_residual()
        check(r, f"route_choice:{row}")
        # coupling: the OD time table must equal the equilibrium potentials
        for (u, v) in model._node_pairs:
            tau = link_state.potentials.get(v)
            if tau is not None and u in tau and math.isfinite(tau[u]):
                check(times.time(u, v) - tau[u], f"time_coupling[({u},{v})]")

    split_map = {(opt, w): splits[opt][w] for opt in splits for w in range(graph.n)}
    utilities = {}
    for (opt, w) in split_map:
        u = evaluation.utility(opt, w)
        utilities[(opt, w)] = u if math.isfinite(u) else 1e18
    tot = {w: model.q_total[w] for w in range(graph.n)}
    r, row = modechoice.split_complementarity_residual(utilities, split_map, tot)
    check(r, f"mode_choice:{row}")
    return worst, worst_row


def solve_equilibrium(network: RoadNetwork, scenario: Scenario,
                      graph: ODHypergraph | None = None,
                      fare_ratio: float | None = None,
                      warm_start: EquilibriumState | None = None) -> EquilibriumState:
    return EquilibriumModel(network, scenario, graph).solve(
        fare_ratio=fare_ratio, warm_start=warm_start)


def unified_residual(state: EquilibriumState, network: RoadNetwork) -> tuple[float, str]:
    """Recompute the certificate from the returned state (no caches)."""
    model = EquilibriumModel(network, state.scenario, state.graph)
    model.search_costs = [
        np.array([state.evaluation.utilities[((pi, "pool"), w)].friction
                  if math.isfinite(state.evaluation.utilities[((pi, "pool"), w)].friction)
                  else 0.0 for w in range(state.graph.n)])
        for pi in range(len(state.scenario.providers))]
    fleet_prices = [st.fleet_price for st in state.evaluation.providers]
    return unified_residual_parts(model, state.splits, state.evaluation,
                                  state.link_state, state.times, fleet_prices)


def compute_metrics(state: EquilibriumState) -> dict:
    """Deadhead miles, system travel cost (passenger-hours), total vehicle-hours."""
    graph = state.graph
    times = state.times
    out = {"providers": [], "DHM": 0.0, "STC": 0.0, "TVH": 0.0}
    for pi, st in enumerate(state.evaluation.providers):
        dhm = 0.0
        for w in range(graph.n):
            for k in range(graph.n):
                road = (graph.od_pairs[w][1], graph.od_pairs[k][0])
                if road[0] != road[1] and st.dispatch.flows.reb[w, k] > 0:
                    dhm += times.dist(*road) * st.dispatch.flows.reb[w, k]
        stc = 0.0
        for w in range(graph.n):
            o, d = graph.od_pairs[w]
            stc += times.time(o, d) * st.match.flows.solo[w]
        for w, volumes in st.match.flows.pool.items():
            for key, y in volumes.items():
                edge = graph.edges[graph.index[key]]
                stc += times.time(*edge.road) * y
        tvh = st.dispatch.flows.fleet_hours(graph, times)
        name = state.scenario.providers[pi].name
        out["providers"].append({"name": name, "DHM": dhm, "STC": stc, "TVH": tvh})
        out["DHM"] += dhm
        out["STC"] += stc
        out["TVH"] += tvh
    return out
