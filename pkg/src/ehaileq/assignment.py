"""Link-node user equilibrium of all e-hailing vehicle movements.

Demands on augmented node pairs (solo riders, pooled legs, rebalancing legs)
are assigned per destination with conjugate Frank-Wolfe on the Beckmann
potential, then polished by equalizing used-path costs so the Wardrop
complementarity rows hold to ~1e-9 rather than Frank-Wolfe's slow tail.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .netio import Link, RoadNetwork
from .odgraph import ODHypergraph
from .dispatch import TimeTable, VehicleFlows


class AssignmentError(RuntimeError):
    pass


def _adjacency(network: RoadNetwork) -> dict[int, list[tuple[int, int]]]:
    adj: dict[int, list[tuple[int, int]]] = {n: [] for n in network.nodes}
    for idx, link in enumerate(network.links):
        adj[link.tail].append((idx, link.head))
    return adj


def _reverse_adjacency(network: RoadNetwork) -> dict[int, list[tuple[int, int]]]:
    adj: dict[int, list[tuple[int, int]]] = {n: [] for n in network.nodes}
    for idx, link in enumerate(network.links):
        adj[link.head].append((idx, link.tail))
    return adj


def shortest_to(network: RoadNetwork, target: int, weights: np.ndarray,
                radj=None) -> dict[int, float]:
    """Dijkstra distances from every node to ``target`` under link weights."""
    radj = radj if radj is not None else _reverse_adjacency(network)
    dist = {n: math.inf for n in network.nodes}
    dist[target] = 0.0
    heap = [(0.0, target)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u] + 1e-15:
            continue
        for idx, v in radj[u]:
            nd = d + weights[idx]
            if nd < dist[v] - 1e-15:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def assemble_demand(graph: ODHypergraph, q_solo: np.ndarray,
                    flows: VehicleFlows) -> dict[tuple[int, int], float]:
    """Vehicle demand per augmented road-node pair for one provider.

    Solo riders enter at q_solo (occupied solo flow equals its demand);
    pooled OO/OD/DD legs and rebalancing legs enter at their dispatched
    flows. Zero-length pairs (co-located legs) carry no road movement.
    """
    out: dict[tuple[int, int], float] = {}

    def add(road: tuple[int, int], amount: float) -> None:
        if amount <= 0.0 or road[0] == road[1]:
            return
        out[road] = out.get(road, 0.0) + amount

    n = graph.n
    for w in range(n):
        add(graph.od_pairs[w], float(q_solo[w]))
    for w in range(n):
        for k in range(n):
            o_w, d_w = graph.od_pairs[w]
            o_k, d_k = graph.od_pairs[k]
            if k != w:
                add((o_w, o_k), flows.oo[w, k])
                add((d_w, d_k), flows.dd[w, k])
            add((o_w, d_k), flows.pool_od[w, k])
            add((d_w, o_k), flows.reb[w, k])
    return out


def merge_demands(parts: list[dict[tuple[int, int], float]]) -> dict[tuple[int, int], float]:
    total: dict[tuple[int, int], float] = {}
    for part in parts:
        for od, rate in part.items():
            total[od] = total.get(od, 0.0) + rate
    return total


@dataclass
class LinkState:
    """Converged UE state: per-destination and aggregate link flows."""

    network: RoadNetwork
    destinations: list[int]
    flows_by_dest: np.ndarray  # (len(destinations), len(links))
    demand: dict[tuple[int, int], float]
    relative_gap: float
    iterations: int
    potentials: dict[int, dict[int, float]] = field(default_factory=dict)

    @property
    def link_flows(self) -> np.ndarray:
        return self.flows_by_dest.sum(axis=0)

    def link_times(self) -> np.ndarray:
        x = self.link_flows
        return np.array([l.time(x[i]) for i, l in enumerate(self.network.links)])

    def wardrop_residual(self) -> tuple[float, str]:
        """Max over route-choice and conservation complementarity rows."""
        t = self.link_times()
        worst, worst_row = 0.0, "none"
        radj = _reverse_adjacency(self.network)
        for di, d in enumerate(self.destinations):
            tau = self.potentials.get(d) or shortest_to(self.network, d, t, radj)
            for idx, link in enumerate(self.network.links):
                x = self.flows_by_dest[di, idx]
                if math.isinf(tau.get(link.tail, math.inf)):
                    continue
                slack = tau[link.head] + t[idx] - tau[link.tail]
                v = min(x, slack)
                if abs(v) > worst:
                    worst, worst_row = abs(v), f"route_choice[({link.tail},{link.head})->{d}]"
            balance = self.node_balance(di)
            for node, value in balance.items():
                rhs = self.demand.get((node, d), 0.0)
                resid = value - (rhs if node != d else value)
                if node == d:
                    continue
                if abs(resid) > worst:
                    worst, worst_row = abs(resid), f"conservation[{node}->{d}]"
        return worst, worst_row

    def node_balance(self, dest_index: int) -> dict[int, float]:
        """Outflow minus inflow per node for one destination's flows."""
        out: dict[int, float] = {n: 0.0 for n in self.network.nodes}
        for idx, link in enumerate(self.network.links):
            x = self.flows_by_dest[dest_index, idx]
            out[link.tail] += x
            out[link.head] -= x
        return out


def _bpr_arrays(links):
    t0 = np.array([l.free_flow_time for l in links])
    coef = np.array([l.free_flow_time * l.bpr_a / l.capacity ** l.bpr_b
                     for l in links])
    power = np.array([l.bpr_b for l in links])
    return t0, coef, power


def solve_ue(network: RoadNetwork, demand: dict[tuple[int, int], float],
             tol: float = 1e-10, max_iter: int = 30000,
             warm_start: LinkState | None = None) -> LinkState:
    """Wardrop user equilibrium via conjugate Frank-Wolfe + path equalization."""
    demand = {od: r for od, r in demand.items() if r > 0.0}
    destinations = sorted({d for (_, d) in demand})
    links = network.links
    m = len(links)
    if not destinations:
        return LinkState(network, [], np.zeros((0, m)), {}, 0.0, 0)

    radj = _reverse_adjacency(network)
    by_dest: dict[int, list[tuple[int, float]]] = {d: [] for d in destinations}
    for (i, d), rate in demand.items():
        by_dest[d].append((i, rate))

    t0 = np.array([l.free_flow_time for l in links])
    for d in destinations:
        dist = shortest_to(network, d, t0, radj)
        for i, _ in by_dest[d]:
            if math.isinf(dist.get(i, math.inf)):
                raise AssignmentError(f"no route from {i} to {d} with positive demand")

    def all_or_nothing(t: np.ndarray) -> np.ndarray:
        y = np.zeros((len(destinations), m))
        for di, d in enumerate(destinations):
            dist = shortest_to(network, d, t, radj)
            succ = _tree_successors(network, dist, t, radj)
            for i, rate in by_dest[d]:
                node = i
                guard = 0
                while node != d:
                    idx = succ[node]
                    y[di, idx] += rate
                    node = links[idx].head
                    guard += 1
                    if guard > len(network.nodes) + 1:
                        raise AssignmentError("shortest-path tree cycle")
        return y

    bpr_t0, bpr_coef, bpr_pow = _bpr_arrays(links)

    def times_of(xtot: np.ndarray) -> np.ndarray:
        return bpr_t0 + bpr_coef * np.maximum(xtot, 0.0) ** bpr_pow

    if warm_start is not None and warm_start.destinations == destinations \
            and warm_start.demand.keys() == demand.keys() \
            and all(abs(warm_start.demand[k] - demand[k]) < 1e-15 for k in demand):
        x = warm_start.flows_by_dest.copy()
    elif warm_start is not None and len(warm_start.destinations) > 0:
        # different demand: seed the first loading with the previous times
        x = all_or_nothing(warm_start.link_times())
    else:
        x = all_or_nothing(times_of(np.zeros(m)))

    prev_dir = None
    gap = math.inf
    it = 0
    congested = any(l.bpr_a > 0.0 for l in links)
    for it in range(1, max_iter + 1):
        xtot = x.sum(axis=0)
        t = times_of(xtot)
        y = all_or_nothing(t)
        total_cost = float(xtot @ t)
        aon_cost = float(y.sum(axis=0) @ t)
        gap = (total_cost - aon_cost) / total_cost if total_cost > 0 else 0.0
        if gap <= tol:
            break
        direction = y - x
        if prev_dir is not None:
            direction = _conjugate_mix(x, direction, prev_dir, links)
        alpha = _exact_line_search(x, direction, (bpr_t0, bpr_coef, bpr_pow))
        if alpha <= 0.0:
            break
        x = x + alpha * direction
        np.maximum(x, 0.0, out=x)
        prev_dir = direction
        if not congested:
            break  # times are flow-independent: AON is exact

    state = LinkState(network, destinations, x, dict(demand),
                      relative_gap=max(gap, 0.0), iterations=it)
    if congested:
        _equalize_paths(state, by_dest, radj)
    t_final = state.link_times()
    state.potentials = {d: shortest_to(network, d, t_final, radj) for d in destinations}
    return state


def _tree_successors(network: RoadNetwork, dist: dict[int, float], t: np.ndarray,
                     radj) -> dict[int, int]:
    succ: dict[int, int] = {}
    for idx, link in enumerate(network.links):
        du, dv = dist.get(link.tail, math.inf), dist.get(link.head, math.inf)
        if math.isinf(du) or math.isinf(dv):
            continue
        if abs(du - (t[idx] + dv)) <= 1e-12 * max(1.0, abs(du)):
            prev = succ.get(link.tail)
            if prev is None or idx < prev:
                succ[link.tail] = idx
    return succ


def _exact_line_search(x: np.ndarray, direction: np.ndarray, bpr) -> float:
    t0, coef, power = bpr
    d_tot = direction.sum(axis=0)
    x_tot = x.sum(axis=0)
    active = d_tot != 0.0
    d_a, x_a = d_tot[active], x_tot[active]
    t0_a, c_a, p_a = t0[active], coef[active], power[active]

    def deriv(alpha: float) -> float:
        flows = np.maximum(x_a + alpha * d_a, 0.0)
        return float(d_a @ (t0_a + c_a * flows ** p_a))

    lo, hi = 0.0, 1.0
    if deriv(0.0) >= 0.0:
        return 0.0
    if deriv(1.0) <= 0.0:
        return 1.0
    for _ in range(70):
        mid = 0.5 * (lo + hi)
        if deriv(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _conjugate_mix(x, fw_dir, prev_dir, links) -> np.ndarray:
    """Conjugate Frank-Wolfe direction (Mitradjieva-Lindberg mixing)."""
    x_tot = x.sum(axis=0)
    tp = np.array([l.time(x_tot[i]) * l.bpr_b / max(x_tot[i], 1e-12) if l.bpr_a > 0 and x_tot[i] > 0
                   else 0.0 for i, l in enumerate(links)])
    d_fw = fw_dir.sum(axis=0)
    d_prev = prev_dir.sum(axis=0)
    denom = float(d_prev @ (tp * (d_prev - d_fw)))
    if abs(denom) < 1e-30:
        return fw_dir
    beta = float(d_fw @ (tp * (d_prev - d_fw))) / denom
    beta = min(max(beta, 0.0), 0.999)
    return (1 - beta) * prev_dir + beta * fw_dir if beta > 0 else fw_dir


def _cancel_antiparallel(state: LinkState) -> None:
    """Remove 2-cycles from per-destination flows (mid-convergence loadings
    can stack antiparallel links); canceling preserves conservation and can
    only lower the Beckmann potential."""
    links = state.network.links
    reverse = {}
    index_of = {(l.tail, l.head): i for i, l in enumerate(links)}
    for i, l in enumerate(links):
        j = index_of.get((l.head, l.tail))
        if j is not None and j > i:
            reverse[i] = j
    for di in range(len(state.destinations)):
        f = state.flows_by_dest[di]
        for i, j in reverse.items():
            r = min(f[i], f[j])
            if r > 0.0:
                f[i] -= r
                f[j] -= r


def _decompose_paths(state: LinkState, dest_index: int, origin: int, rate: float,
                     flows: np.ndarray) -> list[tuple[list[int], float]]:
    """Greedy path decomposition of one origin's share of a destination flow."""
    network = state.network
    d = state.destinations[dest_index]
    adj = _adjacency(network)
    paths = []
    remaining = rate
    guard = 0
    while remaining > 1e-12 * max(1.0, rate) and guard < 50:
        guard += 1
        node, path, cap = origin, [], math.inf
        steps = 0
        while node != d:
            best = None
            for idx, v in adj[node]:
                if flows[idx] > 1e-12 and (best is None or flows[idx] > flows[best[0]]):
                    best = (idx, v)
            if best is None:
                return paths  # decomposition exhausted
            path.append(best[0])
            cap = min(cap, flows[best[0]])
            node = best[1]
            steps += 1
            if steps > len(network.nodes) + 1:
                return paths
        take = min(cap, remaining)
        for idx in path:
            flows[idx] -= take
        paths.append((path, take))
        remaining -= take
    return paths


def _equalize_paths(state: LinkState, by_dest, radj, rounds: int = 400,
                    tol: float = 1e-12) -> None:
    """Shift flow between used paths of each OD until costs equalize.

    Newton steps on pairwise swaps drive the Wardrop complementarity to
    machine precision where Frank-Wolfe alone has a slow tail. The shortest
    path under current times joins the candidate set each round.
    """
    network = state.network
    links = network.links
    _cancel_antiparallel(state)
    od_paths: dict[tuple[int, int], list[tuple[list[int], float]]] = {}
    t_now = state.link_times()
    for di, d in enumerate(state.destinations):
        # peel origins nearest the destination first: an upstream origin's
        # pass-through flow must not consume a downstream origin's injection
        dist = shortest_to(state.network, d, t_now)
        orderings = [sorted(by_dest[d], key=lambda ir: dist.get(ir[0], math.inf)),
                     sorted(by_dest[d], key=lambda ir: -dist.get(ir[0], math.inf))]
        done = False
        for ordering in orderings:
            residual = state.flows_by_dest[di].copy()
            trial: dict[tuple[int, int], list] = {}
            ok = True
            for i, rate in ordering:
                decomposed = _decompose_paths(state, di, i, rate, residual)
                got = sum(f for _, f in decomposed)
                if abs(got - rate) > 1e-7 * max(1.0, rate):
                    ok = False
                    break
                trial[(i, d)] = decomposed
            if ok:
                od_paths.update(trial)
                done = True
                break
        if not done:
            return  # decomposition failed: keep the Frank-Wolfe solution

    def link_cost_and_slope(idx: int, flow: float) -> tuple[float, float]:
        l = links[idx]
        t = l.time(flow)
        if l.bpr_a == 0.0 or flow <= 0.0:
            return t, 0.0
        slope = l.free_flow_time * l.bpr_a * l.bpr_b * (flow / l.capacity) ** (l.bpr_b - 1) / l.capacity
        return t, slope

    bpr_t0, bpr_coef, bpr_pow = _bpr_arrays(links)
    xtot = state.link_flows.copy()
    for _ in range(rounds):
        t = bpr_t0 + bpr_coef * np.maximum(xtot, 0.0) ** bpr_pow
        trees = {d: shortest_to(network, d, t, radj) for d in state.destinations}
        worst = 0.0
        for (i, d), plist in od_paths.items():
            # admit the current shortest path if strictly cheaper than all used
            dist = trees[d]
            succ = _tree_successors(network, dist, t, radj)
            sp_path, node, ok = [], i, True
            while node != d:
                if node not in succ:
                    ok = False
                    break
                sp_path.append(succ[node])
                node = links[succ[node]].head
            if ok and not any(p == sp_path for p, _ in plist):
                plist.append((sp_path, 0.0))

            costs = [sum(t[idx] for idx in p) for p, _ in plist]
            hi = max(range(len(plist)), key=lambda j: costs[j] if plist[j][1] > 1e-14 else -math.inf)
            lo = min(range(len(plist)), key=lambda j: costs[j])
            spread = costs[hi] - costs[lo]
            worst = max(worst, spread if plist[hi][1] > 1e-14 else 0.0)
            if hi == lo or spread <= tol or plist[hi][1] <= 1e-14:
                continue
            sym_hi = set(plist[hi][0]) - set(plist[lo][0])
            sym_lo = set(plist[lo][0]) - set(plist[hi][0])
            slope = sum(link_cost_and_slope(idx, xtot[idx])[1] for idx in sym_hi | sym_lo)
            delta = spread / slope if slope > 0 else plist[hi][1]
            delta = min(delta, plist[hi][1])
            plist[hi] = (plist[hi][0], plist[hi][1] - delta)
            plist[lo] = (plist[lo][0], plist[lo][1] + delta)
            for idx in sym_hi:
                xtot[idx] -= delta
            for idx in sym_lo:
                xtot[idx] += delta
            t = bpr_t0 + bpr_coef * np.maximum(xtot, 0.0) ** bpr_pow
        if worst <= tol:
            break

    # rebuild per-destination link flows from the equalized paths
    new = np.zeros_like(state.flows_by_dest)
    for (i, d), plist in od_paths.items():
        di = state.destinations.index(d)
        for path, f in plist:
            if f <= 0.0:
                continue
            for idx in path:
                new[di, idx] += f
    state.flows_by_dest = new


def od_times_and_distances(network: RoadNetwork, state: LinkState | None,
                           node_pairs: set[tuple[int, int]]) -> TimeTable:
    """Congested times (tau at the current equilibrium) and static shortest
    distances for every requested road-node pair."""
    targets = sorted({v for (_, v) in node_pairs})
    radj = _reverse_adjacency(network)
    t = state.link_times() if state is not None else \
        np.array([l.free_flow_time for l in network.links])
    lengths = np.array([l.distance for l in network.links])
    times: dict[tuple[int, int], float] = {}
    dists: dict[tuple[int, int], float] = {}
    for v in targets:
        if state is not None and v in state.potentials:
            tau = state.potentials[v]
        else:
            tau = shortest_to(network, v, t, radj)
        dl = shortest_to(network, v, lengths, radj)
        for (u, v2) in node_pairs:
            if v2 != v:
                continue
            if math.isinf(tau.get(u, math.inf)):
                raise AssignmentError(f"node pair ({u},{v}) unreachable")
            times[(u, v)] = tau[u]
            dists[(u, v)] = dl[u]
    return TimeTable(times, dists)


def free_flow_tables(network: RoadNetwork,
                     node_pairs: set[tuple[int, int]]) -> TimeTable:
    return od_times_and_distances(network, None, node_pairs)
