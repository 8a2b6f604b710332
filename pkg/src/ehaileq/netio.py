"""Network and scenario I/O: TNTP road networks, JSON scenario configs, BPR times."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path


class ParseError(ValueError):
    """Malformed network file; carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(ValueError):
    """Scenario config violates an invariant; names the offending key."""


@dataclass(frozen=True)
class Link:
    """Directed road link with BPR parameters.

    Times are hours, distance miles, capacity veh/h. Congested time is
    t0 * (1 + a * (flow / capacity) ** b).
    """

    tail: int
    head: int
    capacity: float
    distance: float
    free_flow_time: float
    bpr_a: float
    bpr_b: float

    def time(self, flow: float) -> float:
        if self.bpr_a == 0.0 or flow == 0.0:
            return self.free_flow_time
        return self.free_flow_time * (1.0 + self.bpr_a * (flow / self.capacity) ** self.bpr_b)


def bpr_time(link: Link, flow: float) -> float:
    """Congested travel time of ``link`` at ``flow`` (veh/h)."""
    return link.time(flow)


@dataclass(frozen=True)
class RoadNetwork:
    nodes: tuple[int, ...]
    links: tuple[Link, ...]
    origin_set: frozenset[int] = frozenset()
    destination_set: frozenset[int] = frozenset()

    @property
    def intermediate_set(self) -> frozenset[int]:
        return frozenset(self.nodes) - self.origin_set - self.destination_set

    def with_od_sets(self, origins, destinations) -> "RoadNetwork":
        missing = (set(origins) | set(destinations)) - set(self.nodes)
        if missing:
            raise ValidationError(f"OD nodes not in network: {sorted(missing)}")
        return replace(self, origin_set=frozenset(origins), destination_set=frozenset(destinations))

    def scaled(self, time_scale: float = 1.0, distance_scale: float = 1.0,
               capacity_scale: float = 1.0) -> "RoadNetwork":
        """Unit/scenario scaling applied at load; the source data is never mutated."""
        if time_scale == distance_scale == capacity_scale == 1.0:
            return self
        links = tuple(
            replace(l, free_flow_time=l.free_flow_time * time_scale,
                    distance=l.distance * distance_scale,
                    capacity=l.capacity * capacity_scale)
            for l in self.links
        )
        return replace(self, links=links)


def parse_tntp(net_text: str, trips_text: str | None = None) -> RoadNetwork:
    """Parse a TNTP network file (metadata header + link table).

    ``trips_text`` is accepted for interface completeness; OD sets are attached
    later from the scenario (``RoadNetwork.with_od_sets``).
    """
    meta: dict[str, str] = {}
    links: list[Link] = []
    seen: set[tuple[int, int]] = set()
    in_table = False
    n_nodes_declared = None

    for lineno, raw in enumerate(net_text.splitlines(), start=1):
        line = raw.split("~")[0].strip()
        if not line:
            continue
        if line.startswith("<"):
            end = line.find(">")
            if end < 0:
                raise ParseError("unterminated metadata tag", lineno)
            key = line[1:end].strip().upper()
            value = line[end + 1:].strip()
            meta[key] = value
            if key == "END OF METADATA":
                in_table = True
            continue
        if not in_table and not meta:
            # tolerate headerless link tables
            in_table = True
        parts = line.rstrip(";").split()
        if len(parts) < 7:
            raise ParseError(f"link row needs >=7 fields, got {len(parts)}", lineno)
        try:
            tail, head = int(parts[0]), int(parts[1])
            capacity, length, fft = (float(parts[2]), float(parts[3]), float(parts[4]))
            b_coef, power = float(parts[5]), float(parts[6])
        except ValueError as exc:
            raise ParseError(f"bad numeric field ({exc})", lineno) from None
        if (tail, head) in seen:
            raise ParseError(f"duplicate link ({tail},{head})", lineno)
        seen.add((tail, head))
        if capacity <= 0:
            raise ParseError(f"nonpositive capacity on link ({tail},{head})", lineno)
        if fft < 0:
            raise ParseError(f"negative free-flow time on link ({tail},{head})", lineno)
        links.append(Link(tail, head, capacity, length, fft, b_coef, power))

    if not links:
        raise ParseError("no links")

    nodes = sorted({l.tail for l in links} | {l.head for l in links})
    if "NUMBER OF NODES" in meta:
        n_nodes_declared = int(meta["NUMBER OF NODES"])
        if max(nodes) > n_nodes_declared:
            raise ParseError(
                f"link references node {max(nodes)} beyond declared {n_nodes_declared}")
        nodes = list(range(1, n_nodes_declared + 1))
    if "NUMBER OF LINKS" in meta and int(meta["NUMBER OF LINKS"]) != len(links):
        raise ParseError(
            f"declared {meta['NUMBER OF LINKS']} links, parsed {len(links)}")
    return RoadNetwork(nodes=tuple(nodes), links=tuple(links))


def write_tntp(network: RoadNetwork) -> str:
    """Serialize back to TNTP; round-trips every numeric field bit-for-bit."""
    out = [
        f"<NUMBER OF NODES> {len(network.nodes)}",
        f"<NUMBER OF LINKS> {len(network.links)}",
        "<END OF METADATA>",
        "~ init term capacity length fftt b power speed toll type ;",
    ]
    for l in network.links:
        out.append(
            f"{l.tail}\t{l.head}\t{l.capacity!r}\t{l.distance!r}\t{l.free_flow_time!r}"
            f"\t{l.bpr_a!r}\t{l.bpr_b!r}\t0\t0\t1\t;"
        )
    return "\n".join(out) + "\n"


# --- scenario configuration -------------------------------------------------

@dataclass(frozen=True)
class Provider:
    """One e-hailing company: fare schedule and fleet."""

    name: str
    fixed_fare: dict[tuple[int, int], float] | float  # per OD pair or flat, solo
    time_rate: float  # alpha1, $/h applied to (t - free-flow t)
    distance_rate: float  # alpha2, $/mile
    pool_discount: float = 1.0  # gamma in (0,1]
    fleet_hours: float | None = None  # S (veh-hours); None = unconstrained
    fixed_fare_pool: dict[tuple[int, int], float] | float | None = None

    def fare_fixed(self, od: tuple[int, int], mode: str) -> float:
        source = self.fixed_fare if (mode == "solo" or self.fixed_fare_pool is None) \
            else self.fixed_fare_pool
        if isinstance(source, dict):
            try:
                return source[od]
            except KeyError:
                raise ValidationError(f"provider {self.name}: no fixed fare for OD {od}")
        return float(source)


@dataclass(frozen=True)
class CostWeights:
    """Beta coefficients of the modal disutility."""

    wait_solo: float = 0.0
    wait_pool: float = 0.0
    surplus_solo: float = 0.0
    surplus_pool: float = 0.0
    search_solo: float = 0.0
    search_pool: float = 0.0
    surplus_passenger_solo: float = 0.0
    surplus_passenger_pool: float = 0.0
    in_vehicle: float = 0.0
    inconvenience_time: float = 0.0
    inconvenience_distance: float = 0.0

    def wait(self, mode: str) -> float:
        return self.wait_solo if mode == "solo" else self.wait_pool

    def surplus(self, mode: str) -> float:
        return self.surplus_solo if mode == "solo" else self.surplus_pool

    def search(self, mode: str) -> float:
        return self.search_solo if mode == "solo" else self.search_pool

    def surplus_passenger(self, mode: str) -> float:
        return self.surplus_passenger_solo if mode == "solo" else self.surplus_passenger_pool


@dataclass(frozen=True)
class MatchingFunction:
    """Douglas matching-function constants for the search-friction term."""

    scale: float = 0.2  # A
    elasticity_wait: float = 1.0  # alpha1
    elasticity_vehicle: float = 1.0  # alpha2
    friction_floor: float = 1e-6  # floor on q*phi before the negative exponent


@dataclass(frozen=True)
class SolverConfig:
    outer_tolerance: float = 1e-7
    max_outer_iterations: int = 60
    ue_relative_gap: float = 1e-10
    ue_max_iterations: int = 30000
    lp_tolerance: float = 1e-9
    split_tolerance: float = 1e-9
    damping: str = "msa"  # or "fixed"
    damping_factor: float = 1.0
    lexicographic_ties: bool = True
    waiting_cost_verbatim: bool = False
    dest_demand_halved: bool = False
    seed: int = 0


@dataclass(frozen=True)
class Scenario:
    od_demands: dict[tuple[int, int], float]
    providers: tuple[Provider, ...]
    weights: CostWeights
    matching: MatchingFunction = MatchingFunction()
    solver: SolverConfig = SolverConfig()
    time_scale: float = 1.0
    distance_scale: float = 1.0
    capacity_scale: float = 1.0

    @property
    def od_pairs(self) -> list[tuple[int, int]]:
        return list(self.od_demands)

    def with_demands(self, od_demands) -> "Scenario":
        return replace(self, od_demands=dict(od_demands))


def _parse_fixed_fare(value, where: str):
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, dict):
        out = {}
        for key, fare in value.items():
            o, d = (int(x) for x in str(key).split("-"))
            out[(o, d)] = float(fare)
        return out
    raise ValidationError(f"{where}: fixed_fare must be a number or an 'o-d' map")


def load_scenario(config_text: str) -> Scenario:
    """Parse and validate a JSON scenario config.

    Unknown keys raise; unspecified weights default to 0; pool_discount
    defaults to 1.
    """
    try:
        raw = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from None

    known_top = {"demands", "providers", "weights", "matching", "solver",
                 "time_scale", "distance_scale", "capacity_scale"}
    for key in raw:
        if key not in known_top:
            raise ValidationError(f"unknown key: {key}")

    demands: dict[tuple[int, int], float] = {}
    for entry in raw.get("demands", []):
        _check_keys(entry, {"origin", "destination", "rate"}, "demands")
        od = (int(entry["origin"]), int(entry["destination"]))
        rate = float(entry["rate"])
        if rate <= 0:
            raise ValidationError(f"demands: rate for {od} must be positive, got {rate}")
        if od[0] == od[1]:
            raise ValidationError(f"demands: origin equals destination for {od}")
        if od in demands:
            raise ValidationError(f"demands: duplicate OD pair {od}")
        demands[od] = rate
    if not demands:
        raise ValidationError("demands: at least one OD pair required")

    providers = []
    for i, entry in enumerate(raw.get("providers", [])):
        _check_keys(entry, {"name", "fixed_fare", "fixed_fare_pool", "time_rate",
                            "distance_rate", "pool_discount", "fleet_hours"}, "providers")
        gamma = float(entry.get("pool_discount", 1.0))
        if not 0.0 < gamma <= 1.0:
            raise ValidationError(f"providers[{i}].pool_discount: must be in (0,1], got {gamma}")
        fleet = entry.get("fleet_hours")
        if fleet is not None:
            fleet = float(fleet)
            if fleet < 0:
                raise ValidationError(f"providers[{i}].fleet_hours: must be >= 0")
        name = str(entry.get("name", f"provider{i + 1}"))
        pool_fare = entry.get("fixed_fare_pool")
        providers.append(Provider(
            name=name,
            fixed_fare=_parse_fixed_fare(entry["fixed_fare"], f"providers[{i}]"),
            time_rate=float(entry.get("time_rate", 0.0)),
            distance_rate=float(entry.get("distance_rate", 0.0)),
            pool_discount=gamma,
            fleet_hours=fleet,
            fixed_fare_pool=None if pool_fare is None
            else _parse_fixed_fare(pool_fare, f"providers[{i}]"),
        ))
    if not providers:
        raise ValidationError("providers: at least one provider required")
    if len({p.name for p in providers}) != len(providers):
        raise ValidationError("providers: names must be unique")

    weight_fields = set(CostWeights.__dataclass_fields__)
    weights_raw = raw.get("weights", {})
    _check_keys(weights_raw, weight_fields, "weights")
    for key, value in weights_raw.items():
        if float(value) < 0:
            raise ValidationError(f"weights.{key}: must be >= 0, got {value}")
    weights = CostWeights(**{k: float(v) for k, v in weights_raw.items()})

    matching_raw = raw.get("matching", {})
    _check_keys(matching_raw, set(MatchingFunction.__dataclass_fields__), "matching")
    matching = MatchingFunction(**{k: float(v) for k, v in matching_raw.items()})
    if matching.scale <= 0:
        raise ValidationError("matching.scale: must be positive")

    solver_raw = raw.get("solver", {})
    _check_keys(solver_raw, set(SolverConfig.__dataclass_fields__), "solver")
    solver = SolverConfig(**solver_raw)

    return Scenario(
        od_demands=demands,
        providers=tuple(providers),
        weights=weights,
        matching=matching,
        solver=solver,
        time_scale=float(raw.get("time_scale", 1.0)),
        distance_scale=float(raw.get("distance_scale", 1.0)),
        capacity_scale=float(raw.get("capacity_scale", 1.0)),
    )


def _check_keys(entry: dict, allowed: set[str], where: str) -> None:
    for key in entry:
        if key not in allowed:
            raise ValidationError(f"{where}: unknown key: {key}")


def load_scenario_file(path: str | Path) -> Scenario:
    return load_scenario(Path(path).read_text())


def load_network_for_scenario(net_path: str | Path, scenario: Scenario) -> RoadNetwork:
    """Parse, scale per scenario and attach OD sets in one step."""
    net = parse_tntp(Path(net_path).read_text())
    net = net.scaled(scenario.time_scale, scenario.distance_scale, scenario.capacity_scale)
    origins = {o for o, _ in scenario.od_pairs}
    dests = {d for _, d in scenario.od_pairs}
    return net.with_od_sets(origins, dests)


def data_path(name: str) -> Path:
    """Path of a bundled fixture (networks and scenario configs)."""
    return Path(__file__).parent / "data" / name
