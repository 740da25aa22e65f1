"""Static grid model, DC sensitivity factors and the JSON grid format.

Line flows are oriented from ``from_bus`` to ``to_bus``: a positive flow
moves power from the ``from`` end to the ``to`` end. Nodal injections are
generation minus load, and the slack bus absorbs any imbalance.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
RADIAL_TOL = 1e-9


class GridError(Exception):
    pass


class ParseError(GridError):
    pass


class ValidationError(GridError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid network: " + "; ".join(self.problems))


class SingularTopology(GridError):
    pass


class RadialLine(GridError):
    def __init__(self, line):
        self.line = line
        super().__init__(f"outage of line {line} islands the network")


@dataclass(frozen=True)
class Generator:
    id: str
    bus: int
    p_min: float
    p_max: float
    r_max: float
    cost: float
    gamma: float = 0.0

    @property
    def capacity(self):
        return self.p_max - self.p_min


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: int
    to_bus: int
    susceptance: float
    f_max: float

    @property
    def f_min(self):
        return -self.f_max


@dataclass(frozen=True)
class Network:
    buses: tuple
    slack_bus: int
    generators: tuple
    lines: tuple
    base_mva: float = 100.0
    loads: tuple = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "lines", tuple(self.lines))
        loads = tuple(float(v) for v in self.loads) or (0.0,) * len(self.buses)
        object.__setattr__(self, "loads", loads)
        problems = validate(self)
        if problems:
            raise ValidationError(problems)

    @cached_property
    def bus_index(self):
        return {b: i for i, b in enumerate(self.buses)}

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def n_gen(self):
        return len(self.generators)

    @property
    def n_line(self):
        return len(self.lines)

    @cached_property
    def slack_index(self):
        return self.bus_index[self.slack_bus]

    @cached_property
    def gen_bus(self):
        """Bus-by-generator incidence matrix (maps dispatch to injections)."""
        m = np.zeros((self.n_bus, self.n_gen))
        for g, gen in enumerate(self.generators):
            m[self.bus_index[gen.bus], g] = 1.0
        return m

    @cached_property
    def p_min(self):
        return np.array([g.p_min for g in self.generators])

    @cached_property
    def p_max(self):
        return np.array([g.p_max for g in self.generators])

    @cached_property
    def r_max(self):
        return np.array([g.r_max for g in self.generators])

    @cached_property
    def cost(self):
        return np.array([g.cost for g in self.generators])

    @cached_property
    def gamma(self):
        return np.array([g.gamma for g in self.generators])

    @cached_property
    def f_max(self):
        return np.array([ln.f_max for ln in self.lines])

    @cached_property
    def base_loads(self):
        return np.array(self.loads)

    def with_generators(self, generators):
        return replace(self, generators=tuple(generators))

    def with_lines(self, lines):
        return replace(self, lines=tuple(lines))

    def digest(self):
        """Stable content hash, used to pin datasets to a network."""
        blob = json.dumps(network_to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def validate(net):
    problems = []
    if not net.buses:
        problems.append("bus list is empty")
        return problems
    if len(set(net.buses)) != len(net.buses):
        problems.append("duplicate bus ids")
    known = set(net.buses)
    if net.slack_bus not in known:
        problems.append(f"slack bus {net.slack_bus} is not a bus")
    if len(net.loads) != len(net.buses):
        problems.append("loads must have one entry per bus")
    elif any(v < 0 for v in net.loads):
        problems.append("loads must be nonnegative")
    if net.base_mva <= 0:
        problems.append("base_mva must be positive")
    for g in net.generators:
        if g.bus not in known:
            problems.append(f"generator {g.id} attached to unknown bus {g.bus}")
        if not 0 <= g.p_min <= g.p_max:
            problems.append(f"generator {g.id}: need 0 <= p_min <= p_max")
        if not 0 <= g.r_max <= g.p_max:
            problems.append(f"generator {g.id}: need 0 <= r_max <= p_max")
        if g.gamma < 0:
            problems.append(f"generator {g.id}: gamma must be >= 0")
    for ln in net.lines:
        if ln.from_bus not in known or ln.to_bus not in known:
            problems.append(f"line {ln.id} references unknown bus")
        if ln.from_bus == ln.to_bus:
            problems.append(f"line {ln.id} is a self loop")
        if ln.susceptance <= 0:
            problems.append(f"line {ln.id}: susceptance must be > 0")
        if ln.f_max <= 0:
            problems.append(f"line {ln.id}: f_max must be > 0")
    if not problems and not _connected(net):
        problems.append("network is not connected")
    return problems


def _connected(net):
    adj = {b: [] for b in net.buses}
    for ln in net.lines:
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    seen = {net.slack_bus}
    queue = deque([net.slack_bus])
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return len(seen) == len(net.buses)


@dataclass(frozen=True)
class SensitivityMatrices:
    ptdf: np.ndarray
    lodf: np.ndarray | None = None
    outages: tuple = field(default=())

    def flows(self, injections):
        """Line flows (MW) for nodal injections, batched along axis 0."""
        return np.asarray(injections) @ self.ptdf.T


def _incidence(net):
    """Line-by-bus incidence: +1 at from bus, -1 at to bus."""
    c = np.zeros((net.n_line, net.n_bus))
    for k, ln in enumerate(net.lines):
        c[k, net.bus_index[ln.from_bus]] = 1.0
        c[k, net.bus_index[ln.to_bus]] = -1.0
    return c


def compute_ptdf(net):
    """PTDF matrix with a zero column at the slack bus.

    Entry (l, b) is the MW flow on line l when 1 MW is injected at bus b and
    withdrawn at the slack bus.
    """
    inc = _incidence(net)
    b_line = np.array([ln.susceptance for ln in net.lines])
    b_flow = b_line[:, None] * inc
    b_bus = inc.T @ b_flow
    keep = [i for i in range(net.n_bus) if i != net.slack_index]
    b_red = b_bus[np.ix_(keep, keep)]
    if not keep:
        return SensitivityMatrices(ptdf=np.zeros((net.n_line, net.n_bus)))
    if np.linalg.cond(b_red) > 1e12:
        raise SingularTopology("reduced susceptance matrix is singular")
    ptdf = np.zeros((net.n_line, net.n_bus))
    ptdf[:, keep] = np.linalg.solve(b_red.T, b_flow[:, keep].T).T
    return SensitivityMatrices(ptdf=ptdf)


def transfer_factors(sens, net):
    """Flow on every line per MW moved from the from-bus to the to-bus of each line."""
    inc = _incidence(net)
    return sens.ptdf @ inc.T


def radial_lines(sens, net):
    ptl = transfer_factors(sens, net)
    return [k for k in range(net.n_line) if abs(1.0 - ptl[k, k]) < RADIAL_TOL]


def compute_lodf(sens, net, outages=None):
    """Line outage distribution factors for the outage lines in ``outages``.

    Column k of the result redistributes the pre-outage flow of line k; the
    diagonal entry is -1 so the outaged line carries nothing afterwards.
    Columns of lines not in ``outages`` are NaN.
    """
    outages = list(range(net.n_line)) if outages is None else list(outages)
    ptl = transfer_factors(sens, net)
    lodf = np.full((net.n_line, net.n_line), np.nan)
    for k in outages:
        denom = 1.0 - ptl[k, k]
        if abs(denom) < RADIAL_TOL:
            raise RadialLine(k)
        lodf[:, k] = ptl[:, k] / denom
        lodf[k, k] = -1.0
    return SensitivityMatrices(ptdf=sens.ptdf, lodf=lodf, outages=tuple(outages))


def sensitivities(net, with_lodf=True):
    """PTDF plus LODF over every non-radial line."""
    sens = compute_ptdf(net)
    if not with_lodf:
        return sens
    radial = set(radial_lines(sens, net))
    return compute_lodf(sens, net, [k for k in range(net.n_line) if k not in radial])


# -- file format -------------------------------------------------------------


def network_to_dict(net):
    return {
        "version": SCHEMA_VERSION,
        "name": net.name,
        "base_mva": net.base_mva,
        "slack_bus": net.slack_bus,
        "buses": [{"id": b, "load": ld} for b, ld in zip(net.buses, net.loads)],
        "generators": [
            {
                "id": g.id,
                "bus": g.bus,
                "p_min": g.p_min,
                "p_max": g.p_max,
                "r_max": g.r_max,
                "cost": g.cost,
                "gamma": g.gamma,
            }
            for g in net.generators
        ],
        "lines": [
            {
                "id": ln.id,
                "from": ln.from_bus,
                "to": ln.to_bus,
                "susceptance": ln.susceptance,
                "f_max": ln.f_max,
            }
            for ln in net.lines
        ],
    }


def _field(obj, key, where, kind=float, default=None):
    if key not in obj:
        if default is not None:
            return default
        raise ParseError(f"{where}: missing field '{key}'")
    try:
        return kind(obj[key])
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: field '{key}' has bad value {obj[key]!r}") from exc


def network_from_dict(doc):
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object")
    version = doc.get("version")
    if version != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema version {version!r}")
    for key in ("slack_bus", "buses", "generators", "lines"):
        if key not in doc:
            raise ParseError(f"missing top-level field '{key}'")
    buses, loads = [], []
    for i, b in enumerate(doc["buses"]):
        where = f"buses[{i}]"
        buses.append(_field(b, "id", where, int))
        loads.append(_field(b, "load", where, float, 0.0))
    gens = []
    for i, g in enumerate(doc["generators"]):
        where = f"generators[{i}]"
        p_max = _field(g, "p_max", where)
        r_max = g.get("r_max")
        gens.append(
            Generator(
                id=str(g.get("id", i)),
                bus=_field(g, "bus", where, int),
                p_min=_field(g, "p_min", where, float, 0.0),
                p_max=p_max,
                r_max=p_max if r_max is None else _field(g, "r_max", where),
                cost=_field(g, "cost", where),
                gamma=_field(g, "gamma", where, float, 0.0),
            )
        )
    lines = []
    for i, ln in enumerate(doc["lines"]):
        where = f"lines[{i}]"
        lines.append(
            Line(
                id=str(ln.get("id", i)),
                from_bus=_field(ln, "from", where, int),
                to_bus=_field(ln, "to", where, int),
                susceptance=_field(ln, "susceptance", where),
                f_max=_field(ln, "f_max", where),
            )
        )
    return Network(
        buses=buses,
        slack_bus=_field(doc, "slack_bus", "network", int),
        generators=gens,
        lines=lines,
        base_mva=_field(doc, "base_mva", "network", float, 100.0),
        loads=loads,
        name=str(doc.get("name", "")),
    )


def load_network(path):
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return network_from_dict(doc)


def save_network(net, path):
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n")


def bundled_case(name):
    """Path to a bundled grid file, e.g. ``bundled_case("case30")``."""
    stem = name[:-5] if name.endswith(".json") else name
    path = Path(__file__).parent / "data" / f"{stem}.json"
    if not path.exists():
        raise FileNotFoundError(f"no bundled case named {name!r}")
    return path


def resolve_network(ref):
    """Load a network from a file path or a bundled case name."""
    p = Path(ref)
    if p.suffix == ".json" and p.exists():
        return load_network(p)
    return load_network(bundled_case(ref))
