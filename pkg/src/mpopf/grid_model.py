"""Static network description for multi-period DC-OPF.

Case files are TOML documents with a ``[case]`` header, a ``[buses]`` table
listing bus ids, and array-of-table sections ``[[generators]]``, ``[[lines]]``,
``[[loads]]`` and ``[[ess]]``.  Devices reference buses by id; the parsed
:class:`GridCase` stores zero-based bus indices.  Units: MW, MWh, p.u.
reactance, currency/MWh for costs.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class CaseError(ValueError):
    """Raised when a case file cannot be parsed or violates a case invariant."""


@dataclass(frozen=True)
class GeneratorSpec:
    bus: int
    p_min: float
    p_max: float
    ramp_up: float
    ramp_down: float
    # length 1 (constant over the horizon) or length T
    cost: tuple[float, ...]


@dataclass(frozen=True)
class LineSpec:
    from_bus: int
    to_bus: int
    reactance: float
    flow_limit: float


@dataclass(frozen=True)
class LoadSpec:
    bus: int
    p_nominal: float = 0.0


@dataclass(frozen=True)
class EssSpec:
    bus: int
    p_ch_max: float
    p_dis_max: float
    eta_ch: float
    eta_dis: float
    e_min: float
    e_max: float
    e_init_frac: float = 0.5

    @property
    def e_init(self) -> float:
        return self.e_init_frac * self.e_max


@dataclass(frozen=True)
class GridCase:
    n_b: int
    generators: tuple[GeneratorSpec, ...]
    lines: tuple[LineSpec, ...]
    loads: tuple[LoadSpec, ...]
    ess_units: tuple[EssSpec, ...]
    slack_bus: int
    name: str = "case"
    base_mva: float = 100.0
    bus_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.bus_ids:
            object.__setattr__(self, "bus_ids", tuple(range(self.n_b)))
        validate_case(self)

    @property
    def n_g(self) -> int:
        return len(self.generators)

    @property
    def n_d(self) -> int:
        return len(self.loads)

    @property
    def n_l(self) -> int:
        return len(self.lines)

    @property
    def n_e(self) -> int:
        return len(self.ess_units)

    @property
    def p_min(self) -> np.ndarray:
        return np.array([g.p_min for g in self.generators])

    @property
    def p_max(self) -> np.ndarray:
        return np.array([g.p_max for g in self.generators])

    @property
    def ramp_up(self) -> np.ndarray:
        return np.array([g.ramp_up for g in self.generators])

    @property
    def ramp_down(self) -> np.ndarray:
        return np.array([g.ramp_down for g in self.generators])

    @property
    def flow_limits(self) -> np.ndarray:
        return np.array([ln.flow_limit for ln in self.lines])

    @property
    def nominal_demand(self) -> np.ndarray:
        return np.array([ld.p_nominal for ld in self.loads])

    def ess_array(self, attr: str) -> np.ndarray:
        if attr == "e_init":
            return np.array([e.e_init for e in self.ess_units])
        return np.array([getattr(e, attr) for e in self.ess_units], dtype=float)

    def cost_matrix(self, horizon: int) -> np.ndarray:
        """Per-period generator cost coefficients, shape (n_g, horizon)."""
        out = np.empty((self.n_g, horizon))
        for i, g in enumerate(self.generators):
            if len(g.cost) == 1:
                out[i] = g.cost[0]
            elif len(g.cost) == horizon:
                out[i] = g.cost
            else:
                raise CaseError(
                    f"generator {i}: cost has {len(g.cost)} entries, "
                    f"horizon is {horizon}"
                )
        return out

    def bus_index(self, bus_id: int) -> int:
        try:
            return self.bus_ids.index(bus_id)
        except ValueError:
            raise CaseError(f"unknown bus id {bus_id}") from None

    def fingerprint(self) -> str:
        """Stable content hash of the case, used in manifests and checkpoints."""
        payload = json.dumps(asdict(self), sort_keys=True, default=float)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def validate_case(case: GridCase) -> None:
    nb = case.n_b
    if nb < 1:
        raise CaseError("case needs at least one bus")
    if len(case.bus_ids) != nb or len(set(case.bus_ids)) != nb:
        raise CaseError("bus ids must be unique and match the bus count")
    if case.n_g < 1:
        raise CaseError("case needs at least one generator (n_g >= 1)")
    if case.n_d < 1:
        raise CaseError("case needs at least one load (n_d >= 1)")
    if not 0 <= case.slack_bus < nb:
        raise CaseError(f"slack bus index {case.slack_bus} outside [0, {nb})")

    def check_bus(kind, i, b):
        if not 0 <= b < nb:
            raise CaseError(f"{kind} {i}: bus index {b} outside [0, {nb})")

    for i, g in enumerate(case.generators):
        check_bus("generator", i, g.bus)
        if not 0 <= g.p_min <= g.p_max:
            raise CaseError(f"generator {i}: need 0 <= p_min <= p_max")
        if g.ramp_up < 0 or g.ramp_down < 0:
            raise CaseError(f"generator {i}: ramp limits must be >= 0")
        if len(g.cost) == 0 or any(c < 0 for c in g.cost):
            raise CaseError(f"generator {i}: cost entries must be >= 0")
    for i, ln in enumerate(case.lines):
        check_bus("line", i, ln.from_bus)
        check_bus("line", i, ln.to_bus)
        if ln.from_bus == ln.to_bus:
            raise CaseError(f"line {i}: from_bus equals to_bus")
        if not ln.reactance > 0:
            raise CaseError(f"line {i}: reactance must be > 0")
        if not ln.flow_limit > 0:
            raise CaseError(f"line {i}: flow_limit must be > 0")
    for i, ld in enumerate(case.loads):
        check_bus("load", i, ld.bus)
        if ld.p_nominal < 0:
            raise CaseError(f"load {i}: p_nominal must be >= 0")
    for i, e in enumerate(case.ess_units):
        check_bus("ess", i, e.bus)
        if not (0 < e.eta_ch <= 1 and 0 < e.eta_dis <= 1):
            raise CaseError(f"ess {i}: efficiencies must lie in (0, 1]")
        if not 0 <= e.e_min < e.e_max:
            raise CaseError(f"ess {i}: need 0 <= e_min < e_max")
        if e.p_ch_max < 0 or e.p_dis_max < 0:
            raise CaseError(f"ess {i}: power limits must be >= 0")
        if not e.e_min <= e.e_init <= e.e_max:
            raise CaseError(f"ess {i}: initial energy outside [e_min, e_max]")


_SECTION_KEYS = {
    "case": ({"slack_bus"}, {"name", "base_mva"}),
    "buses": (set(), {"ids", "count"}),
    "generators": ({"bus", "p_max", "cost"}, {"p_min", "ramp_up", "ramp_down"}),
    "lines": ({"from_bus", "to_bus", "reactance", "flow_limit"}, set()),
    "loads": ({"bus"}, {"p_nominal"}),
    "ess": (
        {"bus", "p_ch_max", "p_dis_max", "eta_ch", "eta_dis", "e_max"},
        {"e_min", "e_init_frac"},
    ),
}


def _check_keys(section: str, idx, entry: dict) -> None:
    required, optional = _SECTION_KEYS[section]
    where = section if idx is None else f"{section}[{idx}]"
    if not isinstance(entry, dict):
        raise CaseError(f"[{where}]: expected a table")
    unknown = set(entry) - required - optional
    if unknown:
        raise CaseError(f"[{where}]: unknown key(s) {sorted(unknown)}")
    missing = required - set(entry)
    if missing:
        raise CaseError(f"[{where}]: missing key(s) {sorted(missing)}")


def _num(section, idx, entry, key, default=None) -> float:
    value = entry.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CaseError(f"[{section}[{idx}]] field '{key}': expected a number, got {value!r}")
    return float(value)


def parse_case(text: str, source: str = "<string>") -> GridCase:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise CaseError(f"{source}: {exc}") from exc

    unknown = set(doc) - set(_SECTION_KEYS)
    if unknown:
        raise CaseError(f"{source}: unknown section(s) {sorted(unknown)}")
    for sec in ("case", "buses", "generators", "loads"):
        if sec not in doc:
            raise CaseError(f"{source}: missing section [{sec}]")

    header = doc["case"]
    _check_keys("case", None, header)
    buses = doc["buses"]
    _check_keys("buses", None, buses)
    if "ids" in buses:
        bus_ids = tuple(int(b) for b in buses["ids"])
    elif "count" in buses:
        bus_ids = tuple(range(int(buses["count"])))
    else:
        raise CaseError(f"{source}: [buses] needs 'ids' or 'count'")
    pos = {b: i for i, b in enumerate(bus_ids)}
    if len(pos) != len(bus_ids):
        raise CaseError(f"{source}: duplicate bus ids")

    def bus_of(section, idx, entry, key="bus"):
        b = entry[key]
        if b not in pos:
            raise CaseError(f"[{section}[{idx}]] field '{key}': unknown bus id {b!r}")
        return pos[b]

    def entries(section):
        items = doc.get(section, [])
        if not isinstance(items, list):
            raise CaseError(f"{source}: [{section}] must be an array of tables ([[{section}]])")
        for i, e in enumerate(items):
            _check_keys(section, i, e)
        return items

    gens = []
    for i, e in enumerate(entries("generators")):
        cost = e["cost"]
        cost = tuple(float(c) for c in cost) if isinstance(cost, list) else (_num("generators", i, e, "cost"),)
        p_max = _num("generators", i, e, "p_max")
        gens.append(
            GeneratorSpec(
                bus=bus_of("generators", i, e),
                p_min=_num("generators", i, e, "p_min", 0.0),
                p_max=p_max,
                ramp_up=_num("generators", i, e, "ramp_up", p_max),
                ramp_down=_num("generators", i, e, "ramp_down", p_max),
                cost=cost,
            )
        )
    lines = [
        LineSpec(
            from_bus=bus_of("lines", i, e, "from_bus"),
            to_bus=bus_of("lines", i, e, "to_bus"),
            reactance=_num("lines", i, e, "reactance"),
            flow_limit=_num("lines", i, e, "flow_limit"),
        )
        for i, e in enumerate(entries("lines"))
    ]
    loads = [
        LoadSpec(bus=bus_of("loads", i, e), p_nominal=_num("loads", i, e, "p_nominal", 0.0))
        for i, e in enumerate(entries("loads"))
    ]
    ess = [
        EssSpec(
            bus=bus_of("ess", i, e),
            p_ch_max=_num("ess", i, e, "p_ch_max"),
            p_dis_max=_num("ess", i, e, "p_dis_max"),
            eta_ch=_num("ess", i, e, "eta_ch"),
            eta_dis=_num("ess", i, e, "eta_dis"),
            e_min=_num("ess", i, e, "e_min", 0.0),
            e_max=_num("ess", i, e, "e_max"),
            e_init_frac=_num("ess", i, e, "e_init_frac", 0.5),
        )
        for i, e in enumerate(entries("ess"))
    ]
    slack = header["slack_bus"]
    if slack not in pos:
        raise CaseError(f"[case] field 'slack_bus': unknown bus id {slack!r}")
    try:
        return GridCase(
            n_b=len(bus_ids),
            generators=tuple(gens),
            lines=tuple(lines),
            loads=tuple(loads),
            ess_units=tuple(ess),
            slack_bus=pos[slack],
            name=str(header.get("name", Path(source).stem)),
            base_mva=float(header.get("base_mva", 100.0)),
            bus_ids=bus_ids,
        )
    except CaseError as exc:
        raise CaseError(f"{source}: {exc}") from None


BUNDLED_CASES = ("case39", "toy3", "triangle3")


def load_case(path) -> GridCase:
    """Load a case from a file path or the name of a bundled case."""
    p = Path(path)
    if not p.exists() and str(path) in BUNDLED_CASES:
        text = resources.files("mpopf.data").joinpath(f"{path}.toml").read_text()
        return parse_case(text, source=f"{path}.toml")
    if not p.is_file():
        raise FileNotFoundError(f"case file not found: {path}")
    return parse_case(p.read_text(), source=str(p))


@dataclass(frozen=True)
class IncidenceMaps:
    m_g: np.ndarray
    m_d: np.ndarray
    m_e: np.ndarray


def _placement(n_b: int, buses) -> np.ndarray:
    m = np.zeros((n_b, len(buses)))
    m[list(buses), np.arange(len(buses))] = 1.0
    return m


def build_incidence(case: GridCase) -> IncidenceMaps:
    return IncidenceMaps(
        m_g=_placement(case.n_b, [g.bus for g in case.generators]),
        m_d=_placement(case.n_b, [d.bus for d in case.loads]),
        m_e=_placement(case.n_b, [e.bus for e in case.ess_units]),
    )


def branch_incidence(case: GridCase) -> np.ndarray:
    """Line-by-bus incidence, +1 at from_bus and -1 at to_bus."""
    a = np.zeros((case.n_l, case.n_b))
    for i, ln in enumerate(case.lines):
        a[i, ln.from_bus] = 1.0
        a[i, ln.to_bus] = -1.0
    return a


@dataclass(frozen=True)
class GsfMatrix:
    phi: np.ndarray


def _is_connected(case: GridCase) -> bool:
    adj = {b: set() for b in range(case.n_b)}
    for ln in case.lines:
        adj[ln.from_bus].add(ln.to_bus)
        adj[ln.to_bus].add(ln.from_bus)
    seen, stack = {case.slack_bus}, [case.slack_bus]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return len(seen) == case.n_b


def compute_gsf(case: GridCase) -> GsfMatrix:
    """Generation shift factors: line flow per unit injection at each bus.

    The injection is withdrawn at the slack bus, whose column is zero.  Flows
    are positive in the from -> to direction.
    """
    if not _is_connected(case):
        raise CaseError("network is not connected")
    a_inc = branch_incidence(case)
    b_line = 1.0 / np.array([ln.reactance for ln in case.lines])
    b_bus = a_inc.T @ (b_line[:, None] * a_inc)
    keep = np.array([b for b in range(case.n_b) if b != case.slack_bus], dtype=int)
    phi = np.zeros((case.n_l, case.n_b))
    if keep.size:
        b_red = b_bus[np.ix_(keep, keep)]
        if np.linalg.matrix_rank(b_red) < keep.size:
            raise CaseError("reduced susceptance matrix is singular")
        phi[:, keep] = (b_line[:, None] * a_inc[:, keep]) @ np.linalg.inv(b_red)
    return GsfMatrix(phi=phi)
