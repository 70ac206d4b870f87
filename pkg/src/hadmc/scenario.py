"""Deployment scenarios: PoIs, charging points, system parameters.

A deployment is a value object. Generation is seeded and deterministic, and
the JSON file format round-trips exactly.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

SCHEMA_VERSION = 1
SIDE = 1000.0
D_MIN = 100.0
R_NEAR = 50.0
MAX_ATTEMPTS = 100_000
SCENARIO_TAGS = ("SA1", "SA2", "SA3", "SA4", "SR1", "SR2", "SR3", "SR4", "custom")


class DeploymentError(ValueError):
    """Raised when a deployment cannot be generated or fails validation."""


class SchemaError(DeploymentError):
    """Raised when a deployment file does not match the schema."""

    def __init__(self, message: str, field_path: str = "", line: int | None = None):
        self.field_path = field_path
        self.line = line
        where = f" (field {field_path})" if field_path else ""
        if line is not None:
            where += f" (line {line})"
        super().__init__(message + where)


@dataclass(frozen=True)
class Point2D:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DeploymentError(f"non-finite coordinate ({self.x}, {self.y})")

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class PoISpec:
    position: Point2D
    tau_min: float = 4.0
    tau_max: float = 8.0

    def __post_init__(self):
        if not 0 < self.tau_min <= self.tau_max:
            raise DeploymentError(
                f"need 0 < tau_min <= tau_max, got [{self.tau_min}, {self.tau_max}]"
            )


@dataclass(frozen=True)
class ChargePointSpec:
    position: Point2D
    is_depot: bool = False


@dataclass(frozen=True)
class SystemParams:
    drone_speed: float = 25.0
    charger_speed: float = 10.0
    energy_capacity: float = 60.0
    gamma_f: float = 1.0
    gamma_o: float = 1.0
    gamma_c: float = 6.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise DeploymentError(f"{f.name} must be a positive number, got {v!r}")
        if self.gamma_c <= self.gamma_f:
            raise DeploymentError("gamma_c must exceed gamma_f")


@dataclass(frozen=True)
class DeploymentSpec:
    pois: tuple[PoISpec, ...]
    charge_points: tuple[ChargePointSpec, ...]
    params: SystemParams = field(default_factory=SystemParams)
    scenario_tag: str = "custom"
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pois", tuple(self.pois))
        object.__setattr__(self, "charge_points", tuple(self.charge_points))
        if len(self.pois) < 1:
            raise DeploymentError("a deployment needs at least one PoI")
        if len(self.charge_points) < 1:
            raise DeploymentError("a deployment needs at least one charging point")
        if not self.charge_points[0].is_depot:
            raise DeploymentError("charging point 0 must be the depot")
        if any(c.is_depot for c in self.charge_points[1:]):
            raise DeploymentError("exactly one charging point may be the depot")
        if self.scenario_tag not in SCENARIO_TAGS:
            raise DeploymentError(f"unknown scenario tag {self.scenario_tag!r}")

    @property
    def n(self) -> int:
        return len(self.pois)

    @property
    def m(self) -> int:
        return len(self.charge_points)

    @property
    def depot(self) -> Point2D:
        return self.charge_points[0].position


def scenario_preset(tag: str) -> tuple[str, int, int]:
    """Map SAk/SRk to (type, n, m) with (n, m) = (10k, 4k)."""
    if len(tag) != 3 or tag[:2] not in ("SA", "SR") or tag[2] not in "1234":
        raise DeploymentError(f"no preset for scenario tag {tag!r}")
    k = int(tag[2])
    return tag[1], 10 * k, 4 * k


def travel_time(a: Point2D, b: Point2D, speed: float) -> float:
    if speed <= 0:
        raise DeploymentError(f"speed must be positive, got {speed}")
    return math.hypot(a.x - b.x, a.y - b.y) / speed


def clockwise_order(pois: Sequence[PoISpec], depot: Point2D) -> list[PoISpec]:
    """Order PoIs clockwise around their centroid, starting nearest the depot.

    Angles are measured about the PoI centroid. The first PoI is the one whose
    angle is circularly closest to the depot's angle; ties go to the lower
    index, as do equal angles later in the sweep.
    """
    if not pois:
        raise DeploymentError("clockwise_order needs at least one PoI")
    cx = sum(p.position.x for p in pois) / len(pois)
    cy = sum(p.position.y for p in pois) / len(pois)
    angles = [math.atan2(p.position.y - cy, p.position.x - cx) for p in pois]
    depot_angle = math.atan2(depot.y - cy, depot.x - cx)
    two_pi = 2 * math.pi

    def circ(a: float, b: float) -> float:
        d = (a - b) % two_pi
        return min(d, two_pi - d)

    start = min(range(len(pois)), key=lambda k: (circ(angles[k], depot_angle), k))
    # decreasing angle == clockwise
    keys = [(k != start, (angles[start] - angles[k]) % two_pi, k) for k in range(len(pois))]
    return [pois[k] for *_, k in sorted(keys)]


def _uniform_point(rng: np.random.Generator, side: float) -> Point2D:
    x, y = rng.uniform(0.0, side, size=2)
    return Point2D(float(x), float(y))


def generate_deployment(
    kind: str,
    n: int,
    m: int,
    params: SystemParams | None = None,
    seed: int = 0,
    *,
    scenario_tag: str = "custom",
    side: float = SIDE,
    d_min: float = D_MIN,
    r_near: float = R_NEAR,
    tau_min: float = 4.0,
    tau_max_choices: Sequence[float] = (6.0, 7.0, 8.0),
) -> DeploymentSpec:
    """Sample a Type-A ("A") or Type-R ("R") deployment.

    PoIs are rejection-sampled with pairwise separation ``d_min``. Type-A puts
    each non-depot charging point within ``r_near`` of a random PoI; Type-R
    places them uniformly. The depot is uniform in the square.
    """
    if kind not in ("A", "R"):
        raise DeploymentError(f"deployment type must be 'A' or 'R', got {kind!r}")
    if n < 1 or m < 1:
        raise DeploymentError(f"need n >= 1 and m >= 1, got n={n}, m={m}")
    params = params or SystemParams()
    rng = np.random.default_rng(seed)

    positions: list[Point2D] = []
    attempts = 0
    while len(positions) < n:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise DeploymentError(
                f"could not place {n} PoIs {d_min} apart after {MAX_ATTEMPTS} attempts"
            )
        cand = _uniform_point(rng, side)
        if all(math.hypot(cand.x - p.x, cand.y - p.y) >= d_min for p in positions):
            positions.append(cand)
    tau_maxes = rng.choice(np.asarray(tau_max_choices, dtype=float), size=n)
    pois = [
        PoISpec(pos, float(tau_min), float(tm)) for pos, tm in zip(positions, tau_maxes)
    ]

    depot = _uniform_point(rng, side)
    chargers = [ChargePointSpec(depot, is_depot=True)]
    for _ in range(m - 1):
        if kind == "A":
            anchor = positions[int(rng.integers(n))]
            radius = r_near * math.sqrt(rng.uniform())
            theta = rng.uniform(0.0, 2 * math.pi)
            # projecting onto the square never moves the point away from the anchor
            x = min(max(anchor.x + radius * math.cos(theta), 0.0), side)
            y = min(max(anchor.y + radius * math.sin(theta), 0.0), side)
            chargers.append(ChargePointSpec(Point2D(x, y)))
        else:
            chargers.append(ChargePointSpec(_uniform_point(rng, side)))

    return DeploymentSpec(
        pois=tuple(clockwise_order(pois, depot)),
        charge_points=tuple(chargers),
        params=params,
        scenario_tag=scenario_tag,
        rng_seed=int(seed),
    )


def generate_scenario(tag: str, seed: int, params: SystemParams | None = None) -> DeploymentSpec:
    kind, n, m = scenario_preset(tag)
    return generate_deployment(kind, n, m, params, seed, scenario_tag=tag)


# ---------------------------------------------------------------- persistence

def deployment_to_dict(spec: DeploymentSpec) -> dict:
    p = spec.params
    return {
        "schema_version": SCHEMA_VERSION,
        "scenario_tag": spec.scenario_tag,
        "seed": spec.rng_seed,
        "params": {
            "drone_speed": p.drone_speed,
            "charger_speed": p.charger_speed,
            "energy_capacity": p.energy_capacity,
            "gamma_f": p.gamma_f,
            "gamma_o": p.gamma_o,
            "gamma_c": p.gamma_c,
        },
        "pois": [
            {"x": q.position.x, "y": q.position.y, "tau_min": q.tau_min, "tau_max": q.tau_max}
            for q in spec.pois
        ],
        "charge_points": [
            {"x": c.position.x, "y": c.position.y, "is_depot": c.is_depot}
            for c in spec.charge_points
        ],
    }


_TOP_KEYS = {"schema_version", "scenario_tag", "seed", "params", "pois", "charge_points"}
_PARAM_KEYS = {f.name for f in fields(SystemParams)}
_POI_KEYS = {"x", "y", "tau_min", "tau_max"}
_CP_KEYS = {"x", "y", "is_depot"}


def _check_keys(obj, allowed: set[str], path: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaError("expected an object", path or "<root>")
    for key in obj:
        if key not in allowed:
            raise SchemaError(f"unknown field {key!r}", f"{path}.{key}" if path else key)
    for key in sorted(allowed):
        if key not in obj:
            raise SchemaError(f"missing field {key!r}", f"{path}.{key}" if path else key)


def _number(obj: dict, key: str, path: str) -> float:
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"expected a number, got {v!r}", f"{path}.{key}")
    return float(v)


def deployment_from_dict(doc: dict) -> DeploymentSpec:
    _check_keys(doc, _TOP_KEYS, "")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise SchemaError(
            f"schema version {doc['schema_version']!r} is not supported (expected {SCHEMA_VERSION})",
            "schema_version",
        )
    _check_keys(doc["params"], _PARAM_KEYS, "params")
    pois_doc, cps_doc = doc["pois"], doc["charge_points"]
    if not isinstance(pois_doc, list) or not pois_doc:
        raise SchemaError("need at least one PoI", "pois")
    if not isinstance(cps_doc, list) or not cps_doc:
        raise SchemaError("need at least one charging point (m >= 1)", "charge_points")
    if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
        raise SchemaError("expected an integer", "seed")
    try:
        params = SystemParams(**{k: _number(doc["params"], k, "params") for k in _PARAM_KEYS})
        pois = []
        for k, q in enumerate(pois_doc):
            path = f"pois[{k}]"
            _check_keys(q, _POI_KEYS, path)
            pois.append(
                PoISpec(
                    Point2D(_number(q, "x", path), _number(q, "y", path)),
                    _number(q, "tau_min", path),
                    _number(q, "tau_max", path),
                )
            )
        cps = []
        for k, c in enumerate(cps_doc):
            path = f"charge_points[{k}]"
            _check_keys(c, _CP_KEYS, path)
            if not isinstance(c["is_depot"], bool):
                raise SchemaError("expected a boolean", f"{path}.is_depot")
            cps.append(ChargePointSpec(Point2D(_number(c, "x", path), _number(c, "y", path)), c["is_depot"]))
        return DeploymentSpec(tuple(pois), tuple(cps), params, doc["scenario_tag"], doc["seed"])
    except SchemaError:
        raise
    except DeploymentError as exc:
        raise SchemaError(str(exc)) from exc


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_deployment(spec: DeploymentSpec, path: str | os.PathLike) -> None:
    atomic_write_text(path, json.dumps(deployment_to_dict(spec), indent=2) + "\n")


def load_deployment(path: str | os.PathLike) -> DeploymentSpec:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    return deployment_from_dict(doc)
