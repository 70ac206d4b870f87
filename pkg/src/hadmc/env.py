"""Episodic drone + mobile-charger environment.

State transitions are pure functions over immutable ``EnvState`` values.
``DroneChargerEnv`` wraps them with the reward engine and a stage trace.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .scenario import DeploymentSpec, Point2D, atomic_write_text, travel_time

Status = Literal["running", "failed", "completed"]
Case = Literal["obs", "chg", "fail", "end"]

REACH_TOL = 1e-9


class ContractViolation(RuntimeError):
    """An operation was called outside its precondition."""


@dataclass(frozen=True)
class DroneState:
    position: Point2D
    speed: float
    gamma_f: float
    gamma_o: float
    energy: float
    capacity: float


@dataclass(frozen=True)
class ChargerState:
    position: Point2D
    speed: float
    gamma_c: float
    clock: float = 0.0
    site: int = 0  # charging-point index the charger is at or heading to


@dataclass(frozen=True)
class TimeLedger:
    flight: float = 0.0
    observing: float = 0.0
    charging: float = 0.0
    wait: float = 0.0  # drone-side waiting; sums with the rest to drone_clock
    charger_wait: float = 0.0  # charger idling for the drone, not on the drone's clock

    @property
    def total(self) -> float:
        return self.flight + self.observing + self.charging + self.wait


@dataclass(frozen=True)
class EnvState:
    drone: DroneState
    charger: ChargerState
    assigned_tau: tuple[float, ...]
    charge_records: tuple[float, ...]
    next_poi: int = 0
    drone_clock: float = 0.0
    ledger: TimeLedger = TimeLedger()
    stage: int = 0
    status: Status = "running"


@dataclass(frozen=True)
class JointAction:
    """Decoded hybrid action; ``a_dis = m * a + a_tilde``."""

    a: int
    tau: float
    a_tilde: int
    tau_tilde: float
    a_dis: int = -1
    a_con: float = 0.0


@dataclass(frozen=True)
class TraceEntry:
    stage: int
    case: Case
    from_pos: Point2D
    to_pos: Point2D
    flight_t: float
    observe_t: float
    charge_t: float
    wait_t: float
    energy_after: float
    reward: float = 0.0


@dataclass(frozen=True)
class StageOutcome:
    case: Case
    reward: float
    elapsed: float
    energy_delta: float
    entry: TraceEntry


# ------------------------------------------------------------ basic quantities

def reset(spec: DeploymentSpec) -> EnvState:
    p = spec.params
    depot = spec.depot
    return EnvState(
        drone=DroneState(depot, p.drone_speed, p.gamma_f, p.gamma_o, p.energy_capacity, p.energy_capacity),
        charger=ChargerState(depot, p.charger_speed, p.gamma_c, 0.0, 0),
        assigned_tau=(0.0,) * spec.n,
        charge_records=(0.0,) * spec.m,
    )


def _fly(s: EnvState, target: Point2D) -> float:
    return travel_time(s.drone.position, target, s.drone.speed)


def reachable_chargers(s: EnvState, spec: DeploymentSpec) -> list[int]:
    """Charging points the drone can reach on its remaining energy (C_k)."""
    if s.status != "running":
        raise ContractViolation("reachable_chargers on a terminal state")
    return [
        j
        for j, c in enumerate(spec.charge_points)
        if s.drone.gamma_f * _fly(s, c.position) <= s.drone.energy + REACH_TOL
    ]


def next_target(s: EnvState, spec: DeploymentSpec) -> Point2D:
    """Next PoI, or the depot once every PoI has been observed."""
    return spec.pois[s.next_poi].position if s.next_poi < spec.n else spec.depot


def utility_nu(tau: float, tau_min: float, tau_max: float) -> float:
    if tau < tau_min:
        return 0.0
    return min(tau / tau_max, 1.0)


def importance_zeta(i: int, spec: DeploymentSpec) -> float:
    return spec.pois[i].tau_max / sum(q.tau_max for q in spec.pois)


def utility_sum(s: EnvState, spec: DeploymentSpec) -> float:
    total_max = sum(q.tau_max for q in spec.pois)
    u = 0.0
    for q, tau in zip(spec.pois, s.assigned_tau):
        if tau > 0:
            u += q.tau_max / total_max * utility_nu(tau, q.tau_min, q.tau_max)
    return u


def makespan(s: EnvState) -> float:
    return s.drone_clock


def objective(s: EnvState, spec: DeploymentSpec) -> float:
    if s.status != "completed":
        raise ContractViolation(f"objective is defined only for completed episodes (status {s.status})")
    return utility_sum(s, spec) / s.drone_clock


def state_dim(n: int, m: int) -> int:
    return 10 + 5 * n + 3 * m + 1


def encode_state(s: EnvState, spec: DeploymentSpec) -> np.ndarray:
    d, c = s.drone, s.charger
    feats = [
        d.position.x / 1000, d.position.y / 1000, d.speed / 25, d.gamma_f, d.gamma_o,
        d.energy / d.capacity,
        c.position.x / 1000, c.position.y / 1000, c.speed / 10, c.gamma_c,
    ]
    for q, tau in zip(spec.pois, s.assigned_tau):
        feats += [q.position.x / 1000, q.position.y / 1000, q.tau_min / 10, q.tau_max / 10, tau / 10]
    for cp, rec in zip(spec.charge_points, s.charge_records):
        feats += [cp.position.x / 1000, cp.position.y / 1000, rec / 10]
    feats.append(s.next_poi / spec.n)
    return np.asarray(feats, dtype=np.float64)


# ----------------------------------------------------------------- transitions

def _require_running(s: EnvState) -> None:
    if s.status != "running":
        raise ContractViolation(f"transition on a terminal state (status {s.status})")


def _move_charger(s: EnvState, spec: DeploymentSpec, dest: int, stage_start: float) -> ChargerState:
    if not 0 <= dest < spec.m:
        raise ContractViolation(f"charger destination {dest} out of range 0..{spec.m - 1}")
    c = s.charger
    target = spec.charge_points[dest].position
    clock = max(c.clock, stage_start) + travel_time(c.position, target, c.speed)
    return replace(c, position=target, clock=clock, site=dest)


def _lerp(a: Point2D, b: Point2D, frac: float) -> Point2D:
    return Point2D(a.x + (b.x - a.x) * frac, a.y + (b.y - a.y) * frac)


def apply_observe(
    s: EnvState, spec: DeploymentSpec, tau: float, charger_dest: int
) -> tuple[EnvState, StageOutcome]:
    """Drone flies to the next PoI and observes for ``tau``; charger heads to ``charger_dest``.

    Once every PoI is observed the same action means "return to the depot"
    (``tau`` is ignored). Running out of energy on the way or while
    observing ends the episode as failed at the moment of depletion.
    """
    _require_running(s)
    i = s.next_poi
    returning = i >= spec.n
    if returning:
        tau = 0.0
    else:
        q = spec.pois[i]
        if not (q.tau_min - 1e-9 <= tau <= q.tau_max + 1e-9):
            raise ContractViolation(f"tau={tau} outside [{q.tau_min}, {q.tau_max}] for PoI {i + 1}")
        tau = min(max(tau, q.tau_min), q.tau_max)
    d = s.drone
    start = s.drone_clock
    charger = _move_charger(s, spec, charger_dest, start)
    target = next_target(s, spec)
    flight = _fly(s, target)
    need_fly = d.gamma_f * flight
    ledger = s.ledger

    if need_fly > d.energy + REACH_TOL:
        t_dep = d.energy / d.gamma_f
        pos = _lerp(d.position, target, t_dep / flight)
        ledger = replace(ledger, flight=ledger.flight + t_dep)
        new = replace(
            s, drone=replace(d, position=pos, energy=0.0), charger=charger, drone_clock=start + t_dep,
            ledger=ledger, stage=s.stage + 1, status="failed",
        )
        entry = TraceEntry(new.stage, "fail", d.position, pos, t_dep, 0.0, 0.0, 0.0, 0.0)
        return new, StageOutcome("fail", 0.0, t_dep, -d.energy, entry)

    energy = max(d.energy - need_fly, 0.0)
    if returning:
        ledger = replace(ledger, flight=ledger.flight + flight)
        new = replace(
            s, drone=replace(d, position=target, energy=energy), charger=charger,
            drone_clock=start + flight, ledger=ledger, stage=s.stage + 1, status="completed",
        )
        entry = TraceEntry(new.stage, "end", d.position, target, flight, 0.0, 0.0, 0.0, energy)
        return new, StageOutcome("end", 0.0, flight, energy - d.energy, entry)

    need_obs = d.gamma_o * tau
    if need_obs > energy + REACH_TOL:
        t_dep = energy / d.gamma_o
        ledger = replace(ledger, flight=ledger.flight + flight, observing=ledger.observing + t_dep)
        new = replace(
            s, drone=replace(d, position=target, energy=0.0), charger=charger,
            drone_clock=start + flight + t_dep, ledger=ledger, stage=s.stage + 1, status="failed",
        )
        entry = TraceEntry(new.stage, "fail", d.position, target, flight, t_dep, 0.0, 0.0, 0.0)
        return new, StageOutcome("fail", 0.0, flight + t_dep, -d.energy, entry)

    energy = max(energy - need_obs, 0.0)
    taus = list(s.assigned_tau)
    taus[i] = tau
    ledger = replace(ledger, flight=ledger.flight + flight, observing=ledger.observing + tau)
    new = replace(
        s, drone=replace(d, position=target, energy=energy), charger=charger,
        assigned_tau=tuple(taus), next_poi=i + 1, drone_clock=start + flight + tau,
        ledger=ledger, stage=s.stage + 1,
    )
    entry = TraceEntry(new.stage, "obs", d.position, target, flight, tau, 0.0, 0.0, energy)
    return new, StageOutcome("obs", 0.0, flight + tau, energy - d.energy, entry)


def apply_charge(
    s: EnvState, spec: DeploymentSpec, c_k: int, tau_tilde: float
) -> tuple[EnvState, StageOutcome]:
    """Drone and charger rendezvous at ``c_k``; the drone charges for up to ``tau_tilde``.

    The charging time is clamped so energy never exceeds capacity. The earlier
    arriver waits; waiting on the ground costs no energy.
    """
    _require_running(s)
    if tau_tilde < 0 or not math.isfinite(tau_tilde):
        raise ContractViolation(f"charging duration must be >= 0, got {tau_tilde}")
    if c_k not in reachable_chargers(s, spec):
        raise ContractViolation(f"charging point {c_k} is not reachable")
    d = s.drone
    start = s.drone_clock
    target = spec.charge_points[c_k].position
    flight = _fly(s, target)
    e_k = max(d.energy - d.gamma_f * flight, 0.0)
    drone_arrival = start + flight
    charger = _move_charger(s, spec, c_k, start)
    meeting = max(drone_arrival, charger.clock)
    drone_wait = meeting - drone_arrival
    charger_wait = meeting - charger.clock
    tau_eff = min(tau_tilde, (d.capacity - e_k) / charger.gamma_c)
    tau_eff = max(tau_eff, 0.0)
    energy = min(e_k + charger.gamma_c * tau_eff, d.capacity)
    end = meeting + tau_eff
    records = list(s.charge_records)
    records[c_k] = tau_eff
    ledger = s.ledger
    ledger = replace(
        ledger, flight=ledger.flight + flight, charging=ledger.charging + tau_eff,
        wait=ledger.wait + drone_wait, charger_wait=ledger.charger_wait + charger_wait,
    )
    new = replace(
        s, drone=replace(d, position=target, energy=energy), charger=replace(charger, clock=end),
        charge_records=tuple(records), drone_clock=end, ledger=ledger, stage=s.stage + 1,
    )
    entry = TraceEntry(new.stage, "chg", d.position, target, flight, 0.0, tau_eff, drone_wait, energy)
    return new, StageOutcome("chg", 0.0, end - start, energy - d.energy, entry)


def apply_action(s: EnvState, spec: DeploymentSpec, action: JointAction) -> tuple[EnvState, StageOutcome]:
    if action.a == 1:
        return apply_observe(s, spec, action.tau, action.a_tilde)
    if action.a == 0:
        return apply_charge(s, spec, action.a_tilde, action.tau_tilde)
    raise ContractViolation(f"drone action must be 0 or 1, got {action.a}")


# ---------------------------------------------------------------- env wrapper

class DroneChargerEnv:
    """Stateful wrapper: reset/step with reward dispatch and a stage trace."""

    def __init__(self, spec: DeploymentSpec, reward_params=None, max_stages: int | None = None):
        from .rewards import RewardParams

        self.spec = spec
        self.reward_params = reward_params or RewardParams()
        # guards against endless charge loops; exceeding it counts as failure
        self.max_stages = max_stages or 4 * (spec.n + 1) + 20
        self.state = reset(spec)
        self.trace: list[TraceEntry] = []

    def reset(self, spec: DeploymentSpec | None = None) -> np.ndarray:
        if spec is not None:
            self.spec = spec
            self.max_stages = 4 * (spec.n + 1) + 20
        self.state = reset(self.spec)
        self.trace = []
        return encode_state(self.state, self.spec)

    def observation(self) -> np.ndarray:
        return encode_state(self.state, self.spec)

    @property
    def done(self) -> bool:
        return self.state.status != "running"

    def step(self, action: JointAction) -> tuple[np.ndarray, float, bool, StageOutcome]:
        from .rewards import RewardContext, dispatch

        before = self.state
        after, outcome = apply_action(before, self.spec, action)
        if after.status == "running" and after.stage >= self.max_stages:
            after = replace(after, status="failed")
            outcome = replace(outcome, case="fail", entry=replace(outcome.entry, case="fail"))
        ctx = RewardContext(before, after, action, self.spec, outcome.case)
        r = dispatch(ctx, self.reward_params)
        entry = replace(outcome.entry, reward=r)
        outcome = replace(outcome, reward=r, entry=entry)
        self.state = after
        self.trace.append(entry)
        return encode_state(after, self.spec), r, self.done, outcome


TRACE_COLUMNS = [
    "stage", "case", "from_x", "from_y", "to_x", "to_y",
    "flight_t", "observe_t", "charge_t", "wait_t", "energy_after", "reward",
]


def trace_to_csv(trace: list[TraceEntry]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for e in trace:
        w.writerow([
            e.stage, e.case, repr(e.from_pos.x), repr(e.from_pos.y), repr(e.to_pos.x), repr(e.to_pos.y),
            repr(e.flight_t), repr(e.observe_t), repr(e.charge_t), repr(e.wait_t),
            repr(e.energy_after), repr(e.reward),
        ])
    return buf.getvalue()


def export_trace(trace: list[TraceEntry], path) -> None:
    atomic_write_text(path, trace_to_csv(trace))
