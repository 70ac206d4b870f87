"""Four-case stage reward: observation, charging, failure, completion."""

from __future__ import annotations

from dataclasses import dataclass

from .env import Case, EnvState, JointAction, next_target, utility_nu, utility_sum
from .scenario import DeploymentSpec, travel_time

EPS = 1e-6


@dataclass(frozen=True)
class RewardParams:
    xi1_scale: float = 3.0
    xi2: float = 0.2
    xi3: float = -20.0
    xi4: float = 40.0

    def __post_init__(self):
        if not 0 < self.xi2 < 1:
            raise ValueError(f"xi2 must lie in (0, 1), got {self.xi2}")
        if self.xi3 >= 0:
            raise ValueError(f"xi3 must be negative, got {self.xi3}")
        if self.xi4 <= 0:
            raise ValueError(f"xi4 must be positive, got {self.xi4}")
        if self.xi1_scale < 0:
            raise ValueError(f"xi1_scale must be nonnegative, got {self.xi1_scale}")


@dataclass(frozen=True)
class RewardContext:
    before: EnvState
    after: EnvState
    action: JointAction
    spec: DeploymentSpec
    case: Case


def _drone_time(ctx: RewardContext, a, b) -> float:
    return travel_time(a, b, ctx.spec.params.drone_speed)


def xi1(ctx: RewardContext, params: RewardParams = RewardParams()) -> float:
    """Lookahead exploration bonus for an observe stage."""
    s, spec = ctx.before, ctx.spec
    x = s.drone.position
    p = next_target(s, spec)
    c_k = spec.charge_points[ctx.action.a_tilde].position
    dt1 = max(1.0, _drone_time(ctx, x, p) + _drone_time(ctx, p, c_k))
    de1 = s.drone.gamma_f * dt1
    tau_max = spec.pois[s.next_poi].tau_max if s.next_poi < spec.n else 0.0
    de1_full = de1 + s.drone.gamma_o * tau_max
    if de1_full <= s.drone.energy and de1 <= s.drone.capacity / 2:
        return params.xi1_scale / dt1
    return 0.0


def reward_observe(ctx: RewardContext, params: RewardParams = RewardParams()) -> float:
    s, after, spec = ctx.before, ctx.after, ctx.spec
    i = s.next_poi
    t_after = after.drone_clock
    if t_after <= 0:
        return 0.0
    efficiency = (i + 1) * utility_sum(after, spec) / t_after
    if efficiency == 0.0:
        return 0.0
    flight = max(_drone_time(ctx, s.drone.position, spec.pois[i].position), EPS)
    tau = after.assigned_tau[i]
    return efficiency * (tau / flight + xi1(ctx, params))


def reward_charge(ctx: RewardContext, params: RewardParams = RewardParams()) -> float:
    s, after, spec = ctx.before, ctx.after, ctx.spec
    i = s.next_poi
    c_k = ctx.action.a_tilde
    site = spec.charge_points[c_k].position
    x = s.drone.position
    t_x_ck = _drone_time(ctx, x, site)
    de2 = s.drone.gamma_f * t_x_ck
    if de2 >= params.xi2 * s.drone.energy:
        return 0.0
    if i == 0 or after.drone_clock <= 0:
        return 0.0
    efficiency = i * utility_sum(after, spec) / after.drone_clock
    e_k = max(s.drone.energy - de2, EPS)
    t_charger = travel_time(s.charger.position, site, spec.params.charger_speed)
    dt2 = max(1.0, max(t_x_ck, t_charger)) + _drone_time(ctx, site, next_target(s, spec))
    tau_eff = after.charge_records[c_k]
    return efficiency * (s.drone.capacity / e_k) * (tau_eff / dt2)


def reward_fail(ctx: RewardContext, params: RewardParams = RewardParams()) -> float:
    spec, after = ctx.spec, ctx.after
    achieved = sum(
        utility_nu(tau, q.tau_min, q.tau_max)
        for q, tau in zip(spec.pois[: after.next_poi], after.assigned_tau)
    )
    return params.xi3 * (spec.n - achieved)


def reward_complete(ctx: RewardContext, params: RewardParams = RewardParams()) -> float:
    # drone clock at depot arrival == t(E_n) + return flight when flying straight back
    after = ctx.after
    if after.drone_clock <= 0:
        return 0.0
    return params.xi4 * utility_sum(after, ctx.spec) / after.drone_clock


def dispatch(ctx: RewardContext, params: RewardParams = RewardParams()) -> float:
    if ctx.case == "fail":
        return reward_fail(ctx, params)
    if ctx.case == "end":
        return reward_complete(ctx, params)
    if ctx.case == "obs":
        return reward_observe(ctx, params)
    if ctx.case == "chg":
        return reward_charge(ctx, params)
    raise ValueError(f"unknown stage case {ctx.case!r}")
