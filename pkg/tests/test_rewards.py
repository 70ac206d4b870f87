import math
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_spec
from hadmc.env import JointAction, apply_action, apply_charge, apply_observe, reset
from hadmc.rewards import (
    RewardContext,
    RewardParams,
    dispatch,
    reward_charge,
    reward_complete,
    reward_fail,
    reward_observe,
    xi1,
)
from hadmc.scenario import Point2D, generate_deployment

OBS = lambda tau, dest: JointAction(a=1, tau=tau, a_tilde=dest, tau_tilde=0.0)  # noqa: E731
CHG = lambda c, t: JointAction(a=0, tau=0.0, a_tilde=c, tau_tilde=t)  # noqa: E731


def ctx_for(spec, before, action):
    after, out = apply_action(before, spec, action)
    return RewardContext(before, after, action, spec, out.case)


def test_xi1_example(two_poi_spec):
    ctx = ctx_for(two_poi_spec, reset(two_poi_spec), OBS(6.0, 1))
    assert xi1(ctx) == pytest.approx(0.375, abs=1e-12)


def test_xi1_energy_condition():
    # dt1 = 31 > capacity / 2
    spec = make_spec([(400, 0, 4, 6)], [(0, 0), (400, 375)])
    ctx = ctx_for(spec, reset(spec), OBS(6.0, 1))
    assert xi1(ctx) == 0.0


def test_xi1_short_hop_clamped():
    spec = make_spec([(5, 0, 4, 6)], [(0, 0), (10, 0)])
    ctx = ctx_for(spec, reset(spec), OBS(6.0, 1))
    assert xi1(ctx) == 3.0


def test_reward_observe_micro_case(two_poi_spec):
    ctx = ctx_for(two_poi_spec, reset(two_poi_spec), OBS(6.0, 1))
    assert ctx.case == "obs"
    assert abs(reward_observe(ctx) - 0.09375) <= 1e-9
    assert abs(dispatch(ctx) - 0.09375) <= 1e-9


def test_reward_observe_zero_utility(two_poi_spec):
    before = reset(two_poi_spec)
    after, _ = apply_observe(before, two_poi_spec, 6.0, 1)
    after = replace(after, assigned_tau=(3.0, 0.0))  # below tau_min
    ctx = RewardContext(before, after, OBS(6.0, 1), two_poi_spec, "obs")
    assert reward_observe(ctx) == 0.0


def test_reward_observe_monotone_in_tau():
    spec = make_spec([(100, 0, 4, 8), (300, 0, 4, 8)], [(0, 0), (100, 100)])
    vals = [reward_observe(ctx_for(spec, reset(spec), OBS(t, 1))) for t in (4.0, 5.0, 6.0, 7.0, 8.0)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_xi1_scale_zero_never_raises_reward(two_poi_spec):
    ctx = ctx_for(two_poi_spec, reset(two_poi_spec), OBS(6.0, 1))
    assert reward_observe(ctx, RewardParams(xi1_scale=0.0)) <= reward_observe(ctx)


def charge_ctx(spec, energy, c_k=1, tau=2.3334):
    s, _ = apply_observe(reset(spec), spec, 6.0, 1)
    s = replace(s, drone=replace(s.drone, energy=energy), charger=replace(s.charger, clock=0.0))
    return ctx_for(spec, s, CHG(c_k, tau))


def test_reward_charge_formula_branch(two_poi_spec):
    ctx = charge_ctx(two_poi_spec, 50.0)
    # hand arithmetic: dE2 = 4 < 0.2 * 50; e_k = 46; tau_eff = 14/6; clock 10 + 4 + 14/6
    t_after = 10 + 4 + 14 / 6
    dt2 = 4 + math.hypot(200, 100) / 25
    expected = 1 * 0.5 / t_after * (60 / 46) * (14 / 6) / dt2
    assert ctx.case == "chg"
    assert abs(reward_charge(ctx) - expected) <= 1e-9
    assert reward_charge(ctx) > 0


def test_reward_charge_threshold_branch(two_poi_spec):
    ctx = charge_ctx(two_poi_spec, 10.0)
    assert reward_charge(ctx) == 0.0


def test_reward_charge_before_any_observation(two_poi_spec):
    ctx = ctx_for(two_poi_spec, reset(two_poi_spec), CHG(1, 1.0))
    assert reward_charge(ctx) == 0.0


@settings(max_examples=60)
@given(st.floats(4.0, 60.0))
def test_reward_charge_threshold_property(energy):
    spec = make_spec([(100, 0, 4, 6), (300, 0, 4, 6)], [(0, 0), (100, 100)])
    ctx = charge_ctx(spec, energy)
    if 4.0 >= 0.2 * energy:
        assert reward_charge(ctx) == 0.0
    else:
        assert reward_charge(ctx) > 0.0


def test_reward_fail_micro_case(two_poi_spec):
    s, _ = apply_observe(reset(two_poi_spec), two_poi_spec, 6.0, 0)
    s = replace(s, drone=replace(s.drone, energy=3.0))
    ctx = ctx_for(two_poi_spec, s, OBS(6.0, 0))
    assert ctx.case == "fail"
    assert abs(reward_fail(ctx) - (-20.0)) <= 1e-9
    assert dispatch(ctx) == reward_fail(ctx)


def test_reward_fail_immediate(two_poi_spec):
    s = replace(reset(two_poi_spec), drone=replace(reset(two_poi_spec).drone, energy=1.0))
    ctx = ctx_for(two_poi_spec, s, OBS(6.0, 0))
    assert reward_fail(ctx) == -40.0


def test_reward_fail_on_return_leg_is_zero(two_poi_spec):
    s = replace(reset(two_poi_spec), next_poi=2, assigned_tau=(6.0, 6.0),
                drone=replace(reset(two_poi_spec).drone, position=Point2D(300, 0), energy=1.0))
    ctx = ctx_for(two_poi_spec, s, OBS(0.0, 0))
    assert ctx.case == "fail"
    assert reward_fail(ctx) == 0.0


def end_ctx(dist, clock=100.0):
    spec = make_spec([(dist, 0, 4, 6)], [(0, 0)])
    s = reset(spec)
    s = replace(s, next_poi=1, assigned_tau=(6.0,), drone_clock=clock,
                drone=replace(s.drone, position=Point2D(dist, 0), energy=30.0))
    return ctx_for(spec, s, OBS(0.0, 0))


def test_reward_complete_micro_case():
    ctx = end_ctx(100.0)
    assert ctx.case == "end"
    assert abs(reward_complete(ctx) - 40 / 104) <= 1e-9
    assert abs(dispatch(ctx) - 0.384615384615) <= 1e-9


def test_reward_complete_monotone_in_return_leg():
    assert reward_complete(end_ctx(200.0)) < reward_complete(end_ctx(100.0))


def test_reward_complete_zero_utility():
    ctx = end_ctx(100.0)
    ctx = replace(ctx, after=replace(ctx.after, assigned_tau=(2.0,)))
    assert reward_complete(ctx) == 0.0


def test_params_validation():
    for bad in ({"xi2": 0.0}, {"xi2": 1.0}, {"xi3": 1.0}, {"xi4": 0.0}):
        with pytest.raises(ValueError):
            RewardParams(**bad)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_reward_signs_and_purity(seed):
    import numpy as np

    from hadmc.codec import feasible_discrete, to_joint_action

    rng = np.random.default_rng(seed)
    spec = generate_deployment("AR"[seed % 2], 10, 4, seed=seed % 40)
    s = reset(spec)
    while s.status == "running":
        a = to_joint_action(int(rng.choice(feasible_discrete(s, spec))), rng.uniform(-1, 1), s, spec)
        ctx = ctx_for(spec, s, a)
        r = dispatch(ctx)
        assert r == dispatch(ctx)
        assert (r <= 0) if ctx.case == "fail" else (r >= 0)
        s = ctx.after
