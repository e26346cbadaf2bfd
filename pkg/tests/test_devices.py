import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradmap import devices
from gradmap.devices import BatteryParams, GeneratorParams, HeatPumpParams

BAT = BatteryParams(e_max=10.0, p_max=5.0, e_target=5.0, c_deg=0.0, eff_a=0.95, eff_b=0.0)
HP = HeatPumpParams(r=2.0, c=4.0, cop=3.0, p_max=3.0, theta_set=21.0, delta=2.0, theta_target=21.0)
GEN = GeneratorParams(p_min=0.0, p_max=10.0, ramp_dn=-0.5, ramp_up=0.5, fuel_a=0.1, fuel_b=0.01)


# ---------------------------------------------------------------------------
# hand-evaluated steps


def test_battery_charge_inside_limits():
    r = devices.battery_step(5.0, 2.0, BAT, 0.25)
    assert r.implied == pytest.approx(5.475, abs=1e-12)
    assert r.next_state == pytest.approx(5.475, abs=1e-12)
    assert r.actual_power == pytest.approx(2.0, abs=1e-12)
    assert r.violation == 0.0


def test_battery_idle():
    bat = BatteryParams(e_max=10.0, p_max=5.0, e_target=5.0)
    r = devices.battery_step(3.0, 0.0, bat, 0.25)
    assert r.implied == 3.0 and r.next_state == 3.0 and r.actual_power == 0.0 and r.cost == 0.0


def test_battery_upper_clip():
    r = devices.battery_step(9.9, 2.0, BAT, 0.25)
    assert r.implied == pytest.approx(10.375)
    assert r.next_state == 10.0
    assert r.actual_power == pytest.approx(0.1 / 0.2375, abs=1e-12)
    assert r.violation == pytest.approx(0.375 / BAT.p_max)


def test_heatpump_free_evolution():
    r = devices.heatpump_step(20.0, 1.0, HP, 10.0, 0.25)
    assert r.implied == pytest.approx(19.875)
    assert r.next_state == pytest.approx(19.875)
    assert r.actual_power == pytest.approx(1.0)
    assert r.violation == 0.0


def test_heatpump_equilibrium():
    r = devices.heatpump_step(14.0, 0.0, HeatPumpParams(2.0, 4.0, 3.0, 3.0, 14.0, 2.0, 14.0), 14.0, 0.25)
    assert r.implied == 14.0


def test_heatpump_lower_clip():
    hp = HeatPumpParams(r=2.0, c=4.0, cop=3.0, p_max=3.0, theta_set=20.45, delta=0.55, theta_target=20.45)
    r = devices.heatpump_step(20.0, 0.0, hp, 10.0, 0.25)
    assert r.implied == pytest.approx(19.6875)
    assert r.next_state == pytest.approx(19.9)
    assert r.actual_power == pytest.approx((16 * -0.1 + 5) / 3)


def test_generator_ramp_clip():
    r = devices.generator_step(5.0, 6.0, GEN, 0.25)
    assert r.implied == pytest.approx(1.0)
    assert r.actual_power == pytest.approx(5.5)
    assert r.violation == pytest.approx(1.0)


def test_generator_hold_and_inactive_clip():
    assert devices.generator_step(5.0, 5.0, GEN, 0.25).violation == 0.0
    assert devices.generator_step(5.0, 5.0, GEN, 0.25).actual_power == 5.0
    assert devices.generator_step(5.0, 5.3, GEN, 0.25).actual_power == pytest.approx(5.3)


@pytest.mark.parametrize("p, want", [(2.0, 0.15), (0.0, 0.0), (-2.0, -0.05)])
def test_meter_cost(p, want):
    assert devices.meter_cost(p, 0.30, 0.10, 0.25) == pytest.approx(want, abs=1e-15)


def test_heatpump_hold_command_at_equilibrium():
    hp = HeatPumpParams(r=2.0, c=4.0, cop=3.0, p_max=3.0, theta_set=20.0, delta=2.0, theta_target=20.0)
    assert devices.heatpump_hold_command(20.0, hp, 10.0, 0.25) == pytest.approx(5.0 / 3.0)


# ---------------------------------------------------------------------------
# backward


def test_battery_linear_derivative():
    r = devices.battery_step(5.0, 1.0, BAT, 0.25)
    g_cmd, _ = devices.battery_step_backward(5.0, 1.0, BAT, 0.25, r, 1.0, 0.0, 0.0, 0.0)
    assert g_cmd == pytest.approx(0.95 * 0.25)


def test_battery_clipped_derivatives():
    bat = BatteryParams(e_max=10.0, p_max=5.0, e_target=5.0, c_deg=0.0, eff_b=0.05)
    e, p, dt = 9.9, 2.0, 0.25
    r = devices.battery_step(e, p, bat, dt)
    g_next, _ = devices.battery_step_backward(e, p, bat, dt, r, 1.0, 0.0, 0.0, 0.0)
    g_pow, _ = devices.battery_step_backward(e, p, bat, dt, r, 0.0, 1.0, 0.0, 0.0)
    eta, deta = devices.efficiency(p, bat), devices.efficiency_slope(p, bat)
    assert g_next == 0.0
    assert g_pow == pytest.approx(-(r.next_state - e) * deta / (eta**2 * dt), rel=1e-12)


def _battery(draw):
    e_max = draw(st.floats(2.0, 20.0))
    return BatteryParams(e_max=e_max, p_max=draw(st.floats(1.0, 8.0)), e_target=0.5 * e_max,
                         c_deg=draw(st.floats(0.0, 0.05)), eff_a=draw(st.floats(0.9, 1.0)),
                         eff_b=draw(st.floats(0.0, 0.1)), eff_c=draw(st.floats(1.0, 8.0)))


def _heatpump(draw):
    delta = draw(st.floats(0.5, 3.0))
    ts = draw(st.floats(17.0, 23.0))
    return HeatPumpParams(r=draw(st.floats(1.0, 4.0)), c=draw(st.floats(2.0, 8.0)), cop=draw(st.floats(2.0, 4.0)),
                          p_max=draw(st.floats(1.0, 5.0)), theta_set=ts, delta=delta, theta_target=ts,
                          c_use=draw(st.floats(0.0, 0.05)))


def _generator(draw):
    p_max = draw(st.floats(1.0, 10.0))
    return GeneratorParams(p_min=0.0, p_max=p_max, ramp_dn=-draw(st.floats(0.2, 3.0)),
                           ramp_up=draw(st.floats(0.2, 3.0)), fuel_a=draw(st.floats(0.0, 0.3)),
                           fuel_b=draw(st.floats(0.0, 0.05)))


@st.composite
def device_case(draw):
    kind = draw(st.sampled_from(devices.KINDS))
    rng = np.random.default_rng(draw(st.integers(0, 2**31)))
    n = 16
    th = None
    if kind == "battery":
        p = _battery(draw)
        x, u = rng.uniform(0, p.e_max, n), rng.uniform(-p.p_max, p.p_max, n)
    elif kind == "heatpump":
        p = _heatpump(draw)
        x = rng.uniform(p.theta_set - p.delta, p.theta_set + p.delta, n)
        u, th = rng.uniform(0, p.p_max, n), rng.uniform(-5, 15, n)
    else:
        p = _generator(draw)
        x, u = rng.uniform(p.p_min, p.p_max, n), rng.uniform(p.p_min, p.p_max, n)
    return kind, p, x, u, th, draw(st.sampled_from([0.25, 1.0])), rng.standard_normal(4)


def _kink_distance(kind, p, x, u, th, dt):
    r = devices.device_step(kind, x, u, p, dt, theta_out=th)
    if kind == "battery":
        return np.minimum.reduce([np.abs(r.implied), np.abs(r.implied - p.e_max), np.abs(u)])
    if kind == "heatpump":
        lo, hi = p.theta_set - p.delta, p.theta_set + p.delta
        return np.minimum.reduce([np.abs(r.implied - lo), np.abs(r.implied - hi), np.abs(r.actual_power)])
    return np.minimum(np.abs(r.implied - p.ramp_dn), np.abs(r.implied - p.ramp_up))


@given(device_case())
@settings(max_examples=300, deadline=None)
def test_backward_matches_finite_differences(case):
    kind, p, x, u, th, dt, w = case
    h = 1e-6

    def scalar(xx, uu):
        r = devices.device_step(kind, xx, uu, p, dt, theta_out=th)
        return w[0] * r.next_state + w[1] * r.actual_power + w[2] * r.cost + w[3] * r.violation

    res = devices.device_step(kind, x, u, p, dt, theta_out=th)
    g_u, g_x = devices.device_step_backward(kind, x, u, p, dt, res, w[0], w[1], w[2], w[3], theta_out=th)
    fd_u = (scalar(x, u + h) - scalar(x, u - h)) / (2 * h)
    fd_x = (scalar(x + h, u) - scalar(x - h, u)) / (2 * h)
    # 1e-3 in input space maps to up to ~c/dt in implied state for the heat pump
    far = _kink_distance(kind, p, x, u, th, dt) >= 1e-3 * 50
    for g, fd in ((g_u, fd_u), (g_x, fd_x)):
        err = np.abs(g - fd)[far] / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1.0)[far]
        assert np.all(err <= 1e-6)


# ---------------------------------------------------------------------------
# invariants


@given(device_case())
@settings(max_examples=200, deadline=None)
def test_states_stay_feasible_and_violations_nonnegative(case):
    kind, p, x, u, th, dt, _ = case
    r = devices.device_step(kind, x, u, p, dt, theta_out=th)
    assert np.all(r.violation >= 0)
    if kind == "battery":
        assert np.all((0 <= r.next_state) & (r.next_state <= p.e_max))
        eta = devices.efficiency(u, p)
        np.testing.assert_allclose(r.next_state, x + eta * r.actual_power * dt, rtol=0, atol=1e-12)
    elif kind == "heatpump":
        assert np.all(np.abs(r.next_state - p.theta_set) <= p.delta + 1e-12)
    else:
        assert np.all((p.p_min <= r.actual_power) & (r.actual_power <= p.p_max))


def test_fleet_roundtrip(tmp_path):
    fleet = devices.load_bundled_fleet("desk10")
    devices.save_fleet(fleet, tmp_path / "f.json")
    again = devices.load_fleet(tmp_path / "f.json")
    assert again.ids == fleet.ids
    np.testing.assert_array_equal(again.initial_state, fleet.initial_state)
    assert again.to_dict() == fleet.to_dict()


@pytest.mark.parametrize("bad", [
    {"type": "battery", "params": {"e_max": -1, "p_max": 1, "e_target": 1}},
    {"type": "heatpump", "params": {"r": 1, "c": 1, "cop": 3, "p_max": 1, "theta_set": 20, "delta": 1,
                                    "theta_target": 25}},
    {"type": "turbine", "params": {}},
])
def test_invalid_agents_rejected(bad):
    with pytest.raises(ValueError):
        devices.fleet_from_dict({"agents": [dict(bad, id="x", bus="1", phase="a")]})
