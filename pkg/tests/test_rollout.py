import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import flat_exog, one_agent_fleet
from gradmap import devices, feeder, gradcheck, policy, rollout, scenario
from gradmap.rollout import CHANNELS, DualState


@pytest.fixture(scope="module")
def desk_sc(desk_env):
    return scenario.generate_synthetic(1, desk_env.n_agents, 4, dt=1.0, agent_ids=desk_env.fleet.ids)


def _no_cost_fleet():
    base = devices.load_bundled_fleet("desk10").to_dict()
    for a in base["agents"]:
        p = a["params"]
        for key in ("c_deg", "c_use", "fuel_a", "fuel_b"):
            if key in p:
                p[key] = 0.0
    return devices.fleet_from_dict(base)


# ---------------------------------------------------------------------------
# forward


def test_idle_battery_episode():
    fleet = one_agent_fleet("battery", e_target=6.0)
    net = feeder.load_bundled_feeder("twobus")
    env = rollout.Environment(fleet, net, 0.25)
    tr = rollout.simulate(env, policy.zero_policies(1), flat_exog(1, 8, 1), np.array([[4.5]]))
    assert not np.any(tr.s_wye)
    assert np.all(tr.v == net.w)
    ch = tr.channel_dict()
    assert ch["volt"] == 0.0 and ch["bstp"] == 0.0
    assert ch["bend"] == pytest.approx((6.0 - 4.5) / 6.0)


def test_zero_actions_zero_injection():
    fleet = devices.fleet_from_dict({"agents": [
        {"id": "b", "type": "battery", "bus": "1", "phase": "a", "params": {"e_max": 5, "p_max": 2, "e_target": 2}},
        {"id": "g", "type": "generator", "bus": "2", "phase": "c", "initial_state": 0.0,
         "params": {"p_min": 0, "p_max": 3, "ramp_dn": -1, "ramp_up": 1, "fuel_a": 0.1, "fuel_b": 0.0}},
    ]})
    env = rollout.Environment(fleet, feeder.load_bundled_feeder("small4bus"), 1.0)
    acts = np.zeros((2, 6, 2))
    acts[..., 1] = -1.0
    tr = rollout.simulate(env, None, flat_exog(2, 6, 2), np.array([[2.0, 0.0]] * 2), actions=acts)
    assert not np.any(tr.s_wye)


def test_simulation_is_deterministic(desk_env, desk_sc):
    pols = policy.init_policies(10, np.random.default_rng(0))
    a = rollout.simulate_batch(pols, desk_env, desk_sc, 3, (5, 1))
    b = rollout.simulate_batch(pols, desk_env, desk_sc, 3, (5, 1))
    for name in ("a_raw", "state", "v", "channels", "cost"):
        assert getattr(a.trace, name).tobytes() == getattr(b.trace, name).tobytes()
    assert a.g_a.tobytes() == b.g_a.tobytes()


def _scalar_channels(env, tr, e):
    """Straight-line recomputation of the six channels for episode ``e``."""
    fleet, net = env.fleet, env.network
    T, N = tr.n_steps, fleet.n_agents
    out = dict.fromkeys(CHANNELS, 0.0)
    for k in range(T):
        worst = 0.0
        for z in tr.v[e, k]:
            m = abs(z)
            worst = max(worst, max(m - net.v_max, 0.0) + max(net.v_min - m, 0.0))
        out["volt"] += worst / (0.5 * (net.v_max - net.v_min) * T / N)
        for i, ag in enumerate(fleet.agents):
            p, x_hat = ag.params, tr.implied[e, k, i]
            if ag.kind == "battery":
                out["bstp"] += (max(x_hat - p.e_max, 0.0) + max(-x_hat, 0.0)) / p.p_max / T
            elif ag.kind == "heatpump":
                hi, lo = p.theta_set + p.delta, p.theta_set - p.delta
                out["hstp"] += (max(x_hat - hi, 0.0) + max(lo - x_hat, 0.0)) / p.delta / T
            else:
                half = 0.5 * (p.ramp_up - p.ramp_dn)
                out["grmp"] += (max(x_hat - p.ramp_up, 0.0) + max(p.ramp_dn - x_hat, 0.0)) / half / T
    for i, ag in enumerate(fleet.agents):
        x_end = tr.state[e, -1, i]
        if ag.kind == "battery":
            out["bend"] += max(ag.params.e_target - x_end, 0.0) / ag.params.e_target
        elif ag.kind == "heatpump":
            out["hend"] += max(ag.params.theta_target - x_end, 0.0) / ag.params.delta
    return out


def test_channels_match_scalar_recomputation(desk_env, desk_sc):
    pols = policy.init_policies(10, np.random.default_rng(2))
    pols = pols.map(lambda a: a * 3.0)  # wider actions, so limits are actually crossed
    b = rollout.simulate_batch(pols, desk_env, desk_sc, 4, (9,), with_gradients=False)
    assert b.trace.channels[:, 1:].sum() > 0
    for e in range(4):
        ref = _scalar_channels(desk_env, b.trace, e)
        for c, val in zip(CHANNELS, b.trace.channels[e]):
            assert val == pytest.approx(ref[c], rel=1e-12, abs=1e-14), c


@given(st.integers(0, 2**31), st.floats(0.1, 4.0))
@settings(max_examples=10, deadline=None)
def test_channels_nonnegative(seed, scale):
    fleet = devices.load_bundled_fleet("desk10")
    env = rollout.Environment(fleet, feeder.load_bundled_feeder("small4bus"), 1.0)
    sc = scenario.generate_synthetic(seed % 1000, 10, 2, dt=2.0, agent_ids=fleet.ids)
    pols = policy.init_policies(10, np.random.default_rng(seed)).map(lambda a: a * scale)
    b = rollout.simulate_batch(pols, env, sc, 2, (seed,), with_gradients=False)
    assert np.all(b.trace.channels >= 0)


def test_feasible_trace_has_zero_channels():
    fleet = one_agent_fleet("battery", e_target=5.0)
    env = rollout.Environment(fleet, feeder.load_bundled_feeder("twobus"), 1.0)
    acts = np.tile([0.1, -0.1], 4)[None, :, None]
    tr = rollout.simulate(env, None, flat_exog(1, 8, 1), np.array([[5.0]]), actions=acts)
    assert not np.any(tr.channels[:, 1:])


# ---------------------------------------------------------------------------
# Lagrangian


def test_lagrangian_examples(desk_env, desk_sc):
    pols = policy.init_policies(10, np.random.default_rng(3))
    tr = rollout.simulate_batch(pols, desk_env, desk_sc, 2, (1,), with_gradients=False).trace
    assert rollout.lagrangian(tr, DualState()) == pytest.approx(tr.cost_norm.mean())
    ones = DualState(*([1.0] * 6))
    assert rollout.lagrangian(tr, ones) == pytest.approx(np.mean(tr.cost_norm + tr.channels.sum(axis=1)))


def test_zero_cost_feasible_lagrangian_is_zero():
    fleet = one_agent_fleet("battery", e_target=5.0, c_deg=0.0)
    env = rollout.Environment(fleet, feeder.load_bundled_feeder("twobus"), 1.0)
    tr = rollout.simulate(env, policy.zero_policies(1), flat_exog(1, 4, 1, imp=0.0, exp=0.0), np.array([[5.0]]))
    assert rollout.lagrangian(tr, DualState(*([3.0] * 6))) == 0.0


# ---------------------------------------------------------------------------
# backward


def test_zero_lagrangian_gives_zero_gradient(desk_sc):
    fleet = _no_cost_fleet()
    env = rollout.Environment(fleet, feeder.load_bundled_feeder("small4bus"), 1.0)
    sc = scenario.Scenario(desk_sc.dt, desk_sc.n_steps, desk_sc.agent_ids, desk_sc.load, desk_sc.pv, desk_sc.temp,
                           0.0 * desk_sc.price_import, 0.0 * desk_sc.price_export, desk_sc.n_test_days)
    b = rollout.simulate_batch(policy.init_policies(10, np.random.default_rng(0)), env, sc, 3, (0,))
    assert not np.any(b.g_a)


def test_single_battery_single_step_chain_rule():
    fleet = one_agent_fleet("battery", e_max=10.0, p_max=4.0, e_target=5.0, c_deg=0.03)
    env = rollout.Environment(fleet, feeder.load_bundled_feeder("twobus"), 0.5)
    exog = flat_exog(1, 1, 1, load=1.0, imp=0.3, exp=0.1)
    acts = np.array([[[0.4]]])
    tr = rollout.simulate(env, None, exog, np.array([[5.0]]), actions=acts)
    g = rollout.backward_rollout(env, tr, DualState()).g_a[0, 0, 0]
    # P = a*p_max (no clip, constant efficiency); net = load + P > 0
    want = env.cost_scale * (0.3 * 0.5 + 0.03 * 0.5) * 4.0
    assert g == pytest.approx(want, rel=1e-13)


def test_gradient_matches_frozen_noise_differences():
    assert gradcheck.rollout_gradient_error(seed=0, n_coords=50) <= 1e-3


def test_clipped_actions_have_zero_gradient(desk_env, desk_sc):
    pols = policy.init_policies(10, np.random.default_rng(4)).map(lambda a: a * 4.0)
    b = rollout.simulate_batch(pols, desk_env, desk_sc, 2, (2,), duals=DualState(1, 1, 1, 1, 1, 1))
    clipped = np.abs(b.trace.a_raw) > 1
    assert clipped.any()
    assert not np.any(b.g_a[clipped])


# ---------------------------------------------------------------------------
# batches


def test_batch_of_one_is_an_episode(desk_env, desk_sc):
    pols = policy.init_policies(10, np.random.default_rng(5))
    b = rollout.simulate_batch(pols, desk_env, desk_sc, 1, (11, 2))
    rng = np.random.default_rng((11, 2, 0))
    day = desk_sc.train_days[rng.integers(len(desk_sc.train_days))]
    x0 = rollout.initial_states(desk_env.fleet, rng)
    ep = rollout.simulate_episode(pols, desk_env, desk_sc, day, rng, x0=x0)
    for name in ("a_raw", "state", "v", "channels", "cost"):
        assert np.array_equal(getattr(b.trace, name), getattr(ep, name)), name
    np.testing.assert_array_equal(b.g_a, rollout.backward_rollout(desk_env, ep, None).g_a)


def test_batch_means_are_episode_means(desk_env, desk_sc):
    pols = policy.init_policies(10, np.random.default_rng(6))
    b = rollout.simulate_batch(pols, desk_env, desk_sc, 5, (3,), with_gradients=False)
    np.testing.assert_allclose(b.channel_means, b.trace.channels.mean(axis=0), rtol=1e-15)
    assert b.cost_mean == pytest.approx(b.trace.cost.mean(), rel=1e-15)


def test_workers_do_not_change_results(desk_env, desk_sc):
    pols = policy.init_policies(10, np.random.default_rng(7))
    a = rollout.simulate_batch(pols, desk_env, desk_sc, 5, (4,), duals=DualState(10, 1, 1, 1, 1, 1))
    b = rollout.simulate_batch(pols, desk_env, desk_sc, 5, (4,), duals=DualState(10, 1, 1, 1, 1, 1), workers=3)
    np.testing.assert_allclose(a.g_a, b.g_a, rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(a.trace.state, b.trace.state)


def test_reparameterisation_identity_over_batch(desk_env, desk_sc):
    pols = policy.init_policies(10, np.random.default_rng(8))
    b = rollout.simulate_batch(pols, desk_env, desk_sc, 8, (6,), duals=DualState(5, 1, 1, 1, 1, 1))
    assert np.array_equal(b.g_sigma, b.g_a * b.eps)
    assert np.array_equal(b.g_mu, b.g_a)


def test_failed_power_flow_episodes_are_dropped(desk_env, desk_sc):
    env = desk_env.with_options(pf_max_iter=1)
    pols = policy.init_policies(10, np.random.default_rng(9))
    with pytest.raises(rollout.PowerFlowFailure):
        rollout.simulate_batch(pols, env, desk_sc, 2, (0,))


def test_export_trace_files(desk_env, desk_sc, tmp_path):
    import pandas as pd

    tr = rollout.simulate_batch(policy.init_policies(10, np.random.default_rng(0)), desk_env, desk_sc, 2, (0,),
                                with_gradients=False).trace
    pa, pv = rollout.export_trace(tr, desk_env.fleet, desk_env.network, tmp_path, episode=1)
    df = pd.read_csv(pa, float_precision="round_trip")
    assert len(df) == tr.n_steps * 10
    assert df["cost"].sum() == pytest.approx(tr.cost[1], rel=1e-12)
    vdf = pd.read_csv(pv, float_precision="round_trip")
    assert vdf["vmag"].max() == np.abs(tr.v[1]).max()
