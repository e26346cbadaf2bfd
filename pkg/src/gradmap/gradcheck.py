"""Finite-difference checks of every hand-written derivative in the package.

Each check returns the largest relative error over its sample set; the
``gradcheck`` subcommand prints them against their tolerances.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import devices, feeder, rollout, scenario, trainer
from .policy import init_policies, parameter_gradient

FEEDER_TOL = 1e-4
DEVICE_TOL = 1e-6
ROLLOUT_TOL = 1e-3
TANGENCY_TOL = 1e-10
ABS_FLOOR = 1e-6


def _rel(a, b, floor=ABS_FLOOR):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def violating_point(model: feeder.NetworkModel, scale: float = 0.6, seed: int = 0) -> feeder.Injection:
    """Heavy unbalanced generation at the far bus, pushing some phases past ``v_max``."""
    rng = np.random.default_rng(seed)
    s = 0.02 * (rng.standard_normal(model.n_nodes) + 1j * rng.standard_normal(model.n_nodes))
    far = model.n_nodes - 3
    s[far] += scale * (1.0 + 0.2j)
    return feeder.Injection(s)


def feeder_sensitivity_error(model=None, n_dirs: int = 20, h: float = 1e-6, seed: int = 0) -> float:
    """Adjoint sensitivity vs central differences along random injection directions."""
    if model is None:
        model = feeder.load_bundled_feeder("small4bus")
    inj = violating_point(model, seed=seed)
    n = model.n_nodes

    def channel(s):
        sol = feeder.solve_power_flow(feeder.Injection(s), model, tol=1e-14, max_iter=1000, strict=True)
        return float(feeder.voltage_violation_from_v(sol.v[None], model, 1))

    sol = feeder.solve_power_flow(inj, model, tol=1e-14, max_iter=1000, strict=True)
    g_v = feeder.voltage_violation_grad(sol.v[None], model, 1)[0]
    if not np.any(g_v):
        raise RuntimeError("operating point does not violate the voltage limits")
    sens = feeder.voltage_sensitivity(sol, inj, model, g_v)
    rng = np.random.default_rng(seed + 1)
    errs = []
    for _ in range(n_dirs):
        d = rng.standard_normal(2 * n)
        dc = d[:n] + 1j * d[n:]
        fd = (channel(inj.s_wye + h * dc) - channel(inj.s_wye - h * dc)) / (2 * h)
        errs.append(_rel(sens @ d, fd))
    return max(errs)


def device_backward_error(seed: int = 0, n: int = 40, h: float = 1e-6) -> float:
    """Every device step's reverse-mode derivative vs central differences."""
    rng = np.random.default_rng(seed)
    bat = devices.BatteryParams(e_max=10.0, p_max=5.0, e_target=5.0, eff_b=0.05)
    hp = devices.HeatPumpParams(r=2.0, c=4.0, cop=3.0, p_max=3.0, theta_set=20.0, delta=2.0, theta_target=19.5)
    gen = devices.GeneratorParams(p_min=0.0, p_max=5.0, ramp_dn=-2.0, ramp_up=2.0, fuel_a=0.1, fuel_b=0.01)
    cases = [
        ("battery", bat, rng.uniform(0.5, 9.5, n), rng.uniform(-5, 5, n), None),
        ("heatpump", hp, rng.uniform(18.5, 21.5, n), rng.uniform(0, 3, n), rng.uniform(0, 12, n)),
        ("generator", gen, rng.uniform(0, 5, n), rng.uniform(0, 5, n), None),
    ]
    dt = 1.0
    w = rng.standard_normal(4)
    worst = 0.0
    for kind, p, x, u, th in cases:
        def scalar(xx, uu):
            r = devices.device_step(kind, xx, uu, p, dt, theta_out=th)
            return w[0] * r.next_state + w[1] * r.actual_power + w[2] * r.cost + w[3] * r.violation

        res = devices.device_step(kind, x, u, p, dt, theta_out=th)
        g_u, g_x = devices.device_step_backward(kind, x, u, p, dt, res, w[0], w[1], w[2], w[3], theta_out=th)
        fd_u = (scalar(x, u + h) - scalar(x, u - h)) / (2 * h)
        fd_x = (scalar(x + h, u) - scalar(x - h, u)) / (2 * h)
        # keep samples whose one-sided differences agree (away from kinks)
        smooth = np.ones(n, dtype=bool)
        for fd, shift in ((fd_u, (0, h)), (fd_x, (h, 0))):
            up = (scalar(x + shift[0], u + shift[1]) - scalar(x, u)) / h
            dn = (scalar(x, u) - scalar(x - shift[0], u - shift[1])) / h
            smooth &= np.abs(up - dn) < 1e-4 * (1 + np.abs(fd))
        # unit floor: differencing noise (~eps*|f|/h) swamps derivatives near zero
        worst = max(worst, _rel(g_u[smooth], fd_u[smooth], 1.0), _rel(g_x[smooth], fd_x[smooth], 1.0))
    return worst


def rollout_fixture(seed: int = 0, n_steps: int = 8):
    """3-agent, 4-bus fixture with a narrowed voltage band so the voltage term is active."""
    fleet = devices.load_bundled_fleet("small3")
    net = dataclasses.replace(feeder.load_bundled_feeder("small4bus"), v_min=0.98, v_max=1.02)
    sc = scenario.generate_synthetic(seed + 1, fleet.n_agents, 2, dt=24.0 / n_steps, n_steps=n_steps,
                                     agent_ids=fleet.ids, pv_capacity=(10.0, 15.0))
    env = rollout.Environment(fleet, net, sc.dt, pf_tol=1e-14, pf_max_iter=1000)
    rng = np.random.default_rng(seed)
    pols = init_policies(fleet.n_agents, rng)
    exog = sc.episodes([0])
    exog["stats"] = sc.stats
    x0 = rollout.initial_states(fleet, rng)[None]
    eps = rng.standard_normal((1, n_steps, fleet.n_agents))
    duals = rollout.DualState(50.0, 1.0, 2.0, 1.0, 2.0, 1.0)
    return env, pols, exog, x0, eps, duals


def rollout_gradient_error(seed: int = 0, n_coords: int = 50, h: float = 1e-6, margin: float = 1e-3) -> float:
    """``dL/da`` from the reverse sweep vs frozen-noise central differences."""
    env, pols, exog, x0, eps, duals = rollout_fixture(seed)
    trace = rollout.simulate(env, pols, exog, x0, eps)
    g_a = rollout.backward_rollout(env, trace, duals).g_a

    def lag(a):
        return rollout.lagrangian(rollout.simulate(env, pols, exog, x0, eps, actions=a), duals)

    coords = np.argwhere(np.abs(trace.a_raw[0]) < 1 - margin)
    rng = np.random.default_rng(seed + 7)
    pick = coords[rng.permutation(len(coords))]
    errs = []
    for k, i in pick:
        base = trace.a_raw.copy()
        lp, lm, l0 = [], [], lag(base)
        for sgn, store in ((1, lp), (-1, lm)):
            a = base.copy()
            a[0, k, i] += sgn * h
            store.append(lag(a))
        fd = (lp[0] - lm[0]) / (2 * h)
        # skip coordinates sitting on a kink of some other clip or relu
        if abs((lp[0] - l0) / h - (l0 - lm[0]) / h) > 1e-3 * (1 + abs(fd)):
            continue
        errs.append(_rel(np.array(g_a[0, k, i]), np.array(fd)))
        if len(errs) == n_coords:
            break
    return max(errs)


def tangency_error(seed: int = 0) -> float:
    """Surrogate gradient at the expansion point vs the exact Lagrangian gradient."""
    env, pols, _, _, _, duals = rollout_fixture(seed)
    sc = scenario.generate_synthetic(seed + 1, env.n_agents, 3, dt=env.dt, n_steps=8, agent_ids=env.fleet.ids,
                                     pv_capacity=(10.0, 15.0))
    batch = rollout.simulate_batch(pols, env, sc, 4, (seed, 1), duals=duals)
    _, g_sur = trainer.surrogate_loss(pols, batch, beta=1000.0, tau=0.0)
    # independent fresh rollout and reverse sweep, chained through the forward pass
    fresh = rollout.simulate_batch(pols, env, sc, 4, (seed, 1), duals=duals)
    n_ep = fresh.g_mu.shape[0]
    exact = parameter_gradient(pols, fresh.obs, fresh.g_mu / n_ep, fresh.g_sigma / n_ep)
    scale = batch.n_samples / n_ep  # sample-mean surrogate vs episode-mean Lagrangian
    return max(_rel(a * scale, b, floor=1e-300) for a, b in zip(g_sur.arrays(), exact.arrays()))


def run_all(seed: int = 0):
    return [
        ("feeder sensitivity", feeder_sensitivity_error(seed=seed), FEEDER_TOL),
        ("device backward", device_backward_error(seed=seed), DEVICE_TOL),
        ("rollout action gradient", rollout_gradient_error(seed=seed), ROLLOUT_TOL),
        ("surrogate tangency", tangency_error(seed=seed), TANGENCY_TOL),
    ]
