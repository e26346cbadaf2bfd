"""Episode simulation, violation channels, rollout Lagrangian, reverse sweep.

Episodes in a batch are simulated in lock-step: every per-agent array has
shape ``(B, T, N)`` and every node-phase array ``(B, T, 3N_B)``. The
reverse sweep walks ``t = T .. 1`` carrying one state adjoint per agent,
adds the network term through the power-flow adjoint at each step, and
returns ``dL/da`` for every sampled action. Observations are treated as
constants in the reverse sweep.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import devices, feeder
from .policy import (
    PolicySet,
    action_clip_slope,
    build_observations,
    decode_action,
    decode_slope,
    output_gradients,
    policy_forward,
)

CHANNELS = ("volt", "bstp", "bend", "hstp", "hend", "grmp")
M_DEFAULT = 200.0


class PowerFlowFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class DualState:
    lambda_volt: float = 0.0
    lambda_bstp: float = 0.0
    lambda_bend: float = 0.0
    lambda_hstp: float = 0.0
    lambda_hend: float = 0.0
    lambda_grmp: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f"lambda_{c}") for c in CHANNELS])

    @classmethod
    def from_array(cls, lam) -> "DualState":
        return cls(*(float(x) for x in lam))


def _dual_array(duals) -> np.ndarray:
    if duals is None:
        return np.zeros(len(CHANNELS))
    if isinstance(duals, DualState):
        return duals.as_array()
    return np.asarray(duals, dtype=float)


class Environment:
    """Fleet + feeder + time step, with the derived maps the rollout needs."""

    def __init__(self, fleet, network, dt, M=M_DEFAULT, pf_tol=feeder.PF_TOL,
                 pf_max_iter=feeder.PF_MAX_ITER, adjoint="bicgstab"):
        self.fleet = fleet
        self.network = network
        self.dt = float(dt)
        self.M = float(M)
        self.pf_tol = pf_tol
        self.pf_max_iter = pf_max_iter
        self.adjoint = adjoint
        self.node = fleet.node_index(network)
        n = network.n_nodes
        a = np.zeros((fleet.n_agents, n), dtype=complex)
        # demand-positive kW -> generation-positive per-unit complex injection
        a[np.arange(fleet.n_agents), self.node] = -(1.0 + 1j * fleet.q_ratio) / network.s_base
        self.inj_matrix = a
        self.cost_scale = self.M / float(np.mean(fleet.p_limit))
        self.power_sign = np.where(fleet.kinds == "generator", -1.0, 1.0)

    @property
    def n_agents(self) -> int:
        return self.fleet.n_agents

    def with_options(self, **kw) -> "Environment":
        opts = dict(dt=self.dt, M=self.M, pf_tol=self.pf_tol, pf_max_iter=self.pf_max_iter, adjoint=self.adjoint)
        opts.update(kw)
        return Environment(self.fleet, self.network, **opts)


@dataclass
class EpisodeTrace:
    """Recorded rollouts; arrays carry a leading episode axis of length B."""

    obs: np.ndarray
    eps: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    a_raw: np.ndarray
    a: np.ndarray
    command: np.ndarray
    state: np.ndarray       # (B, T+1, N)
    implied: np.ndarray
    power: np.ndarray
    device_cost: np.ndarray
    meter_cost: np.ndarray
    violation: np.ndarray   # per-step raw channel contributions
    net: np.ndarray
    s_wye: np.ndarray
    v: np.ndarray
    pf_converged: np.ndarray
    pf_iterations: np.ndarray
    load: np.ndarray
    pv: np.ndarray
    temp: np.ndarray
    price_import: np.ndarray
    price_export: np.ndarray
    days: np.ndarray
    channels: np.ndarray    # (B, 6)
    cost: np.ndarray        # (B,) operating cost in $
    cost_norm: np.ndarray   # (B,) normalised cost term

    @property
    def n_episodes(self) -> int:
        return self.a.shape[0]

    @property
    def n_steps(self) -> int:
        return self.a.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.pf_converged.all(axis=1)

    def episode(self, k) -> "EpisodeTrace":
        sel = np.atleast_1d(k)
        return EpisodeTrace(**{f.name: getattr(self, f.name)[sel] for f in fields(self)})

    def channel_dict(self, k: int = 0) -> dict:
        return dict(zip(CHANNELS, map(float, self.channels[k])))



def max_voltage_violation(trace: EpisodeTrace, network) -> np.ndarray:
    """Largest per-unit limit violation in each episode, shape (B,)."""
    return feeder.node_violation(np.abs(trace.v), network).max(axis=(1, 2))


def episode_lagrangian(trace: EpisodeTrace, duals) -> np.ndarray:
    """Per-episode Lagrangian: normalised cost plus dual-weighted channels."""
    return trace.cost_norm + trace.channels @ _dual_array(duals)


def lagrangian(trace: EpisodeTrace, duals, env=None) -> float:
    """Rollout Lagrangian averaged over the episodes in ``trace``."""
    return float(np.mean(episode_lagrangian(trace, duals)))


# ---------------------------------------------------------------------------
# forward simulation


def _encode(cmd, kind, p):
    """Inverse of the action decode (used to record rule-based commands)."""
    slope = decode_slope(kind, p)
    return (cmd - decode_action(0.0, kind, p)) / np.where(slope != 0, slope, 1.0)


def simulate(env: Environment, policies: PolicySet | None, exog: dict, x0: np.ndarray,
             eps: np.ndarray | None = None, actions: np.ndarray | None = None,
             controller: str = "policy", stats: dict | None = None) -> EpisodeTrace:
    """Run ``B`` episodes in lock-step.

    Parameters
    ----------
    exog : dict
        ``load``/``pv`` of shape (B, T, N); ``temp``, ``price_import``,
        ``price_export`` of shape (B, T); optional ``days``.
    x0 : ndarray, shape (B, N)
        Initial device states.
    eps : ndarray, shape (B, T, N), optional
        Standard-normal draws; zeros give the deterministic mean policy.
    actions : ndarray, shape (B, T, N), optional
        Pre-clip actions that override the policy (frozen-noise replays).
    controller : {"policy", "naive"}
        ``"naive"`` ignores the policy: idle batteries, set-point holding
        heat pumps, generators at full output.
    """
    fleet, net = env.fleet, env.network
    load = np.asarray(exog["load"], dtype=float)
    pv = np.asarray(exog["pv"], dtype=float)
    B, T, N = load.shape
    if N != fleet.n_agents:
        raise ValueError("exogenous series and fleet disagree on agent count")
    if stats is None:
        stats = exog["stats"]
    temp = np.asarray(exog["temp"], dtype=float)
    imp = np.asarray(exog["price_import"], dtype=float)
    exp = np.asarray(exog["price_export"], dtype=float)
    if eps is None:
        eps = np.zeros((B, T, N))
    n = net.n_nodes
    dt = env.dt

    shp = (B, T, N)
    obs = np.empty(shp + (8,))
    rec = {k: np.empty(shp) for k in ("mu", "sigma", "a_raw", "a", "command", "implied", "power",
                                      "device_cost", "meter_cost", "violation", "net")}
    state = np.empty((B, T + 1, N))
    state[:, 0] = x0
    s_wye = np.empty((B, T, n), dtype=complex)
    v_all = np.empty((B, T, n), dtype=complex)
    pf_ok = np.empty((B, T), dtype=bool)
    pf_it = np.empty((B, T), dtype=int)

    x = np.array(x0, dtype=float)
    v_prev = None
    v_local = np.ones((B, N))
    for k in range(T):
        t = k + 1
        nd = load[:, k] - pv[:, k]
        o = build_observations(fleet, x, nd, imp[:, k], exp[:, k], temp[:, k], v_local, t, T, stats)
        obs[:, k] = o
        if controller == "policy" and policies is not None:
            out = policy_forward(policies, o)
            mu, sigma = out.mu, out.sigma
        else:
            mu = sigma = np.full((B, N), np.nan)
        if actions is not None:
            a_raw = actions[:, k]
        elif controller == "naive":
            a_raw = None
        else:
            a_raw = mu + sigma * eps[:, k]

        cmd = np.empty((B, N))
        if a_raw is None:
            a_raw = np.empty((B, N))
            for kind, idx in fleet.idx.items():
                if not idx.size:
                    continue
                p = fleet.params[kind]
                if kind == "battery":
                    c = np.zeros((B, idx.size))
                elif kind == "heatpump":
                    c = devices.heatpump_hold_command(x[:, idx], p, temp[:, k, None], dt)
                else:
                    c = np.broadcast_to(p.p_max, (B, idx.size))
                cmd[:, idx] = c
                a_raw[:, idx] = _encode(c, kind, p)
            a = a_raw
        else:
            a = np.clip(a_raw, -1.0, 1.0)
            for kind, idx in fleet.idx.items():
                if idx.size:
                    cmd[:, idx] = decode_action(a[:, idx], kind, fleet.params[kind])

        x_next = np.empty((B, N))
        for kind, idx in fleet.idx.items():
            if not idx.size:
                continue
            res = devices.device_step(kind, x[:, idx], cmd[:, idx], fleet.params[kind], dt,
                                      theta_out=temp[:, k, None])
            x_next[:, idx] = res.next_state
            rec["implied"][:, k, idx] = res.implied
            rec["power"][:, k, idx] = res.actual_power
            rec["device_cost"][:, k, idx] = res.cost
            rec["violation"][:, k, idx] = res.violation

        p_net = nd + env.power_sign * rec["power"][:, k]
        rec["meter_cost"][:, k] = devices.meter_cost(p_net, imp[:, k, None], exp[:, k, None], dt)
        rec["net"][:, k] = p_net
        s = p_net @ env.inj_matrix
        s_wye[:, k] = s
        v, iters, _, ok = feeder.solve_power_flow_batch(s, None, net, v_prev, tol=env.pf_tol,
                                                        max_iter=env.pf_max_iter)
        v_all[:, k] = v
        pf_ok[:, k] = ok
        pf_it[:, k] = iters
        v_prev = v
        v_local = np.abs(v)[:, env.node]
        rec["mu"][:, k], rec["sigma"][:, k] = mu, sigma
        rec["a_raw"][:, k], rec["a"][:, k], rec["command"][:, k] = a_raw, a, cmd
        x = x_next
        state[:, k + 1] = x

    channels = compute_channels(env, state, rec["violation"], v_all)
    cost = (rec["device_cost"] + rec["meter_cost"]).sum(axis=(1, 2))
    trace = EpisodeTrace(
        obs=obs, eps=np.asarray(eps, dtype=float), state=state, s_wye=s_wye, v=v_all,
        pf_converged=pf_ok, pf_iterations=pf_it, load=load, pv=pv, temp=temp,
        price_import=imp, price_export=exp,
        days=np.asarray(exog.get("days", np.full(B, -1))), channels=channels, cost=cost,
        cost_norm=env.cost_scale * cost, **rec,
    )
    return trace


def compute_channels(env: Environment, state, violation, v) -> np.ndarray:
    """The six normalised violation channels for each episode, shape (B, 6)."""
    fleet = env.fleet
    B, T, N = violation.shape
    out = np.zeros((B, len(CHANNELS)))
    out[:, 0] = feeder.voltage_violation_from_v(v, env.network, N)
    i = fleet.idx["battery"]
    if i.size:
        p = fleet.params["battery"]
        out[:, 1] = violation[:, :, i].sum(axis=(1, 2)) / T
        out[:, 2] = (np.maximum(p.e_target - state[:, -1, i], 0.0) / p.e_target).sum(axis=1)
    i = fleet.idx["heatpump"]
    if i.size:
        p = fleet.params["heatpump"]
        out[:, 3] = violation[:, :, i].sum(axis=(1, 2)) / T
        out[:, 4] = (np.maximum(p.theta_target - state[:, -1, i], 0.0) / p.delta).sum(axis=1)
    i = fleet.idx["generator"]
    if i.size:
        out[:, 5] = violation[:, :, i].sum(axis=(1, 2)) / T
    return out


# ---------------------------------------------------------------------------
# reverse sweep


@dataclass
class BackwardResult:
    g_a: np.ndarray              # (B, T, N), dL_e/da_raw
    adjoint_failures: int
    adjoint_solves: int
    nan_count: int = 0


def network_gradient(env: Environment, trace: EpisodeTrace, lam_volt: float):
    """``lam_volt * dV_volt/d(net power)`` per (episode, step, agent)."""
    B, T, N = trace.net.shape
    out = np.zeros((B, T, N))
    if lam_volt == 0.0:
        return out, 0, 0
    gv = feeder.voltage_violation_grad(trace.v, env.network, N)  # (B, T, 2n)
    ok = trace.pf_converged & np.any(gv != 0, axis=-1)
    rows = np.argwhere(ok)
    if rows.size == 0:
        return out, 0, 0
    b, t = rows[:, 0], rows[:, 1]
    sens, failed = feeder.voltage_sensitivity_batch(
        trace.v[b, t], trace.s_wye[b, t], None, env.network, gv[b, t], method=env.adjoint
    )
    n = env.network.n_nodes
    a = env.inj_matrix
    d_net = sens[:, :n] @ a.real.T + sens[:, n:] @ a.imag.T
    out[b, t] = lam_volt * d_net
    return out, int(failed.sum()), len(rows)


def backward_rollout(env: Environment, trace: EpisodeTrace, duals) -> BackwardResult:
    """Reverse sweep giving ``dL_e/da_raw`` for every (episode, step, agent)."""
    fleet = env.fleet
    lam = _dual_array(duals)
    B, T, N = trace.a.shape
    dt = env.dt
    cs = env.cost_scale
    g_net_volt, n_fail, n_solves = network_gradient(env, trace, lam[0])
    step_lam = {"battery": lam[1] / T, "heatpump": lam[3] / T, "generator": lam[5] / T}

    g_x = np.zeros((B, N))
    i = fleet.idx["battery"]
    if i.size:
        p = fleet.params["battery"]
        g_x[:, i] = -lam[2] * (trace.state[:, -1, i] < p.e_target) / p.e_target
    i = fleet.idx["heatpump"]
    if i.size:
        p = fleet.params["heatpump"]
        g_x[:, i] = -lam[4] * (trace.state[:, -1, i] < p.theta_target) / p.delta

    g_a = np.zeros((B, T, N))
    for k in range(T - 1, -1, -1):
        imp = trace.price_import[:, k, None]
        exp = trace.price_export[:, k, None]
        g_net = cs * devices.meter_cost_slope(trace.net[:, k], imp, exp, dt) + g_net_volt[:, k]
        g_power = g_net * env.power_sign
        g_prev = np.empty((B, N))
        for kind, idx in fleet.idx.items():
            if not idx.size:
                continue
            p = fleet.params[kind]
            res = devices.StepResult(trace.state[:, k + 1, idx], trace.power[:, k, idx],
                                     trace.implied[:, k, idx], trace.device_cost[:, k, idx],
                                     trace.violation[:, k, idx])
            g_cmd, g_s = devices.device_step_backward(
                kind, trace.state[:, k, idx], trace.command[:, k, idx], p, dt, res,
                g_x[:, idx], g_power[:, idx], cs, step_lam[kind], theta_out=trace.temp[:, k, None],
            )
            g_a[:, k, idx] = g_cmd * decode_slope(kind, p) * action_clip_slope(trace.a_raw[:, k, idx])
            g_prev[:, idx] = g_s
        g_x = g_prev
    g_a[~trace.valid] = 0.0
    bad = ~np.isfinite(g_a)
    g_a[bad] = 0.0
    return BackwardResult(g_a, n_fail, n_solves, int(bad.sum()))


# ---------------------------------------------------------------------------
# batches


@dataclass
class RolloutBatch:
    """Cached rollouts of the valid episodes of one primal step."""

    trace: EpisodeTrace
    obs: np.ndarray
    eps: np.ndarray
    mu_old: np.ndarray
    sigma_old: np.ndarray
    g_a: np.ndarray | None
    g_mu: np.ndarray | None
    g_sigma: np.ndarray | None
    channel_means: np.ndarray
    cost_mean: float
    lagrangian_mean: float
    n_failed: int = 0
    adjoint_failures: int = 0
    adjoint_solves: int = 0
    nan_count: int = 0

    @property
    def n_samples(self) -> int:
        return self.mu_old.size


def initial_states(fleet, rng: np.random.Generator, randomize: bool = True) -> np.ndarray:
    """Randomly scaled initial states (or the fleet's nominal ones)."""
    x = fleet.initial_state.copy()
    if not randomize:
        return x
    i = fleet.idx["battery"]
    if i.size:
        x[i] = rng.uniform(0.2, 0.8, size=i.size) * fleet.params["battery"].e_max
    i = fleet.idx["heatpump"]
    if i.size:
        p = fleet.params["heatpump"]
        x[i] = p.theta_set + rng.uniform(-0.5, 0.5, size=i.size) * p.delta
    i = fleet.idx["generator"]
    if i.size:
        p = fleet.params["generator"]
        x[i] = rng.uniform(p.p_min, p.p_max)
    return x


def _episode_inputs(env, scenario, batch_size, seed, days=None, randomize=True):
    N = env.n_agents
    T = scenario.n_steps
    seed = tuple(np.atleast_1d(seed).tolist())
    pool = scenario.train_days if days is None else np.asarray(days)
    chosen = np.empty(batch_size, dtype=int)
    x0 = np.empty((batch_size, N))
    eps = np.empty((batch_size, T, N))
    for e in range(batch_size):
        rng = np.random.default_rng(seed + (e,))
        chosen[e] = pool[rng.integers(len(pool))]
        x0[e] = initial_states(env.fleet, rng, randomize)
        eps[e] = rng.standard_normal((T, N))
    return chosen, x0, eps


def simulate_episode(policies, env: Environment, scenario, day: int, rng: np.random.Generator,
                     x0=None, stochastic: bool = True) -> EpisodeTrace:
    """One episode on ``day`` with noise drawn from ``rng``."""
    T, N = scenario.n_steps, env.n_agents
    eps = rng.standard_normal((1, T, N)) if stochastic else np.zeros((1, T, N))
    if x0 is None:
        x0 = env.fleet.initial_state
    exog = scenario.episodes([day])
    exog["stats"] = scenario.stats
    return simulate(env, policies, exog, np.asarray(x0, dtype=float)[None], eps)


def _concat_traces(parts):
    if len(parts) == 1:
        return parts[0]
    return EpisodeTrace(**{f.name: np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(EpisodeTrace)})


def simulate_batch(policies, env: Environment, scenario, batch_size: int, seed, with_gradients: bool = True,
                   duals=None, days=None, randomize_initial: bool = True, workers: int = 1) -> RolloutBatch:
    """Collect ``batch_size`` episodes and (optionally) their action gradients.

    Episode ``e`` draws its day, initial state and noise from the stream
    seeded by ``(seed, e)``, so batches are reproducible and independent of
    ``workers``. Episodes whose power flow fails are dropped from the cache.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    chosen, x0, eps = _episode_inputs(env, scenario, batch_size, seed, days, randomize_initial)
    exog = scenario.episodes(chosen)
    exog["stats"] = scenario.stats

    def run(sl):
        part = {k: (v[sl] if isinstance(v, np.ndarray) else v) for k, v in exog.items()}
        tr = simulate(env, policies, part, x0[sl], eps[sl])
        bw = backward_rollout(env, tr, duals) if with_gradients else None
        return tr, bw

    size = -(-batch_size // max(workers, 1))
    chunks = [slice(i, i + size) for i in range(0, batch_size, size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(sl) for sl in chunks]
    trace = _concat_traces([r[0] for r in results])

    valid = trace.valid
    if not valid.any():
        raise PowerFlowFailure("power flow failed in every episode of the batch")
    keep = np.flatnonzero(valid)
    g_a = g_mu = g_sigma = None
    fails = solves = nans = 0
    if with_gradients:
        g_all = np.concatenate([r[1].g_a for r in results])
        fails = sum(r[1].adjoint_failures for r in results)
        solves = sum(r[1].adjoint_solves for r in results)
        nans = sum(r[1].nan_count for r in results)
        g_a = g_all[keep]
        g_mu, g_sigma = output_gradients(g_a, trace.eps[keep])
    lam = _dual_array(duals)
    return RolloutBatch(
        trace=trace,
        obs=trace.obs[keep], eps=trace.eps[keep], mu_old=trace.mu[keep], sigma_old=trace.sigma[keep],
        g_a=g_a, g_mu=g_mu, g_sigma=g_sigma,
        channel_means=trace.channels[keep].mean(axis=0),
        cost_mean=float(trace.cost[keep].mean()),
        lagrangian_mean=float(np.mean(trace.cost_norm[keep] + trace.channels[keep] @ lam)),
        n_failed=int((~valid).sum()), adjoint_failures=fails, adjoint_solves=solves,
        nan_count=nans,
    )


# ---------------------------------------------------------------------------
# export


def export_trace(trace: EpisodeTrace, fleet, network, directory, episode: int = 0, name: str | None = None):
    """Write per-agent and per-node CSVs for one episode; returns both paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    stem = name or f"episode_{episode}"
    p_agents = d / f"{stem}.csv"
    p_volt = d / f"{stem}_voltage.csv"
    T = trace.n_steps
    with open(p_agents, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "agent_id", "a", "command", "actual_power", "state", "cost"])
        for k in range(T):
            for i, aid in enumerate(fleet.ids):
                w.writerow([k + 1, aid, repr(float(trace.a[episode, k, i])),
                            repr(float(trace.command[episode, k, i])), repr(float(trace.power[episode, k, i])),
                            repr(float(trace.state[episode, k + 1, i])),
                            repr(float(trace.device_cost[episode, k, i] + trace.meter_cost[episode, k, i]))])
    with open(p_volt, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "node", "phase", "vmag"])
        mag = np.abs(trace.v[episode])
        for k in range(T):
            for j in range(network.n_nodes):
                w.writerow([k + 1, network.bus_ids[j // 3], "abc"[j % 3], repr(float(mag[k, j]))])
    return p_agents, p_volt
