"""Independent per-agent Gaussian MLP policies and local observations.

Each agent owns a two-layer network ``8 -> 16 (tanh) -> 2`` whose outputs
are the action mean and the log standard deviation. Parameters of all
agents are stored as stacked arrays with the agent on the leading axis;
no parameter is shared between agents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

OBS_DIM = 8
HIDDEN = 16
LOG_SIGMA_MIN = -5.0
LOG_SIGMA_MAX = 1.0
LOG_SIGMA_INIT = -2.0
URGENCY_CLAMP = 3.0
LAYOUT_VERSION = 1


@dataclass(frozen=True)
class PolicySet:
    """Stacked parameters for ``N`` agents.

    w1: (N, 16, 8), b1: (N, 16), w2: (N, 2, 16), b2: (N, 2). Row 0 of the
    output layer produces the mean, row 1 the log standard deviation.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def n_agents(self) -> int:
        return self.w1.shape[0]

    def arrays(self):
        return (self.w1, self.b1, self.w2, self.b2)

    @classmethod
    def from_arrays(cls, arrays):
        return cls(*arrays)

    def map(self, fn, *others):
        return PolicySet(*(fn(a, *(o.arrays()[k] for o in others)) for k, a in enumerate(self.arrays())))

    def flat(self, agent: int) -> np.ndarray:
        return np.concatenate([a[agent].ravel() for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def init_policies(n_agents: int, rng: np.random.Generator) -> PolicySet:
    """Uniform(+-1/sqrt(fan_in)) weights; zero biases except log-sigma at -2."""
    w1 = rng.uniform(-1.0, 1.0, size=(n_agents, HIDDEN, OBS_DIM)) / np.sqrt(OBS_DIM)
    w2 = rng.uniform(-1.0, 1.0, size=(n_agents, 2, HIDDEN)) / np.sqrt(HIDDEN)
    b1 = np.zeros((n_agents, HIDDEN))
    b2 = np.zeros((n_agents, 2))
    b2[:, 1] = LOG_SIGMA_INIT
    return PolicySet(w1, b1, w2, b2)


def zero_policies(n_agents: int, log_sigma_bias: float = LOG_SIGMA_INIT) -> PolicySet:
    b2 = np.zeros((n_agents, 2))
    b2[:, 1] = log_sigma_bias
    return PolicySet(np.zeros((n_agents, HIDDEN, OBS_DIM)), np.zeros((n_agents, HIDDEN)),
                     np.zeros((n_agents, 2, HIDDEN)), b2)


class PolicyOutput(NamedTuple):
    mu: np.ndarray
    log_sigma: np.ndarray
    sigma: np.ndarray
    hidden: np.ndarray
    log_sigma_raw: np.ndarray


def _activate(x, activation):
    if activation == "tanh":
        return np.tanh(x)
    if activation == "identity":
        return x
    raise ValueError(activation)


def policy_forward(params: PolicySet, obs: np.ndarray, activation: str = "tanh") -> PolicyOutput:
    """Evaluate every agent's network on observations of shape ``(..., N, 8)``."""
    pre = np.einsum("nhk,...nk->...nh", params.w1, obs) + params.b1
    hidden = _activate(pre, activation)
    out = np.einsum("noh,...nh->...no", params.w2, hidden) + params.b2
    raw = out[..., 1]
    log_sigma = np.clip(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return PolicyOutput(out[..., 0], log_sigma, np.exp(log_sigma), hidden, raw)


def sample_action(out: PolicyOutput | tuple, epsilon):
    """Re-parameterised sample; returns ``(a_raw, a_clipped)``."""
    mu, sigma = (out.mu, out.sigma) if isinstance(out, PolicyOutput) else out
    a_raw = mu + sigma * epsilon
    return a_raw, np.clip(a_raw, -1.0, 1.0)


def action_clip_slope(a_raw):
    return (np.abs(a_raw) <= 1.0).astype(float)


def decode_action(a, kind, params):
    """Map a clipped action in [-1, 1] to a device power command (kW)."""
    if kind == "battery":
        return a * params.p_max
    if kind == "heatpump":
        return 0.5 * (a + 1.0) * params.p_max
    if kind == "generator":
        return params.p_min + 0.5 * (a + 1.0) * (params.p_max - params.p_min)
    raise ValueError(f"unknown device kind {kind!r}")


def decode_slope(kind, params):
    if kind == "battery":
        return params.p_max
    if kind == "heatpump":
        return 0.5 * params.p_max
    if kind == "generator":
        return 0.5 * (params.p_max - params.p_min)
    raise ValueError(f"unknown device kind {kind!r}")


def output_gradients(g_a, epsilon):
    """Reparameterisation rule: ``g_mu = g_a``, ``g_sigma = g_a * epsilon``."""
    g_a = np.asarray(g_a, dtype=float)
    return g_a, g_a * epsilon


def entropy(sigma):
    return 0.5 * np.log(2.0 * np.pi * np.e * sigma**2)


def parameter_gradient(
    params: PolicySet,
    obs: np.ndarray,
    g_mu: np.ndarray,
    g_sigma: np.ndarray,
    out: PolicyOutput | None = None,
    activation: str = "tanh",
) -> PolicySet:
    """Gradient of ``sum(g_mu * mu(theta) + g_sigma * sigma(theta))`` over a batch.

    ``obs`` has shape ``(..., N, 8)`` and the output gradients ``(..., N)``.
    The log-sigma clamp passes gradient on and inside its bounds only.
    """
    if out is None:
        out = policy_forward(params, obs, activation)
    g_raw = g_sigma * out.sigma * ((out.log_sigma_raw >= LOG_SIGMA_MIN) & (out.log_sigma_raw <= LOG_SIGMA_MAX))
    g_out = np.stack([g_mu, g_raw], axis=-1)  # (..., N, 2)
    n = params.n_agents
    g_out = g_out.reshape(-1, n, 2)
    hidden = out.hidden.reshape(-1, n, HIDDEN)
    gb2 = g_out.sum(axis=0)
    gw2 = np.einsum("bno,bnh->noh", g_out, hidden)
    g_h = np.einsum("bno,noh->bnh", g_out, params.w2)
    if activation == "tanh":
        g_pre = g_h * (1.0 - hidden**2)
    else:
        g_pre = g_h
    gb1 = g_pre.sum(axis=0)
    gw1 = np.einsum("bnh,bnk->nhk", g_pre, obs.reshape(-1, n, OBS_DIM))
    return PolicySet(gw1, gb1, gw2, gb2)


# ---------------------------------------------------------------------------
# observations


def urgency(fleet, state, t_bar):
    """Raw terminal-state urgency, clamped to [-3, 3]; zero for generators."""
    state = np.asarray(state, dtype=float)
    num = np.zeros_like(state)
    den = np.ones_like(state)
    remaining = 1.0 - t_bar
    b = fleet.idx["battery"]
    if b.size:
        p = fleet.params["battery"]
        num[..., b] = p.e_target - state[..., b]
        den[..., b] = remaining * p.e_max / 2.0
    h = fleet.idx["heatpump"]
    if h.size:
        p = fleet.params["heatpump"]
        num[..., h] = p.theta_target - state[..., h]
        den[..., h] = remaining * p.delta
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.sign(num) * URGENCY_CLAMP)
    return np.clip(u, -URGENCY_CLAMP, URGENCY_CLAMP)


def normalised_state(fleet, state):
    state = np.asarray(state, dtype=float)
    x = np.zeros_like(state)
    for kind in ("battery", "heatpump", "generator"):
        i = fleet.idx[kind]
        if not i.size:
            continue
        p = fleet.params[kind]
        if kind == "battery":
            x[..., i] = state[..., i] / p.e_max
        elif kind == "heatpump":
            x[..., i] = (state[..., i] - (p.theta_set - p.delta)) / (2.0 * p.delta)
        else:
            span = np.where(p.p_max > p.p_min, p.p_max - p.p_min, 1.0)
            x[..., i] = (state[..., i] - p.p_min) / span
    return x


def _minmax(x, lo, hi):
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def build_observations(fleet, state, net_demand, price_import, price_export, theta_out, v_local, t, n_steps, stats):
    """Stack the 8 local features for every agent.

    ``state``, ``net_demand`` and ``v_local`` are per agent with shape
    ``(..., N)``; prices and outdoor temperature are broadcast exogenous
    signals of shape ``(...)``. Each agent's row depends only on its own
    state, demand and voltage.
    """
    state = np.asarray(state, dtype=float)
    shape = state.shape
    t_bar = t / n_steps
    feats = np.empty(shape + (OBS_DIM,))
    feats[..., 0] = t_bar
    feats[..., 1] = normalised_state(fleet, state)
    feats[..., 2] = _minmax(np.asarray(net_demand), *stats["net_demand"])
    feats[..., 3] = np.asarray(_minmax(np.asarray(price_import, dtype=float), *stats["price_import"]))[..., None]
    feats[..., 4] = np.asarray(_minmax(np.asarray(price_export, dtype=float), *stats["price_export"]))[..., None]
    feats[..., 5] = np.asarray(_minmax(np.asarray(theta_out, dtype=float), *stats["temp"]))[..., None]
    feats[..., 6] = (urgency(fleet, state, t_bar) + URGENCY_CLAMP) / (2 * URGENCY_CLAMP)
    feats[..., 7] = np.clip((np.asarray(v_local) - 0.9) / 0.2, 0.0, 1.0)
    return feats


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: PolicySet, agent_ids, path: str | Path, extra: dict | None = None) -> None:
    doc = {
        "layout_version": LAYOUT_VERSION,
        "obs_dim": OBS_DIM,
        "hidden": HIDDEN,
        "layout": ["w1", "b1", "w2", "b2"],
        "agents": {aid: params.flat(k).tolist() for k, aid in enumerate(agent_ids)},
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path: str | Path, agent_ids=None) -> PolicySet:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("layout_version") != LAYOUT_VERSION:
        raise ValueError(f"unsupported checkpoint layout {doc.get('layout_version')!r}")
    ids = list(doc["agents"]) if agent_ids is None else list(agent_ids)
    flat = np.array([doc["agents"][a] for a in ids], dtype=float)
    sizes = [HIDDEN * OBS_DIM, HIDDEN, 2 * HIDDEN, 2]
    cuts = np.cumsum(sizes)[:-1]
    w1, b1, w2, b2 = np.split(flat, cuts, axis=1)
    n = len(ids)
    return PolicySet(w1.reshape(n, HIDDEN, OBS_DIM), b1, w2.reshape(n, 2, HIDDEN), b2)
