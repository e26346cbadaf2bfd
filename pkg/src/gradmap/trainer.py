"""Primal-dual training with gradient reuse, the exact-gradient baseline and evaluation.

One primal step differentiates a batch of rollouts once, caches the
output-space gradients ``(g_mu, g_sigma)`` and then takes ``k_prox``
optimiser steps on a proximal surrogate built from that cache. The
surrogate penalises the squared displacement of the policy outputs from
the outputs that generated the batch, with an adaptively scaled weight
``beta``. With ``k_prox = 1`` and no penalty the same loop performs plain
exact-gradient descent (``mode="gradma"``).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import rollout
from .policy import (
    PolicySet,
    entropy,
    init_policies,
    parameter_gradient,
    policy_forward,
    save_checkpoint,
)
from .rollout import CHANNELS, DualState, Environment, RolloutBatch

BETA_MIN = 50.0
BETA_MAX = 1e4
BETA_FACTOR = 1.1
MODES = ("gradmap", "gradma", "naive")
DEFAULT_LR = {"gradmap": 5e-4, "gradma": 2e-3, "naive": 0.0}


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrustState:
    beta: float = 1000.0
    epsilon_tr: float = 0.03


def beta_adapt(trust: TrustState, measured: float) -> TrustState:
    """Multiplicative penalty adaptation with a dead zone ``[eps/2, eps]``."""
    beta = trust.beta
    if measured > trust.epsilon_tr:
        beta *= BETA_FACTOR
    elif measured < 0.5 * trust.epsilon_tr:
        beta /= BETA_FACTOR
    return TrustState(float(np.clip(beta, BETA_MIN, BETA_MAX)), trust.epsilon_tr)


def dual_update(duals, v_bar, alpha: float, frozen=()) -> DualState:
    """Projected ascent ``lambda <- [lambda + alpha * v_bar]^+``; frozen channels stay 0."""
    lam = np.maximum(rollout._dual_array(duals) + alpha * np.asarray(v_bar, dtype=float), 0.0)
    for name in frozen:
        lam[CHANNELS.index(name)] = 0.0
    return DualState.from_array(lam)


@dataclass
class TrainConfig:
    mode: str = "gradmap"
    k_dual: int = 10
    k_primal: int = 5
    k_prox: int = 40
    learning_rate: float | None = None
    dual_rate: float = 150.0
    tau: float = 0.01
    M: float = rollout.M_DEFAULT
    batch_size: int = 32
    seed: int = 0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    beta_init: float = 1000.0
    epsilon_tr: float = 0.03
    frozen_channels: tuple = ()
    randomize_initial: bool = True
    eval_every_primal: bool = False
    workers: int = 1
    adjoint: str = "bicgstab"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("k_dual", "k_primal", "k_prox", "batch_size", "workers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mode == "gradma":
            self.k_prox = 1
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR[self.mode]
        if self.mode != "naive" and not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.dual_rate > 0 or self.M <= 0:
            raise ValueError("dual_rate and M must be positive")
        self.frozen_channels = tuple(self.frozen_channels)
        for c in self.frozen_channels:
            if c not in CHANNELS:
                raise ValueError(f"unknown channel {c!r}")

    @property
    def penalised(self) -> bool:
        return self.mode == "gradmap"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frozen_channels"] = list(self.frozen_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# Inner-loop settings for the 10-agent desk fixtures: with only 40 inner
# steps per primal step the default rate cannot reach the trust radius.
DESK_GRADMAP = {"learning_rate": 5e-3, "beta_init": 200.0}


def desk_config(mode: str = "gradmap", seed: int = 0, **overrides) -> TrainConfig:
    """Desk-scale configuration (T=24, batch 32, 10 x 5 x 40 loops)."""
    kw = dict(DESK_GRADMAP) if mode == "gradmap" else {}
    kw.update(overrides)
    return TrainConfig(mode=mode, seed=seed, **kw)


class Adam:
    """Adaptive-moment optimiser over a :class:`PolicySet`."""

    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.reset()

    def reset(self):
        self.m = self.v = None
        self.t = 0

    def step(self, params: PolicySet, grad: PolicySet) -> PolicySet:
        if self.m is None:
            self.m = grad.map(np.zeros_like)
            self.v = grad.map(np.zeros_like)
        self.t += 1
        b1, b2 = self.b1, self.b2
        self.m = self.m.map(lambda m, g: b1 * m + (1 - b1) * g, grad)
        self.v = self.v.map(lambda v, g: b2 * v + (1 - b2) * g * g, grad)
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        return params.map(lambda p, m, v: p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps), self.m, self.v)


# ---------------------------------------------------------------------------
# surrogate


def surrogate_loss(params: PolicySet, batch: RolloutBatch, beta: float, tau: float):
    """Proximal surrogate and its parameter gradient.

    Averages ``g_mu*mu + g_sigma*sigma - tau*H(sigma) + beta/2*(dmu^2 + dsigma^2)``
    over every cached (episode, step, agent) sample, with fresh outputs
    ``mu(theta), sigma(theta)`` on the cached observations. Returns
    ``(loss, grad)``.
    """
    out = policy_forward(params, batch.obs)
    d_mu = out.mu - batch.mu_old
    d_sigma = out.sigma - batch.sigma_old
    n = batch.n_samples
    terms = (batch.g_mu * out.mu + batch.g_sigma * out.sigma - tau * entropy(out.sigma)
             + 0.5 * beta * (d_mu**2 + d_sigma**2))
    loss = float(terms.sum() / n)
    # dH/dsigma = 1/sigma
    g_mu = (batch.g_mu + beta * d_mu) / n
    g_sigma = (batch.g_sigma - tau / out.sigma + beta * d_sigma) / n
    grad = parameter_gradient(params, batch.obs, g_mu, g_sigma, out=out)
    return loss, grad


def lagrangian_gradient(params: PolicySet, batch: RolloutBatch) -> PolicySet:
    """Parameter gradient of the batch-mean Lagrangian through the cached outputs."""
    n_ep = batch.g_mu.shape[0]
    return parameter_gradient(params, batch.obs, batch.g_mu / n_ep, batch.g_sigma / n_ep)


def trust_metric(params: PolicySet, batch: RolloutBatch) -> float:
    out = policy_forward(params, batch.obs)
    return float(np.sqrt(np.mean((out.mu - batch.mu_old) ** 2 + (out.sigma - batch.sigma_old) ** 2)))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalMetrics:
    total_cost: float
    volt: float
    max_voltage_violation: float
    bend: float
    hend: float
    channels: np.ndarray
    day_costs: np.ndarray
    trace: rollout.EpisodeTrace = field(repr=False)

    def row(self) -> dict:
        d = {"total_cost": self.total_cost, "max_voltage_violation": self.max_voltage_violation}
        d.update({f"V_{c}": float(v) for c, v in zip(CHANNELS, self.channels)})
        return d


def evaluate(policies: PolicySet | None, env: Environment, scenario, days=None, consecutive: bool = True,
             x0=None) -> EvalMetrics:
    """Deterministic (mean-action) evaluation over ``days``; ``policies=None`` runs the naive rules.

    With ``consecutive`` the final state of each day seeds the next day.
    Channels are averaged over days; cost is summed.
    """
    days = scenario.test_days if days is None else np.atleast_1d(days)
    x = np.array(env.fleet.initial_state if x0 is None else x0, dtype=float)
    controller = "naive" if policies is None else "policy"
    parts = []
    for d in days:
        exog = scenario.episodes([d])
        exog["stats"] = scenario.stats
        tr = rollout.simulate(env, policies, exog, x[None], controller=controller)
        parts.append(tr)
        if consecutive:
            x = tr.state[0, -1]
        else:
            x = np.array(env.fleet.initial_state if x0 is None else x0, dtype=float)
    trace = rollout._concat_traces(parts)
    ch = trace.channels.mean(axis=0)
    return EvalMetrics(
        total_cost=float(trace.cost.sum()),
        volt=float(ch[0]),
        max_voltage_violation=float(rollout.max_voltage_violation(trace, env.network).max()),
        bend=float(ch[2]),
        hend=float(ch[4]),
        channels=ch,
        day_costs=trace.cost.copy(),
        trace=trace,
    )


def naive_baseline(env: Environment, scenario, days=None, consecutive: bool = True) -> EvalMetrics:
    return evaluate(None, env, scenario, days, consecutive)


def write_metrics(metrics: EvalMetrics, path) -> None:
    row = metrics.row()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(row))
        w.writerow([repr(float(v)) for v in row.values()])


# ---------------------------------------------------------------------------
# training loop


LOG_FIELDS = (
    ["dual_step", "primal_step", "backward_calls", "cost_mean"]
    + [f"V_{c}" for c in CHANNELS]
    + [f"lambda_{c}" for c in CHANNELS]
    + ["beta", "trust", "grad_nan", "adjoint_failures", "pf_failures", "eval_cost"]
)


@dataclass
class TrainResult:
    policies: PolicySet
    duals: DualState
    trust: TrustState
    log: list
    wall_times: list
    backward_calls: int
    config: TrainConfig


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in LOG_FIELDS])


def train(config: TrainConfig, fleet, network, scenario, out_dir=None, policies: PolicySet | None = None,
          progress=None) -> TrainResult:
    """Run the dual / primal / proximal loops.

    ``out_dir`` (optional) receives ``training_log.csv``, ``timing.csv`` and
    ``checkpoint_<dual>.json`` after every dual step. ``progress`` is called
    with each log row.
    """
    cfg = config
    env = Environment(fleet, network, scenario.dt, M=cfg.M, adjoint=cfg.adjoint)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if policies is None:
        policies = init_policies(fleet.n_agents, np.random.default_rng(cfg.seed))
    duals = DualState()
    trust = TrustState(cfg.beta_init, cfg.epsilon_tr)
    log, walls = [], []

    if cfg.mode == "naive":
        m = naive_baseline(env, scenario)
        if out is not None:
            write_metrics(m, out / "metrics.csv")
        return TrainResult(policies, duals, trust, log, walls, 0, cfg)

    adam = Adam(cfg.learning_rate, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
    beta = trust.beta if cfg.penalised else 0.0
    calls = 0
    for d in range(cfg.k_dual):
        batch = None
        for p in range(cfg.k_primal):
            t0 = time.perf_counter()
            batch = rollout.simulate_batch(policies, env, scenario, cfg.batch_size, (cfg.seed, calls + 1),
                                           duals=duals, randomize_initial=cfg.randomize_initial,
                                           workers=cfg.workers)
            calls += 1
            adam.reset()
            for _ in range(cfg.k_prox):
                _, grad = surrogate_loss(policies, batch, beta, cfg.tau)
                policies = adam.step(policies, grad)
            if not policies.is_finite():
                raise TrainingAborted(f"non-finite parameters at dual step {d}, primal step {p}")
            measured = trust_metric(policies, batch)
            if cfg.penalised:
                trust = beta_adapt(trust, measured)
                beta = trust.beta
            row = {
                "dual_step": d, "primal_step": p, "backward_calls": calls, "cost_mean": batch.cost_mean,
                **{f"V_{c}": float(v) for c, v in zip(CHANNELS, batch.channel_means)},
                **{f"lambda_{c}": float(v) for c, v in zip(CHANNELS, duals.as_array())},
                "beta": trust.beta if cfg.penalised else 0.0, "trust": measured,
                "grad_nan": batch.nan_count, "adjoint_failures": batch.adjoint_failures,
                "pf_failures": batch.n_failed,
                "eval_cost": evaluate(policies, env, scenario).total_cost if cfg.eval_every_primal else "",
            }
            log.append(row)
            walls.append(time.perf_counter() - t0)
            if progress is not None:
                progress(row)
        duals = dual_update(duals, batch.channel_means, cfg.dual_rate, cfg.frozen_channels)
        if out is not None:
            save_checkpoint(policies, fleet.ids, out / f"checkpoint_{d}.json",
                            extra={"duals": duals.as_array().tolist(), "beta": trust.beta})
            write_log(log, out / "training_log.csv")
            with open(out / "timing.csv", "w") as fh:
                fh.write("row,wall_seconds\n" + "".join(f"{i},{w:.6f}\n" for i, w in enumerate(walls)))
    return TrainResult(policies, duals, trust, log, walls, calls, cfg)


def load_config(path) -> dict:
    """Read a JSON or ``key=value`` config file into a plain dict."""
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out
