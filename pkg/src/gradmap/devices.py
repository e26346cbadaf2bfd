"""Grid-edge device models: battery, heat pump, controllable generator.

Every step follows the same pattern: the command implies an unconstrained
next value (energy, temperature, power change), the physical value is the
clipped version, and the actual AC power is back-calculated from the
clipped value. Step functions broadcast, so parameters may hold one value
per agent and states may carry a leading batch axis.

Clip subgradient convention: 1 inside the interval and on its boundary,
0 strictly outside. ``|x|`` and ``[x]^+`` have subgradient 0 at 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

KINDS = ("battery", "heatpump", "generator")
DEFAULT_POWER_FACTOR = 0.95


def _relu(x):
    return np.maximum(x, 0.0)


def _inside(x, lo, hi):
    return ((x >= lo) & (x <= hi)).astype(float)


@dataclass(frozen=True)
class _Params:
    @classmethod
    def stack(cls, items):
        """Column-stack per-agent parameter records into array fields."""
        if not items:
            return None
        return cls(**{f.name: np.array([getattr(p, f.name) for p in items], dtype=float) for f in fields(cls)})

    def to_dict(self):
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass(frozen=True)
class BatteryParams(_Params):
    e_max: float
    p_max: float
    e_target: float
    c_deg: float = 0.02
    eff_a: float = 0.95
    eff_b: float = 0.0
    eff_c: float = 6.0

    def validate(self):
        if not self.e_max > 0 or not self.p_max > 0:
            raise ValueError("battery e_max and p_max must be positive")
        if not 0 < self.e_target <= self.e_max:
            raise ValueError("battery e_target must lie in (0, e_max]")
        if self.c_deg < 0:
            raise ValueError("battery c_deg must be nonnegative")
        lo = self.eff_a - self.eff_b  # efficiency at zero power (smallest)
        if not (0 < lo and self.eff_a <= 1 and self.eff_b >= 0):
            raise ValueError("battery efficiency curve must stay in (0, 1]")


@dataclass(frozen=True)
class HeatPumpParams(_Params):
    r: float
    c: float
    cop: float
    p_max: float
    theta_set: float
    delta: float
    theta_target: float
    c_use: float = 0.01

    def validate(self):
        for name in ("r", "c", "cop", "p_max", "delta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"heat pump {name} must be positive")
        if not self.theta_set - self.delta <= self.theta_target <= self.theta_set + self.delta:
            raise ValueError("heat pump theta_target must lie inside the comfort band")


@dataclass(frozen=True)
class GeneratorParams(_Params):
    p_min: float
    p_max: float
    ramp_dn: float
    ramp_up: float
    fuel_a: float
    fuel_b: float

    def validate(self):
        if self.p_min > self.p_max:
            raise ValueError("generator p_min must not exceed p_max")
        if not self.ramp_dn < 0 < self.ramp_up:
            raise ValueError("generator ramps need ramp_dn < 0 < ramp_up")
        if self.fuel_b < 0:
            raise ValueError("generator fuel_b must be nonnegative")


class StepResult(NamedTuple):
    next_state: np.ndarray
    actual_power: np.ndarray
    implied: np.ndarray
    cost: np.ndarray
    violation: np.ndarray


# ---------------------------------------------------------------------------
# battery


def efficiency(p_cmd, params: BatteryParams):
    return params.eff_a - params.eff_b * np.exp(-params.eff_c * np.abs(p_cmd) / params.p_max)


def efficiency_slope(p_cmd, params: BatteryParams):
    return (
        params.eff_b * params.eff_c / params.p_max
        * np.exp(-params.eff_c * np.abs(p_cmd) / params.p_max) * np.sign(p_cmd)
    )


def battery_step(energy, p_cmd, params: BatteryParams, dt: float) -> StepResult:
    eta = efficiency(p_cmd, params)
    e_hat = energy + eta * p_cmd * dt
    e_next = np.clip(e_hat, 0.0, params.e_max)
    power = (e_next - energy) / (eta * dt)
    cost = params.c_deg * np.abs(power) * dt
    viol = (_relu(e_hat - params.e_max) + _relu(-e_hat)) / params.p_max
    return StepResult(e_next, power, e_hat, cost, viol)


def battery_step_backward(energy, p_cmd, params, dt, res: StepResult, g_next, g_power, g_cost, g_viol):
    """Reverse-mode derivative of :func:`battery_step`; returns ``(g_cmd, g_energy)``."""
    eta = efficiency(p_cmd, params)
    deta = efficiency_slope(p_cmd, params)
    de_hat_dcmd = (eta + deta * p_cmd) * dt
    ins = _inside(res.implied, 0.0, params.e_max)
    g_power = g_power + g_cost * params.c_deg * np.sign(res.actual_power) * dt
    # power = (e_next - energy) / (eta dt)
    g_enext = g_next + g_power / (eta * dt)
    g_eta = -g_power * (res.next_state - energy) / (eta**2 * dt)
    g_ehat = g_enext * ins + g_viol * (
        (res.implied > params.e_max).astype(float) - (res.implied < 0).astype(float)
    ) / params.p_max
    g_cmd = g_ehat * de_hat_dcmd + g_eta * deta
    g_energy = g_ehat - g_power / (eta * dt)
    return g_cmd, g_energy


# ---------------------------------------------------------------------------
# heat pump


def heatpump_step(theta, p_cmd, params: HeatPumpParams, theta_out, dt: float) -> StepResult:
    lo = params.theta_set - params.delta
    hi = params.theta_set + params.delta
    leak = (theta_out - theta) / params.r
    th_hat = theta + dt / params.c * (leak + params.cop * p_cmd)
    th_next = np.clip(th_hat, lo, hi)
    power = (params.c / dt * (th_next - theta) - leak) / params.cop
    cost = params.c_use * np.abs(power) * dt
    viol = (_relu(th_hat - hi) + _relu(lo - th_hat)) / params.delta
    return StepResult(th_next, power, th_hat, cost, viol)


def heatpump_step_backward(theta, p_cmd, params, theta_out, dt, res: StepResult, g_next, g_power, g_cost, g_viol):
    lo = params.theta_set - params.delta
    hi = params.theta_set + params.delta
    ins = _inside(res.implied, lo, hi)
    g_power = g_power + g_cost * params.c_use * np.sign(res.actual_power) * dt
    g_thnext = g_next + g_power * params.c / (dt * params.cop)
    g_hat = g_thnext * ins + g_viol * (
        (res.implied > hi).astype(float) - (res.implied < lo).astype(float)
    ) / params.delta
    g_cmd = g_hat * dt * params.cop / params.c
    # direct dependence of power on theta: -c/(dt cop) + 1/(r cop)
    g_theta = (
        g_hat * (1.0 - dt / (params.c * params.r))
        + g_power * (-params.c / dt + 1.0 / params.r) / params.cop
    )
    return g_cmd, g_theta


def heatpump_hold_command(theta, params: HeatPumpParams, theta_out, dt: float):
    """Command that puts the implied next temperature exactly on the set point, clipped to limits."""
    p = (params.c / dt * (params.theta_set - theta) - (theta_out - theta) / params.r) / params.cop
    return np.clip(p, 0.0, params.p_max)


# ---------------------------------------------------------------------------
# generator


def generator_step(p_prev, p_cmd, params: GeneratorParams, dt: float) -> StepResult:
    d_hat = p_cmd - p_prev
    d = np.clip(d_hat, params.ramp_dn, params.ramp_up)
    power = p_prev + d
    cost = (params.fuel_a * power + params.fuel_b * power**2) * dt
    viol = (_relu(d_hat - params.ramp_up) + _relu(params.ramp_dn - d_hat)) / (
        0.5 * (params.ramp_up - params.ramp_dn)
    )
    return StepResult(power, power, d_hat, cost, viol)


def generator_step_backward(p_prev, p_cmd, params, dt, res: StepResult, g_next, g_power, g_cost, g_viol):
    ins = _inside(res.implied, params.ramp_dn, params.ramp_up)
    g_p = g_next + g_power + g_cost * (params.fuel_a + 2.0 * params.fuel_b * res.actual_power) * dt
    g_dhat = g_p * ins + g_viol * (
        (res.implied > params.ramp_up).astype(float) - (res.implied < params.ramp_dn).astype(float)
    ) / (0.5 * (params.ramp_up - params.ramp_dn))
    return g_dhat, g_p - g_dhat


# ---------------------------------------------------------------------------
# meter


def meter_cost(net_power, price_import, price_export, dt: float):
    """Energy bill for one step; ``net_power`` is demand-positive (kW)."""
    return (price_import * _relu(net_power) - price_export * _relu(-net_power)) * dt


def meter_cost_slope(net_power, price_import, price_export, dt: float):
    return np.where(net_power > 0, price_import, np.where(net_power < 0, price_export, 0.0)) * dt


def device_step(kind: str, state, p_cmd, params, dt: float, theta_out=None) -> StepResult:
    if kind == "battery":
        return battery_step(state, p_cmd, params, dt)
    if kind == "heatpump":
        return heatpump_step(state, p_cmd, params, theta_out, dt)
    if kind == "generator":
        return generator_step(state, p_cmd, params, dt)
    raise ValueError(f"unknown device kind {kind!r}")


def device_step_backward(kind: str, state, p_cmd, params, dt, res, g_next, g_power, g_cost, g_viol, theta_out=None):
    """Adjoints ``(d/d command, d/d state)`` of one device step."""
    if kind == "battery":
        return battery_step_backward(state, p_cmd, params, dt, res, g_next, g_power, g_cost, g_viol)
    if kind == "heatpump":
        return heatpump_step_backward(state, p_cmd, params, theta_out, dt, res, g_next, g_power, g_cost, g_viol)
    if kind == "generator":
        return generator_step_backward(state, p_cmd, params, dt, res, g_next, g_power, g_cost, g_viol)
    raise ValueError(f"unknown device kind {kind!r}")


# ---------------------------------------------------------------------------
# fleet


_PARAM_TYPES = {"battery": BatteryParams, "heatpump": HeatPumpParams, "generator": GeneratorParams}


@dataclass(frozen=True)
class Agent:
    id: str
    kind: str
    bus: str
    phase: str
    params: BatteryParams | HeatPumpParams | GeneratorParams
    initial_state: float
    power_factor: float = DEFAULT_POWER_FACTOR

    def p_limit(self) -> float:
        return abs(self.params.p_max)


class Fleet:
    """Agents plus per-kind stacked parameters for vectorised stepping.

    Agent order is the column order of every per-agent array in the
    package. ``idx[kind]`` lists the agent positions of each kind and
    ``params[kind]`` holds their stacked parameters in the same order.
    """

    def __init__(self, agents):
        self.agents = tuple(agents)
        if not self.agents:
            raise ValueError("fleet is empty")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate agent ids")
        for a in self.agents:
            if a.kind not in KINDS:
                raise ValueError(f"agent {a.id}: unknown type {a.kind!r}")
            if a.phase not in ("a", "b", "c"):
                raise ValueError(f"agent {a.id}: phase must be a, b or c")
            if not 0 < a.power_factor <= 1:
                raise ValueError(f"agent {a.id}: power factor must be in (0, 1]")
            a.params.validate()
        self.kinds = np.array([a.kind for a in self.agents])
        self.idx = {k: np.flatnonzero(self.kinds == k) for k in KINDS}
        self.params = {k: _PARAM_TYPES[k].stack([self.agents[i].params for i in self.idx[k]]) for k in KINDS}
        self.initial_state = np.array([a.initial_state for a in self.agents], dtype=float)
        self.p_limit = np.array([a.p_limit() for a in self.agents])
        self.q_ratio = np.array([math.tan(math.acos(a.power_factor)) for a in self.agents])
        self.ids = tuple(ids)

    def __len__(self):
        return len(self.agents)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def node_index(self, network) -> np.ndarray:
        return np.array([network.node_index(a.bus, a.phase) for a in self.agents])

    def to_dict(self) -> dict:
        return {
            "agents": [
                {"id": a.id, "type": a.kind, "bus": a.bus, "phase": a.phase, "params": a.params.to_dict(),
                 "initial_state": a.initial_state, "power_factor": a.power_factor}
                for a in self.agents
            ]
        }


def fleet_from_dict(desc: dict) -> Fleet:
    default_pf = float(desc.get("power_factor", DEFAULT_POWER_FACTOR))
    agents = []
    for rec in desc["agents"]:
        kind = rec["type"]
        if kind not in _PARAM_TYPES:
            raise ValueError(f"agent {rec.get('id')}: unknown type {kind!r}")
        params = _PARAM_TYPES[kind](**rec["params"])
        if "initial_state" in rec:
            x0 = float(rec["initial_state"])
        elif kind == "battery":
            x0 = params.e_target
        elif kind == "heatpump":
            x0 = params.theta_set
        else:
            x0 = 0.5 * (params.p_min + params.p_max)
        agents.append(Agent(str(rec["id"]), kind, str(rec["bus"]), rec["phase"], params, x0,
                            float(rec.get("power_factor", default_pf))))
    return Fleet(agents)


def load_fleet(path: str | Path) -> Fleet:
    with open(path) as fh:
        return fleet_from_dict(json.load(fh))


def save_fleet(fleet: Fleet, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(fleet.to_dict(), fh, indent=1)


def load_bundled_fleet(name: str) -> Fleet:
    return load_fleet(Path(__file__).parent / "data" / f"{name}.json")
