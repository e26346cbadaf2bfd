"""Three-phase unbalanced feeder: Z-Bus power flow and voltage sensitivities.

The network is a slack bus plus ``N_B`` three-phase PQ buses. With
``Z = Y_LL^-1`` and ``w = -Z Y_L0 v0`` the power flow is the fixed point

    v = Phi(v, s) = Z i_inj(v, s) + w,
    i_inj(v, s) = conj(s_wye / v) + H^T conj(s_delta / (H v)).

Sensitivities of the voltage-violation scalar with respect to injections
come from the adjoint of that fixed point, solved in stacked
``[Re; Im]`` real coordinates because ``i_inj`` is not holomorphic.

All quantities are per-unit. Injections are generation-positive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .krylov import bicgstab_batched

PF_TOL = 1e-8
PF_MAX_ITER = 200
KRYLOV_TOL = 1e-10

_PHASES = ("a", "b", "c")
_DELTA_BLOCK = np.array([[1.0, -1.0, 0.0], [0.0, 1.0, -1.0], [-1.0, 0.0, 1.0]])


class FeederError(Exception):
    """Base class for feeder errors."""


class MalformedFeeder(FeederError):
    pass


class SingularAdmittance(FeederError):
    pass


class DegenerateVoltage(FeederError):
    pass


class NonConvergence(FeederError):
    pass


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Immutable per-unit feeder physics.

    Node-phase entries are ordered bus-major: index ``3 * k + p`` is phase
    ``p`` (a, b, c) of the ``k``-th PQ bus in ``bus_ids``.
    """

    bus_ids: tuple[str, ...]
    y_ll: np.ndarray
    y_l0: np.ndarray
    z: np.ndarray
    w: np.ndarray
    v0: np.ndarray
    h: sp.csr_matrix
    v_min: float
    v_max: float
    s_base: float = 1.0
    v_base: float = 1.0
    slack_id: str = "slack"
    name: str = ""

    @property
    def n_buses(self) -> int:
        return len(self.bus_ids)

    @property
    def n_nodes(self) -> int:
        return 3 * len(self.bus_ids)

    def node_index(self, bus_id: str, phase: str) -> int:
        try:
            k = self.bus_ids.index(str(bus_id))
        except ValueError:
            raise MalformedFeeder(f"unknown PQ bus {bus_id!r}") from None
        if phase not in _PHASES:
            raise MalformedFeeder(f"unknown phase {phase!r}")
        return 3 * k + _PHASES.index(phase)


@dataclass(frozen=True)
class Injection:
    """Net complex power injections in per-unit, generation-positive."""

    s_wye: np.ndarray
    s_delta: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        s_wye = np.asarray(self.s_wye, dtype=complex)
        s_delta = np.zeros_like(s_wye) if self.s_delta is None else np.asarray(self.s_delta, dtype=complex)
        if s_delta.shape != s_wye.shape:
            raise ValueError("s_wye and s_delta must have the same shape")
        if not (np.isfinite(s_wye).all() and np.isfinite(s_delta).all()):
            raise ValueError("injections must be finite")
        object.__setattr__(self, "s_wye", s_wye)
        object.__setattr__(self, "s_delta", s_delta)

    @classmethod
    def zeros(cls, model: NetworkModel) -> "Injection":
        return cls(np.zeros(model.n_nodes, dtype=complex))


@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray
    i_delta: np.ndarray
    iterations: int
    residual: float
    converged: bool


# ---------------------------------------------------------------------------
# model construction


def _pairs_to_complex(obj: Any, shape: tuple[int, ...], what: str) -> np.ndarray:
    arr = np.asarray(obj, dtype=float)
    if arr.shape != shape + (2,):
        raise MalformedFeeder(f"{what}: expected shape {shape} of [re, im] pairs, got {arr.shape[:-1]}")
    return arr[..., 0] + 1j * arr[..., 1]


def delta_transform(n_buses: int) -> sp.csr_matrix:
    """Block-diagonal phase-to-neutral -> phase-to-phase map (ab, bc, ca)."""
    return sp.block_diag([_DELTA_BLOCK] * n_buses, format="csr")


def build_network(desc: dict) -> NetworkModel:
    """Assemble a :class:`NetworkModel` from a parsed feeder description.

    Branch blocks are 3x3 primitive series admittances between two buses;
    optional bus ``shunt`` blocks are added to the diagonal. Blocks are in
    siemens unless ``y_units`` is ``"pu"``; the base impedance is
    ``V_base^2 / S_base`` with ``V_base`` in kV (phase-to-neutral) and
    ``S_base`` in kVA per phase.
    """
    try:
        buses = desc["buses"]
        branches = desc["branches"]
        s_base = float(desc["S_base"])
        v_base = float(desc["V_base"])
        v_min = float(desc["v_min"])
        v_max = float(desc["v_max"])
        v0 = _pairs_to_complex(desc["v0"], (3,), "v0")
    except KeyError as exc:
        raise MalformedFeeder(f"missing field {exc.args[0]!r}") from None
    if not 0 < v_min < v_max:
        raise MalformedFeeder("need 0 < v_min < v_max")
    if s_base <= 0 or v_base <= 0:
        raise MalformedFeeder("bases must be positive")

    ids = [str(b["id"]) for b in buses]
    if len(set(ids)) != len(ids):
        raise MalformedFeeder("duplicate bus ids")
    for b in buses:
        phases = tuple(b.get("phases", _PHASES))
        if sorted(phases) != list(_PHASES):
            raise MalformedFeeder(f"bus {b['id']!r} must carry phases a, b, c")
    slacks = [str(b["id"]) for b in buses if b.get("slack", False)]
    if len(slacks) != 1:
        raise MalformedFeeder(f"need exactly one slack bus, found {len(slacks)}")
    slack = slacks[0]
    order = [slack] + [i for i in ids if i != slack]
    pos = {bid: k for k, bid in enumerate(order)}

    if desc.get("y_units", "siemens") == "pu":
        y_scale = 1.0
    else:
        y_scale = v_base**2 * 1e3 / s_base  # Z_base in ohms

    n = len(order)
    y = np.zeros((3 * n, 3 * n), dtype=complex)
    touched = {bid: False for bid in order}
    for br in branches:
        f, t = str(br["from"]), str(br["to"])
        if f not in pos or t not in pos:
            raise MalformedFeeder(f"branch {f}->{t} references an unknown bus")
        if f == t:
            raise MalformedFeeder(f"branch {f}->{t} is a self loop")
        blk = _pairs_to_complex(br["y"], (3, 3), f"branch {f}->{t}") * y_scale
        a, b = 3 * pos[f], 3 * pos[t]
        y[a:a + 3, a:a + 3] += blk
        y[b:b + 3, b:b + 3] += blk
        y[a:a + 3, b:b + 3] -= blk
        y[b:b + 3, a:a + 3] -= blk
        touched[f] = touched[t] = True
    for b in buses:
        if "shunt" in b:
            k = 3 * pos[str(b["id"])]
            y[k:k + 3, k:k + 3] += _pairs_to_complex(b["shunt"], (3, 3), f"shunt {b['id']}") * y_scale
    lonely = [bid for bid, ok in touched.items() if not ok]
    if lonely:
        raise MalformedFeeder(f"bus(es) without any connection: {lonely}")

    return _assemble(
        tuple(order[1:]), y[3:, 3:], y[3:, :3], v0, v_min, v_max, s_base, v_base,
        slack_id=slack, name=str(desc.get("name", "")),
    )


def _assemble(bus_ids, y_ll, y_l0, v0, v_min, v_max, s_base=1.0, v_base=1.0, slack_id="slack", name=""):
    try:
        lu = scipy.linalg.lu_factor(y_ll, check_finite=True)
    except (ValueError, scipy.linalg.LinAlgError) as exc:
        raise SingularAdmittance(str(exc)) from None
    if np.min(np.abs(np.diag(lu[0]))) <= 1e-12 * max(np.abs(y_ll).max(), 1.0):
        raise SingularAdmittance("Y_LL is singular (island or zero-impedance loop)")
    z = scipy.linalg.lu_solve(lu, np.eye(len(y_ll), dtype=complex))
    if np.linalg.cond(y_ll) > 1e14:
        raise SingularAdmittance("Y_LL is numerically singular")
    w = -z @ (y_l0 @ v0)
    for arr in (y_ll, y_l0, z, w, v0):
        arr.setflags(write=False)
    return NetworkModel(
        bus_ids=tuple(bus_ids), y_ll=y_ll, y_l0=y_l0, z=z, w=w, v0=v0,
        h=delta_transform(len(bus_ids)), v_min=v_min, v_max=v_max,
        s_base=s_base, v_base=v_base, slack_id=slack_id, name=name,
    )


def load_feeder(path: str | Path) -> NetworkModel:
    with open(path) as fh:
        return build_network(json.load(fh))


def bundled_feeder_path(name: str) -> Path:
    return Path(__file__).parent / "data" / f"{name}.json"


def load_bundled_feeder(name: str) -> NetworkModel:
    return load_feeder(bundled_feeder_path(name))


# ---------------------------------------------------------------------------
# forward map


def _hmul(h: sp.csr_matrix, v: np.ndarray) -> np.ndarray:
    return (h @ v.T).T if v.ndim > 1 else h @ v


def _htmul(h: sp.csr_matrix, u: np.ndarray) -> np.ndarray:
    return (h.T @ u.T).T if u.ndim > 1 else h.T @ u


def _delta_ratio(hv: np.ndarray, s_delta: np.ndarray) -> np.ndarray:
    active = s_delta != 0
    if np.any(hv[active] == 0):
        raise DegenerateVoltage("zero phase-to-phase voltage under a delta load")
    return np.divide(s_delta, hv, out=np.zeros_like(s_delta), where=active)


def injection_map(v: np.ndarray, inj: Injection, model: NetworkModel) -> np.ndarray:
    """Net phase current injections implied by the wye/delta power balance."""
    v = np.asarray(v, dtype=complex)
    if np.any(v == 0):
        raise DegenerateVoltage("zero nodal voltage")
    i = np.conj(inj.s_wye / v)
    if np.any(inj.s_delta != 0):
        i = i + _htmul(model.h, np.conj(_delta_ratio(_hmul(model.h, v), inj.s_delta)))
    return i


def delta_currents(v: np.ndarray, s_delta: np.ndarray, model: NetworkModel) -> np.ndarray:
    return np.conj(_delta_ratio(_hmul(model.h, v), np.asarray(s_delta, dtype=complex)))


def fixed_point_map(v: np.ndarray, inj: Injection, model: NetworkModel) -> np.ndarray:
    """``Phi(v, s) = Z i_inj(v, s) + w`` (rows of ``v`` may be batched)."""
    return injection_map(v, inj, model) @ model.z.T + model.w


def solve_power_flow_batch(
    s_wye: np.ndarray,
    s_delta: np.ndarray | None,
    model: NetworkModel,
    warm_start: np.ndarray | None = None,
    tol: float = PF_TOL,
    max_iter: int = PF_MAX_ITER,
):
    """Z-Bus iteration on a stack of independent injection vectors.

    Returns ``(v, iterations, residual, converged)``; rows are frozen as soon
    as ``||v - Phi(v)||_inf <= tol``. Rows that never converge return the
    iterate with the smallest residual seen.
    """
    s_wye = np.atleast_2d(np.asarray(s_wye, dtype=complex))
    nb = s_wye.shape[0]
    has_delta = s_delta is not None and np.any(s_delta != 0)
    if has_delta:
        s_delta = np.atleast_2d(np.asarray(s_delta, dtype=complex))
    if warm_start is None:
        v = np.broadcast_to(model.w, s_wye.shape).copy()
    else:
        v = np.array(np.broadcast_to(warm_start, s_wye.shape), dtype=complex)

    zt = model.z.T
    active = np.ones(nb, dtype=bool)
    converged = np.zeros(nb, dtype=bool)
    iterations = np.zeros(nb, dtype=int)
    residual = np.full(nb, np.inf)
    best_v = v.copy()

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for it in range(1, max_iter + 1):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            va = v[idx]
            i = np.conj(s_wye[idx] / va)
            if has_delta:
                sd = s_delta[idx]
                hv = _hmul(model.h, va)
                ratio = np.divide(sd, hv, out=np.zeros_like(sd), where=sd != 0)
                i = i + _htmul(model.h, np.conj(ratio))
            phi = i @ zt + model.w
            r = np.max(np.abs(phi - va), axis=1)
            r = np.where(np.isfinite(r), r, np.inf)
            iterations[idx] = it
            better = r < residual[idx]
            best_v[idx[better]] = va[better]
            residual[idx[better]] = r[better]
            done = r <= tol
            converged[idx[done]] = True
            active[idx[done]] = False
            keep = ~done
            v[idx[keep]] = phi[keep]
            # diverged rows cannot recover
            dead = keep & ~np.isfinite(phi).all(axis=1)
            active[idx[dead]] = False

    return best_v, iterations, residual, converged


def solve_power_flow(
    inj: Injection,
    model: NetworkModel,
    warm_start: np.ndarray | None = None,
    tol: float = PF_TOL,
    max_iter: int = PF_MAX_ITER,
    strict: bool = False,
) -> PowerFlowSolution:
    """Solve ``v = Phi(v, s)`` by fixed-point iteration starting from ``w``.

    A non-converged solve returns the best iterate with ``converged=False``
    unless ``strict`` is set, in which case :class:`NonConvergence` is raised.
    """
    if warm_start is not None and np.shape(warm_start) != (model.n_nodes,):
        raise ValueError(f"warm_start must have length {model.n_nodes}")
    v, it, res, ok = solve_power_flow_batch(
        inj.s_wye[None], inj.s_delta[None], model, None if warm_start is None else warm_start[None],
        tol=tol, max_iter=max_iter,
    )
    v = v[0]
    with np.errstate(all="ignore"):
        i_delta = np.conj(np.divide(inj.s_delta, _hmul(model.h, v), out=np.zeros_like(inj.s_delta),
                                    where=inj.s_delta != 0))
    sol = PowerFlowSolution(v=v, i_delta=i_delta, iterations=int(it[0]), residual=float(res[0]),
                            converged=bool(ok[0]))
    if strict and not sol.converged:
        raise NonConvergence(f"no convergence after {sol.iterations} iterations (residual {sol.residual:.3e})")
    return sol


def power_flow_mismatch(v: np.ndarray, inj: Injection, model: NetworkModel) -> float:
    """Largest per-unit residual of the wye, delta and Kirchhoff equations."""
    v = np.asarray(v, dtype=complex)
    i = model.y_l0 @ model.v0 + model.y_ll @ v
    hv = _hmul(model.h, v)
    i_d = delta_currents(v, inj.s_delta, model)
    wye = _htmul(model.h, np.conj(i_d)) * v + inj.s_wye - v * np.conj(i)
    delta = inj.s_delta - hv * np.conj(i_d)
    return float(max(np.max(np.abs(wye)), np.max(np.abs(delta))))


# ---------------------------------------------------------------------------
# voltage violation channel


def node_violation(vmag: np.ndarray, model: NetworkModel) -> np.ndarray:
    """Per node-phase violation ``[|v| - v_max]^+ + [v_min - |v|]^+``."""
    return np.maximum(vmag - model.v_max, 0.0) + np.maximum(model.v_min - vmag, 0.0)


def _volt_denominator(model: NetworkModel, n_steps: int, n_agents: int) -> float:
    return 0.5 * (model.v_max - model.v_min) * n_steps / n_agents


def voltage_violation_from_v(v: np.ndarray, model: NetworkModel, n_agents: int) -> np.ndarray:
    """Voltage channel for voltages of shape ``(..., T, 3N_B)``."""
    viol = node_violation(np.abs(v), model).max(axis=-1)
    return viol.sum(axis=-1) / _volt_denominator(model, v.shape[-2], n_agents)


def voltage_violation(
    solutions: Sequence[PowerFlowSolution], model: NetworkModel, n_agents: int
) -> float:
    """Normalised voltage channel over one episode of per-step solutions."""
    v = np.stack([s.v for s in solutions])
    return float(voltage_violation_from_v(v, model, n_agents))


def voltage_violation_grad(v: np.ndarray, model: NetworkModel, n_agents: int) -> np.ndarray:
    """Gradient of the voltage channel w.r.t. each step's ``[Re v; Im v]``.

    ``v`` has shape ``(..., T, n)``; the result has shape ``(..., T, 2n)``.
    The full unit subgradient of the max goes to the lowest-index maximiser
    and ``[x]^+`` has subgradient 0 at ``x = 0``.
    """
    v = np.asarray(v, dtype=complex)
    mag = np.abs(v)
    viol = node_violation(mag, model)
    k = np.argmax(viol, axis=-1)
    vk = np.take_along_axis(viol, k[..., None], -1)[..., 0]
    magk = np.take_along_axis(mag, k[..., None], -1)[..., 0]
    sign = np.where(magk > model.v_max, 1.0, np.where(magk < model.v_min, -1.0, 0.0))
    sign = np.where(vk > 0, sign, 0.0) / _volt_denominator(model, v.shape[-2], n_agents)
    vsel = np.take_along_axis(v, k[..., None], -1)[..., 0]
    n = v.shape[-1]
    g = np.zeros(v.shape[:-1] + (2 * n,))
    with np.errstate(invalid="ignore", divide="ignore"):
        dre = np.where(sign != 0, sign * vsel.real / magk, 0.0)
        dim = np.where(sign != 0, sign * vsel.imag / magk, 0.0)
    np.put_along_axis(g, k[..., None], dre[..., None], -1)
    np.put_along_axis(g, (k + n)[..., None], dim[..., None], -1)
    return g


# ---------------------------------------------------------------------------
# implicit differentiation


def stack_complex(z: np.ndarray) -> np.ndarray:
    return np.concatenate([z.real, z.imag], axis=-1)


def unstack_real(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1] // 2
    return x[..., :n] + 1j * x[..., n:]


class _AdjointOperators:
    """Transpose Jacobian products of ``Phi`` at a batch of fixed points.

    ``i_inj`` is anti-holomorphic in both ``v`` and ``s``, so each Jacobian
    has the form ``d Phi = B conj(d.)``. In stacked coordinates its transpose
    acts as ``gamma -> stack(B^T conj(complex(gamma)))``.
    """

    def __init__(self, v, s_wye, s_delta, model):
        self.model = model
        self.v = v
        self.d_wye = -np.conj(s_wye) / np.conj(v) ** 2
        self.hv = _hmul(model.h, v)
        self.has_delta = s_delta is not None and np.any(s_delta != 0)
        if self.has_delta:
            self.d_delta = np.divide(
                np.conj(s_delta), np.conj(self.hv) ** 2, out=np.zeros_like(s_delta), where=s_delta != 0
            )

    def _d(self, u):
        out = self.d_wye * u
        if self.has_delta:
            out = out - _htmul(self.model.h, self.d_delta * _hmul(self.model.h, u))
        return out

    def jv_t(self, gamma):
        u = np.conj(unstack_real(gamma)) @ self.model.z
        return stack_complex(self._d(u))

    def lhs(self, gamma):
        return gamma - self.jv_t(gamma)

    def js_t(self, gamma, wrt="wye"):
        u = np.conj(unstack_real(gamma)) @ self.model.z
        if wrt == "wye":
            return stack_complex(u / np.conj(self.v))
        return stack_complex(_hmul(self.model.h, u) / np.conj(self.hv))

    def dense_lhs(self):
        """Dense ``I - (dPhi/dv)^T`` per row, shape ``(K, 2n, 2n)``."""
        z = self.model.z
        n = z.shape[0]
        d = self.d_wye[..., :, None] * np.eye(n)
        if self.has_delta:
            h = self.model.h.toarray()
            d = d - np.einsum("ji,kj,jl->kil", h, self.d_delta, h)
        b = z @ d  # (K, n, n)
        jv = np.block([[b.real, b.imag], [b.imag, -b.real]])
        return np.eye(2 * n) - np.swapaxes(jv, -1, -2)


def voltage_sensitivity_batch(
    v: np.ndarray,
    s_wye: np.ndarray,
    s_delta: np.ndarray | None,
    model: NetworkModel,
    g_v: np.ndarray,
    method: str = "bicgstab",
    wrt: str = "wye",
    tol: float = KRYLOV_TOL,
):
    """Adjoint sensitivities for a stack of converged operating points.

    Returns ``(sens, failed)``. ``sens[k]`` is the stacked real gradient of
    the scalar whose voltage gradient is ``g_v[k]`` with respect to the
    wye (or delta) injections; rows whose Krylov solve failed are zero.
    """
    v = np.atleast_2d(np.asarray(v, dtype=complex))
    s_wye = np.atleast_2d(np.asarray(s_wye, dtype=complex))
    if s_delta is not None:
        s_delta = np.atleast_2d(np.asarray(s_delta, dtype=complex))
    g_v = np.atleast_2d(np.asarray(g_v, dtype=float))
    ops = _AdjointOperators(v, s_wye, s_delta, model)
    if method == "bicgstab":
        res = bicgstab_batched(ops.lhs, g_v, tol=tol, maxiter=2 * g_v.shape[1])
        gamma, failed = res.x, ~res.converged
    elif method == "direct":
        a = ops.dense_lhs()
        gamma = np.stack([scipy.linalg.lu_solve(scipy.linalg.lu_factor(ak), gk) for ak, gk in zip(a, g_v)])
        failed = ~np.isfinite(gamma).all(axis=1)
    else:
        raise ValueError(f"unknown adjoint method {method!r}")
    sens = ops.js_t(gamma, wrt=wrt)
    sens[failed] = 0.0
    sens[~np.isfinite(sens).all(axis=1)] = 0.0
    return sens, failed


def voltage_sensitivity(
    solution: PowerFlowSolution,
    inj: Injection,
    model: NetworkModel,
    g_v: np.ndarray,
    method: str = "bicgstab",
    wrt: str = "wye",
    diagnostics: dict | None = None,
) -> np.ndarray:
    """Gradient of the voltage channel w.r.t. ``[Re s; Im s]`` at one step.

    Solves ``(I - dPhi/dv^T) gamma = g_v`` and returns ``dPhi/ds^T gamma``.
    A failed Krylov solve yields the zero vector and bumps
    ``diagnostics["adjoint_failures"]``.
    """
    g_v = np.asarray(g_v, dtype=float)
    if g_v.shape != (2 * model.n_nodes,):
        raise ValueError(f"g_v must have length {2 * model.n_nodes}")
    if not np.any(g_v):
        return np.zeros(2 * model.n_nodes)
    sens, failed = voltage_sensitivity_batch(
        solution.v, inj.s_wye, inj.s_delta, model, g_v, method=method, wrt=wrt
    )
    if failed[0] and diagnostics is not None:
        diagnostics["adjoint_failures"] = diagnostics.get("adjoint_failures", 0) + 1
    return sens[0]


def to_json_pairs(z: Iterable[complex]) -> list:
    return [[float(c.real), float(c.imag)] for c in np.ravel(z)]
