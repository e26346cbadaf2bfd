"""
Three-phase power flow and voltage sensitivities
================================================

Solve the bundled 4-bus feeder under an unbalanced load, push one phase
over its voltage limit with rooftop generation, and check the adjoint
sensitivity of the voltage channel against a finite difference.
"""

import numpy as np

from gradmap import feeder
from gradmap.feeder import Injection

net = feeder.load_bundled_feeder("small4bus")
print(f"{net.n_buses} PQ buses, {net.n_nodes} node-phases, band [{net.v_min}, {net.v_max}] p.u.")

# zero injection: the fixed point is the no-load profile w, reached in one sweep
sol = feeder.solve_power_flow(Injection.zeros(net), net)
print("zero load:", sol.iterations, "iteration, v == w:", np.array_equal(sol.v, net.w))

# demand is negative injection (generation-positive convention)
rng = np.random.default_rng(0)
load = -0.08 * (rng.uniform(0.5, 1.0, net.n_nodes) + 0.3j)
sol = feeder.solve_power_flow(Injection(load), net)
print("loaded: |v| =", np.round(np.abs(sol.v), 4))
print(f"converged in {sol.iterations} iterations, mismatch {feeder.power_flow_mismatch(sol.v, Injection(load), net):.1e}")

# %%
# Heavy generation on phase a of the far bus lifts its voltage out of band.
s = load.copy()
s[net.node_index(net.bus_ids[-1], "a")] += 0.6 + 0.12j
inj = Injection(s)
sol = feeder.solve_power_flow(inj, net, tol=1e-13)
print("worst violation:", feeder.node_violation(np.abs(sol.v), net).max().round(5), "p.u.")

# gradient of the one-step voltage channel w.r.t. [Re s; Im s]
g_v = feeder.voltage_violation_grad(sol.v[None], net, n_agents=1)[0]
sens = feeder.voltage_sensitivity(sol, inj, net, g_v)


def channel(x):
    v = feeder.solve_power_flow(Injection(x), net, tol=1e-14, max_iter=1000).v
    return float(feeder.voltage_violation_from_v(v[None], net, 1))


d = rng.standard_normal(2 * net.n_nodes)
dc = d[: net.n_nodes] + 1j * d[net.n_nodes:]
h = 1e-6
fd = (channel(s + h * dc) - channel(s - h * dc)) / (2 * h)
print(f"directional derivative: adjoint {sens @ d:.8f}, central difference {fd:.8f}")
